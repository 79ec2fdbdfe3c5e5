//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TVCKPT\0\0" | u32 format version | u64 header length | header JSON
//! u32 array count | per array: u32 name length, name, u64 rows, u64 cols,
//!                   u8 decay flag, rows*cols f64
//! per array: first moments (f64) | per array: second moments (f64)
//! ```
//!
//! The header echoes the model, training and dataset configs, the step
//! counter and the seed the per-step random streams derive from, which
//! together are the full random state of a run.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Grads;
use crate::train::{AdamState, DatasetSpec, TrainingConfig};
use crate::transformer::{ModelConfig, VerifierParams, PARAMS_VERSION};

const MAGIC: &[u8; 8] = b"TVCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or deploy a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: VerifierParams,
    pub adam: AdamState,
    pub training: TrainingConfig,
    pub dataset: DatasetSpec,
    /// Completed optimisation steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params_version: u32,
    model: ModelConfig,
    raw_dim: usize,
    training: TrainingConfig,
    dataset: DatasetSpec,
    step: u64,
    adam_t: u64,
    rng_seed: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            params_version: self.params.version,
            model: self.params.model.clone(),
            raw_dim: self.params.raw_dim,
            training: self.training.clone(),
            dataset: self.dataset.clone(),
            step: self.step,
            adam_t: self.adam.t,
            rng_seed: self.training.seed,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(self.params.store.num_scalars() * 24 + json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.store.len() as u32).to_le_bytes());
        for (_, p) in self.params.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.rows as u64).to_le_bytes());
            out.extend_from_slice(&(p.cols as u64).to_le_bytes());
            out.push(u8::from(p.decay));
            put_f64s(&mut out, &p.value);
        }
        for g in self.adam.m.data.iter().chain(&self.adam.v.data) {
            put_f64s(&mut out, g);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        if header.params_version != PARAMS_VERSION {
            return Err(bad(format!("unsupported parameter layout version {}", header.params_version)));
        }
        let mut params = VerifierParams::new(header.model, header.raw_dim, header.training.seed)?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let decay = r.u8()? != 0;
            let values = r.f64s(rows * cols)?;
            if params.store.get_by_name(&name).is_some_and(|p| p.decay != decay) {
                return Err(bad(format!("decay flag of {name} does not match the model")));
            }
            arrays.push((name, rows, cols, values));
        }
        params.store.load_values(&arrays)?;
        let moments = |r: &mut Reader<'_>| -> Result<Grads> {
            let mut g = Grads::zeros_like(&params.store);
            for buf in g.data.iter_mut() {
                *buf = r.f64s(buf.len())?;
            }
            Ok(g)
        };
        let m = moments(&mut r)?;
        let v = moments(&mut r)?;
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes after optimizer state"));
        }
        params.validate()?;
        Ok(Self {
            params,
            adam: AdamState { m, v, t: header.adam_t },
            training: header.training,
            dataset: header.dataset,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn sample() -> Checkpoint {
        let model = ModelConfig {
            width: 8,
            heads: 2,
            points: 2,
            extractor_layers: 1,
            decoder_layers: 1,
            id_dim: 4,
            embed_freqs: 2,
            ..Default::default()
        };
        let params = VerifierParams::new(model, 4, 3).unwrap();
        let mut adam = AdamState::new(&params.store);
        adam.t = 7;
        adam.m.data[0][0] = -1.25e-7;
        adam.v.data[1][0] = f64::MIN_POSITIVE;
        Checkpoint {
            params,
            adam,
            training: TrainingConfig { seed: 3, ..Default::default() },
            dataset: DatasetSpec {
                world: WorldConfig { feature_dim: 4, ..Default::default() },
                ..Default::default()
            },
            step: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = sample();
        ck.params.store.iter_mut().next().unwrap().value[0] = 0.1 + 0.2;
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }
}
