//! Candidate transformer and reliability head.
//!
//! Each decoder layer runs, with residual connections and post-norm:
//! cross-attention from the frame-`t` query token to the `M` candidate
//! tokens of frame `t` (frames batched), self-attention of the query tokens
//! over time, and a feed-forward block. The decoded query of frame `t` is
//! compared with every candidate of that frame by a temperature-scaled
//! cosine, giving a probability over candidates per frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Extractor, ExtractorConfig};
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore, Tape, Var};
use crate::rng::{rng_from, Rng, STREAM_INIT};
use crate::trajectory::{CandidateSet, QueryPoint, ReliabilityScores};
use crate::world::FeatureProvider;

/// Format tag of [`VerifierParams`] layouts.
pub const PARAMS_VERSION: u32 = 1;

/// Architecture of the whole verifier; everything but the provider channel
/// count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub points: usize,
    pub extractor_layers: usize,
    pub decoder_layers: usize,
    pub id_dim: usize,
    pub embed_freqs: usize,
    pub embed_scale_init: f64,
    pub coord_norm: f64,
    pub offset_ring_step: f64,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub temporal_base: usize,
    pub tau_init: f64,
    /// Turning this off replaces temporal self-attention with the identity.
    pub temporal_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            points: 4,
            extractor_layers: 3,
            decoder_layers: 3,
            id_dim: 16,
            embed_freqs: 8,
            embed_scale_init: 16.0,
            coord_norm: 64.0,
            offset_ring_step: 0.5,
            ffn_mult: 4,
            dropout: 0.1,
            temporal_base: 24,
            tau_init: 0.1,
            temporal_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn extractor(&self, raw_dim: usize) -> ExtractorConfig {
        ExtractorConfig {
            raw_dim,
            width: self.width,
            heads: self.heads,
            points: self.points,
            layers: self.extractor_layers,
            id_dim: self.id_dim,
            embed_freqs: self.embed_freqs,
            embed_scale_init: self.embed_scale_init,
            coord_norm: self.coord_norm,
            offset_ring_step: self.offset_ring_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid("model.width", "must be a positive multiple of model.heads"));
        }
        if self.decoder_layers == 0 || self.ffn_mult == 0 || self.temporal_base == 0 {
            return Err(Error::invalid("model", "decoder sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model.dropout", "must be in [0, 1)"));
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(Error::invalid("model.tau_init", "must be positive"));
        }
        self.extractor(1).validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attn {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    cross: Attn,
    cross_norm: LayerNorm,
    temporal: Attn,
    temporal_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Parameter handles of the decoder and ranking head.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateTransformer {
    pub config: ModelConfig,
    layers: Vec<DecoderLayer>,
    temporal_embed: ParamId,
    proj_q: Linear,
    proj_c: Linear,
    log_tau: ParamId,
}

/// Linear interpolation weights `[len, base]` that resample a table of
/// `base` rows to `len` rows over normalised frame index.
pub fn interpolation_matrix(len: usize, base: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * base];
    for i in 0..len {
        let u = if len == 1 {
            0.0
        } else {
            i as f64 * (base - 1) as f64 / (len - 1) as f64
        };
        let lo = (u.floor() as usize).min(base - 1);
        let hi = (lo + 1).min(base - 1);
        let f = u - lo as f64;
        m[i * base + lo] += 1.0 - f;
        if f > 0.0 {
            m[i * base + hi] += f;
        }
    }
    m
}

fn check_finite(tape: &Tape<'_>, v: Var, layer: usize) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("decoder layer {layer}")))
    }
}

impl CandidateTransformer {
    pub fn new(store: &mut ParamStore, config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let layers = (0..config.decoder_layers)
            .map(|l| {
                let name = format!("decoder{l}");
                DecoderLayer {
                    cross: Attn::new(store, &format!("{name}.cross"), d, rng),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
                    temporal: Attn::new(store, &format!("{name}.temporal"), d, rng),
                    temporal_norm: LayerNorm::new(store, &format!("{name}.temporal_norm"), d),
                    ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, config.ffn_mult * d, true, rng),
                    ffn_out: Linear::new(store, &format!("{name}.ffn_out"), config.ffn_mult * d, d, true, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                }
            })
            .collect();
        let temporal_embed = {
            use rand_distr::{Distribution, Normal};
            let n = Normal::new(0.0, 0.02).expect("valid normal");
            let v = (0..config.temporal_base * d).map(|_| n.sample(&mut *rng)).collect();
            store.add("decoder.temporal_embed", config.temporal_base, d, v, false)
        };
        let proj_q = Linear::new(store, "head.proj_q", d, d, true, rng);
        let proj_c = Linear::new(store, "head.proj_c", d, d, true, rng);
        let log_tau = store.add_const("head.log_tau", 1, 1, config.tau_init.ln(), false);
        Ok(Self {
            config,
            layers,
            temporal_embed,
            proj_q,
            proj_c,
            log_tau,
        })
    }

    /// Current temperature.
    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).value[0].exp()
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, rng: Option<&mut Rng>) -> Var {
        use rand::Rng as _;
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (r, c) = tape.shape(x);
                let keep = 1.0 / (1.0 - p);
                let mask = (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                tape.mask(x, mask)
            }
            _ => x,
        }
    }

    /// Decodes query tokens `[L, D]` against candidate tokens `[L*M, D]`.
    /// Dropout is applied when `dropout_rng` is given (training mode).
    pub fn decode<'a>(
        &self,
        tape: &mut Tape<'a>,
        query: Var,
        candidates: Var,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let (l, d) = tape.shape(query);
        let (lm, dc) = tape.shape(candidates);
        if d != self.config.width || dc != d {
            return Err(Error::shape("descriptor width", self.config.width, if d != self.config.width { d } else { dc }));
        }
        if l == 0 || lm % l != 0 {
            return Err(Error::shape("candidate rows", l, lm));
        }
        let m = lm / l;
        let h = self.config.heads;
        let te = if self.config.temporal_attention {
            let table = tape.param(self.temporal_embed);
            let interp = tape.constant(l, self.config.temporal_base, interpolation_matrix(l, self.config.temporal_base));
            Some(tape.matmul(interp, table))
        } else {
            None
        };
        let mut x = query;
        for (li, layer) in self.layers.iter().enumerate() {
            let q = layer.cross.q.forward(tape, x);
            let k = layer.cross.k.forward(tape, candidates);
            let v = layer.cross.v.forward(tape, candidates);
            let a = tape.attention(q, k, v, l, 1, m, h);
            let a = layer.cross.o.forward(tape, a);
            let s = tape.add(x, a);
            x = layer.cross_norm.forward(tape, s);

            if let Some(te) = te {
                let qk = tape.add(x, te);
                let q = layer.temporal.q.forward(tape, qk);
                let k = layer.temporal.k.forward(tape, qk);
                let v = layer.temporal.v.forward(tape, x);
                let a = tape.attention(q, k, v, 1, l, l, h);
                let a = layer.temporal.o.forward(tape, a);
                let s = tape.add(x, a);
                x = layer.temporal_norm.forward(tape, s);
            }

            let f = layer.ffn_in.forward(tape, x);
            let f = tape.gelu(f);
            let f = layer.ffn_out.forward(tape, f);
            let f = self.dropout(tape, f, dropout_rng.as_deref_mut());
            let s = tape.add(x, f);
            x = layer.ffn_norm.forward(tape, s);
            check_finite(tape, x, li)?;
        }
        Ok(x)
    }

    /// Temperature-scaled cosine logits `[L, M]`.
    pub fn logits<'a>(&self, tape: &mut Tape<'a>, decoded: Var, candidates: Var) -> Var {
        let (l, _) = tape.shape(decoded);
        let m = tape.shape(candidates).0 / l;
        let pq = self.proj_q.forward(tape, decoded);
        let pq = tape.l2_normalize(pq);
        let pc = self.proj_c.forward(tape, candidates);
        let pc = tape.l2_normalize(pc);
        let cos = tape.row_group_dot(pq, pc, m);
        let lt = tape.param(self.log_tau);
        let neg = tape.scale(lt, -1.0);
        let inv_tau = tape.exp(neg);
        tape.mul_scalar(cos, inv_tau)
    }
}

/// Complete learnable state of the verifier.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifierParams {
    pub version: u32,
    pub model: ModelConfig,
    pub raw_dim: usize,
    pub store: ParamStore,
    pub extractor: Extractor,
    pub transformer: CandidateTransformer,
}

impl VerifierParams {
    /// Freshly initialised parameters for grids with `raw_dim` channels.
    pub fn new(model: ModelConfig, raw_dim: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = rng_from(seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let extractor = Extractor::new(&mut store, model.extractor(raw_dim), &mut rng)?;
        let transformer = CandidateTransformer::new(&mut store, model.clone(), &mut rng)?;
        Ok(Self {
            version: PARAMS_VERSION,
            model,
            raw_dim,
            store,
            extractor,
            transformer,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PARAMS_VERSION {
            return Err(Error::Checkpoint(format!(
                "parameter layout version {} is not supported (expected {PARAMS_VERSION})",
                self.version
            )));
        }
        self.store.check_finite()
    }

    /// Records the full forward pass on `tape` and returns the `[L, M]`
    /// logits. Dropout is active when `dropout_rng` is given.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        provider: &'a dyn FeatureProvider,
        query: &QueryPoint,
        candidates: &CandidateSet,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let desc = self.extractor.forward(tape, provider, query, candidates)?;
        let decoded = self.transformer.decode(tape, desc.query, desc.candidates, dropout_rng)?;
        Ok(self.transformer.logits(tape, decoded, desc.candidates))
    }
}

/// Per-frame reliability distributions, inference mode.
pub fn verify(
    provider: &dyn FeatureProvider,
    query: &QueryPoint,
    candidates: &CandidateSet,
    params: &VerifierParams,
) -> Result<ReliabilityScores> {
    let mut tape = Tape::new(&params.store);
    let logits = params.forward(&mut tape, provider, query, candidates, None)?;
    let m = candidates.num_candidates();
    let probs = tape.group_softmax(logits, m);
    ReliabilityScores::from_flat(tape.value(probs), m)
}

/// Scores precomputed decoded features `[L, D]` against candidate
/// descriptors `[L*M, D]` (both row-major).
pub fn score(
    params: &VerifierParams,
    decoded: &[f64],
    candidates: &[f64],
    m: usize,
) -> Result<ReliabilityScores> {
    let d = params.model.width;
    if decoded.len() % d != 0 || candidates.len() != decoded.len() * m {
        return Err(Error::shape("candidate descriptors", decoded.len() * m, candidates.len()));
    }
    let l = decoded.len() / d;
    let mut tape = Tape::new(&params.store);
    let q = tape.constant(l, d, decoded.to_vec());
    let c = tape.constant(l * m, d, candidates.to_vec());
    let logits = params.transformer.logits(&mut tape, q, c);
    let probs = tape.group_softmax(logits, m);
    ReliabilityScores::from_flat(tape.value(probs), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            points: 2,
            extractor_layers: 1,
            decoder_layers: 2,
            id_dim: 4,
            embed_freqs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        assert_eq!(interpolation_matrix(1, 4), vec![1.0, 0.0, 0.0, 0.0]);
        let m = interpolation_matrix(24, 24);
        for i in 0..24 {
            assert_eq!(m[i * 24 + i], 1.0);
        }
        let m = interpolation_matrix(3, 5);
        assert_eq!(&m[5..10], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let m = interpolation_matrix(4, 3);
        for row in m.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((m[3] - 1.0 / 3.0).abs() < 1e-12 && (m[4] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
        assert!(ModelConfig { tau_init: 0.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn score_example_values() {
        let p = VerifierParams::new(tiny(), 3, 1).unwrap();
        assert!((p.transformer.tau(&p.store) - 0.1).abs() < 1e-15);
        let want = softmax(&[10.0, 0.0]);
        assert!((want[0] - 0.9999546).abs() < 1e-7 && (want[1] - 4.54e-5).abs() < 1e-7);

        // Identical candidate descriptors score 0.5 each.
        let dec = vec![0.3; 8];
        let cand = [vec![0.7; 8], vec![0.7; 8]].concat();
        let s = score(&p, &dec, &cand, 2).unwrap();
        assert_eq!(s.scores[0][0], s.scores[0][1]);
        assert!((s.scores[0][0] - 0.5).abs() < 1e-15);
        let one = score(&p, &dec, &cand[..8], 1).unwrap();
        assert_eq!(one.scores, vec![vec![1.0]]);
    }

    #[test]
    fn head_matches_cosine_softmax() {
        let p = VerifierParams::new(tiny(), 3, 2).unwrap();
        let dec: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let cand: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).cos()).collect();
        let got = score(&p, &dec, &cand, 3).unwrap();

        let proj = |lin: &Linear, x: &[f64]| -> Vec<f64> {
            let w = &p.store.get(lin.weight).value;
            let b = &p.store.get(lin.bias.unwrap()).value;
            (0..8).map(|j| b[j] + (0..8).map(|i| x[i] * w[i * 8 + j]).sum::<f64>()).collect()
        };
        let q = proj(&p.transformer.proj_q, &dec);
        let logits: Vec<f64> = (0..3)
            .map(|m| crate::nn::cosine(&q, &proj(&p.transformer.proj_c, &cand[m * 8..(m + 1) * 8])) / 0.1)
            .collect();
        for (a, b) in got.scores[0].iter().zip(softmax(&logits)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_checks_shapes_and_single_frame() {
        let p = VerifierParams::new(tiny(), 3, 3).unwrap();
        let mut tape = Tape::new(&p.store);
        let q = tape.constant(2, 8, vec![0.1; 16]);
        let bad = tape.constant(3, 8, vec![0.1; 24]);
        assert!(p.transformer.decode(&mut tape, q, bad, None).is_err());
        let narrow = tape.constant(2, 4, vec![0.1; 8]);
        assert!(p.transformer.decode(&mut tape, narrow, narrow, None).is_err());

        // L=1 and M=1: both attention maps are a single 1.0.
        let q1 = tape.constant(1, 8, (0..8).map(|i| i as f64).collect());
        let c1 = tape.constant(1, 8, (0..8).map(|i| -(i as f64)).collect());
        let out = p.transformer.decode(&mut tape, q1, c1, None).unwrap();
        assert!(tape.value(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let p = VerifierParams::new(tiny(), 3, 4).unwrap();
        let run = |rng: Option<&mut Rng>| {
            let mut tape = Tape::new(&p.store);
            let q = tape.constant(3, 8, (0..24).map(|i| (i as f64).sin()).collect());
            let c = tape.constant(6, 8, (0..48).map(|i| (i as f64).cos()).collect());
            let out = p.transformer.decode(&mut tape, q, c, rng).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(None), run(None));
        let mut r1 = rng_from(1, &[]);
        assert_ne!(run(None), run(Some(&mut r1)));
    }

    #[test]
    fn version_is_checked() {
        let mut p = VerifierParams::new(tiny(), 3, 5).unwrap();
        p.validate().unwrap();
        p.version = 99;
        assert!(matches!(p.validate(), Err(Error::Checkpoint(_))));
    }
}
