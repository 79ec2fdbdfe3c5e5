use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, learnable `rows x cols` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Flat registry of all learnable arrays of a model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: Vec<f64>, decay: bool) -> ParamId {
        let name = name.into();
        assert_eq!(value.len(), rows * cols, "parameter {name} has wrong length");
        assert!(self.get_by_name(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            rows,
            cols,
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` with Glorot-uniform entries.
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, fan_in, fan_out, value, true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, fill: f64, decay: bool) -> ParamId {
        self.add(name, rows, cols, vec![fill; rows * cols], decay)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().find(|p| p.value.iter().any(|v| !v.is_finite())) {
            Some(p) => Err(Error::NonFinite(format!("parameter {}", p.name))),
            None => Ok(()),
        }
    }

    /// Replaces values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &[(String, usize, usize, Vec<f64>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, (name, rows, cols, value)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.rows != *rows || p.cols != *cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {} [{}x{}] does not match stored {name} [{rows}x{cols}]",
                    p.name, p.rows, p.cols
                )));
            }
            p.value.clone_from(value);
        }
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }
}
