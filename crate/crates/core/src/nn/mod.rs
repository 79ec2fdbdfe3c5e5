//! Minimal differentiable building blocks for the verifier.

mod params;
mod tape;

pub use params::{Grads, Param, ParamId, ParamStore};
pub use tape::{sample_bilinear, softmax, Tape, Var};

use crate::rng::Rng;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), 1, fan_out, 0.0, false));
        Self { weight, bias }
    }

    /// A linear map with all-zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add_const(format!("{name}.weight"), fan_in, fan_out, 0.0, true);
        let bias = Some(store.add_const(format!("{name}.bias"), 1, fan_out, 0.0, false));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Row-wise layer normalisation with learnable gain and shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), 1, width, 1.0, false),
            beta: store.add_const(format!("{name}.beta"), 1, width, 0.0, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}
