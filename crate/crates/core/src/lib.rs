//! Learned reliability scoring of candidate point tracks.
//!
//! Given a query point and `M` candidate trajectories from different
//! trackers, the verifier assigns each candidate a per-frame probability
//! of being the right one. [`select::fuse_pseudo_label`] turns those
//! scores into a fused pseudo-label. A synthetic world ([`world`]) and a
//! corruption model ([`perturb`]) provide training data with known ground
//! truth, and [`metrics`] scores the result.
//!
//! The guide in `book/` walks through each part; its snippets run as
//! doc-tests of this crate.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod select;
pub mod train;
pub mod trajectory;
pub mod transformer;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/perturbations.md")]
    mod perturbations {}
    #[doc = include_str!("../../../book/src/verifier.md")]
    mod verifier {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
