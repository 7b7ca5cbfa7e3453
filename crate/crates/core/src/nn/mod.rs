//! Minimal dense-network machinery: a fixed-topology MLP with reverse-mode
//! gradients and an Adam optimizer. This is the only "deep learning" the
//! crate needs; there is no general autodiff graph.
//!
//! Concurrency: `Mlp::forward`/`Mlp::backward` are pure with respect to the
//! network and may be called concurrently on disjoint batches. All reductions
//! inside a single call run in a fixed serial order, so results are
//! reproducible regardless of how callers parallelize across batches.

mod adam;
pub(crate) mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, Layer, Mlp, MlpGrads, MlpTape, EXP_CLAMP};
