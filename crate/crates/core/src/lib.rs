//! Bayesian last-layer uncertainty for dense (per-pixel) classifiers.
//!
//! A frozen backbone produces an `H x W x D` design matrix. The final 1x1
//! layer is replaced by a factorized Gaussian over its weights, giving a
//! Gaussian per logit; [`epsoftmax`] propagates those moments through the
//! softmax and [`uncertainty`] turns them into per-pixel maps. The posterior
//! itself comes from SGD snapshots ([`fit`]) summarized by diagonal SWAG
//! ([`swag`]).

pub mod bench;
pub mod epsoftmax;
pub mod error;
mod fastmath;
pub mod fit;
pub mod grid;
pub mod head;
pub mod io;
pub mod oracle;
pub mod swag;
pub mod synthetic;
pub mod uncertainty;

pub use epsoftmax::{ep_softmax, ProbMoments, RatioVariant};
pub use error::{Error, Result};
pub use grid::{DesignMatrix, Grid};
pub use head::{point_logits, predict_moments, GaussianHead, LogitMoments};
pub use uncertainty::{make_bundle, EntropySpace, UncertaintyBundle};

/// Pixel-loop execution strategy. Both produce bitwise identical results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Serial,
    /// Rayon over fixed 1024-pixel chunks.
    Parallel,
}
