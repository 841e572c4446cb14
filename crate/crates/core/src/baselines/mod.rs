//! Comparison models: a per-pair constant-rate fit, a shared-parameter
//! mutually exciting fit over a fixed kernel bank, and two
//! block-structured exponential Hawkes fits on spectral labels.

mod block;
mod mhp;
mod opt;
mod pp;

pub use block::{fit_blockmodels, spectral_labels, BlockModelParams, BlockVariant};
pub use mhp::{basis_integrals, basis_kernels, fit_mhp, MhpFit, BASIS_COUNT};
pub use pp::{fit_pp, PoissonRates, PP_SMOOTHING};
