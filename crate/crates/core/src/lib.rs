//! Hawkes edge partition model: continuous-time directed interaction
//! events driven by overlapping community structure.
//!
//! The model runs in two stages. A gamma process edge partition model
//! fits node-community affiliations `Φ` and community interaction
//! weights `Ω` to the binary adjacency of who-ever-interacted-with-whom.
//! Conditioned on that structure, events of each ordered pair follow a
//! mutually exciting process whose base rates and excitation weights are
//! factorized over `K·K` community patterns; an event of `v → u` tagged
//! with pattern `(a, b)` excites future `u → v` events at pattern
//! `(b, a)`. Fitting the event stage is available as expectation
//! maximization ([`em`]) and as a Gibbs sampler ([`gibbs`]).
//!
//! Supporting pieces: a thinning-based simulator ([`simulate`]),
//! classical baselines ([`baselines`]), and a temporal link prediction
//! harness ([`eval`]).

pub mod baselines;
pub mod em;
pub mod error;
pub mod eval;
pub mod events;
pub mod gibbs;
pub mod hgap;
pub mod intensity;
pub mod io;
pub mod kernel;
mod linalg;
pub mod par;
pub mod params;
pub mod polya_gamma;
pub mod simulate;
pub mod rng;

pub use error::{Error, Result};
pub use events::{DirectedPairHistory, Event, EventSequence, LatentAssignment};
pub use kernel::ExpKernel;
pub use params::{CovariateMatrix, HawkesParams};
