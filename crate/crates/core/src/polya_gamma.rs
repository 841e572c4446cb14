//! Pólya-Gamma moments and an approximate sampler.
//!
//! A PG(b, c) variable is the weighted series
//! `ω = (1/2π²) Σ_k g_k / ((k - 1/2)² + c²/(4π²))` with iid
//! `g_k ~ Gamma(b, 1)`, which gives closed forms for the first two
//! moments. Exact samplers (alternating-series rejection) matter when
//! single draws drive accept/reject decisions; here draws only feed a
//! conjugate Gaussian update, so a Gamma draw matched to the exact mean
//! and variance is used instead and the approximation is documented at
//! the call sites.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Below this |c| the closed forms lose digits to cancellation; switch
/// to their series expansions.
const SMALL_C: f64 = 1e-4;

fn check_b(b: f64) -> Result<()> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::domain(format!("PG shape must be positive, got {b}")));
    }
    Ok(())
}

/// `E[ω] = (b / 2c) · tanh(c / 2)`, continued through `c = 0` as `b/4`.
pub fn pg_expectation(b: f64, c: f64) -> Result<f64> {
    check_b(b)?;
    if !c.is_finite() {
        return Err(Error::domain(format!("PG tilt must be finite, got {c}")));
    }
    if c.abs() < SMALL_C {
        return Ok(b * (0.25 - c * c / 48.0));
    }
    Ok(b / (2.0 * c) * (c / 2.0).tanh())
}

/// `Var[ω] = (b / 4c³) · (sinh(c) - c) · sech²(c / 2)`, continued
/// through `c = 0` as `b/24`.
pub fn pg_variance(b: f64, c: f64) -> Result<f64> {
    check_b(b)?;
    if !c.is_finite() {
        return Err(Error::domain(format!("PG tilt must be finite, got {c}")));
    }
    if c.abs() < SMALL_C {
        return Ok(b * (1.0 / 24.0 - c * c / 120.0));
    }
    let sech = 1.0 / (c / 2.0).cosh();
    Ok(b / (4.0 * c * c * c) * (c.sinh() - c) * sech * sech)
}

/// Moment-matched Gamma draw standing in for an exact PG(b, c) sample.
pub fn sample_pg<R: Rng>(b: f64, c: f64, rng: &mut R) -> Result<f64> {
    let mean = pg_expectation(b, c)?;
    let var = pg_variance(b, c)?;
    let shape = mean * mean / var;
    let scale = var / mean;
    let g = Gamma::new(shape, scale)
        .map_err(|e| Error::numerical(format!("PG({b}, {c}) surrogate: {e}")))?;
    Ok(g.sample(rng))
}
