//! Exponential excitation kernel.
//!
//! All mutual excitation in this crate uses the kernel
//! `γ(dt) = α·exp(-dt/δ)` with jump size `α ≥ 0` and decay time `δ > 0`.
//! Its integral over an observation window has the closed form used by the
//! likelihood and by interval predictions, and `α·δ` is the branching
//! ratio: the expected number of direct offspring per event. The process
//! is subcritical (stationary) iff `α·δ < 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpKernel {
    alpha: f64,
    delta: f64,
}

impl ExpKernel {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::domain(format!(
                "kernel jump must be finite and non-negative, got {alpha}"
            )));
        }
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::domain(format!(
                "kernel decay must be finite and positive, got {delta}"
            )));
        }
        Ok(ExpKernel { alpha, delta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Kernel value `α·exp(-dt/δ)` at lag `dt ≥ 0`.
    pub fn value(&self, dt: f64) -> Result<f64> {
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::domain(format!(
                "kernel lag must be finite and non-negative, got {dt}"
            )));
        }
        Ok(self.alpha * (-dt / self.delta).exp())
    }

    /// Integral of the kernel contribution of an event at `t_event` over
    /// the window `[from, to]`:
    ///
    /// `α·δ·(exp(-(max(from, t_event) - t_event)/δ) - exp(-(to - t_event)/δ))`
    ///
    /// Zero when the window ends before the event. Additive over adjacent
    /// windows and increasing to `α·δ` as `to → ∞`.
    pub fn compensator(&self, t_event: f64, from: f64, to: f64) -> Result<f64> {
        if !(t_event.is_finite() && from.is_finite() && to.is_finite()) {
            return Err(Error::domain(
                "kernel window bounds must be finite".to_string(),
            ));
        }
        if from > to {
            return Err(Error::domain(format!(
                "kernel window is inverted: from={from} > to={to}"
            )));
        }
        if to <= t_event {
            return Ok(0.0);
        }
        let lo = from.max(t_event);
        let a = (-(lo - t_event) / self.delta).exp();
        let b = (-(to - t_event) / self.delta).exp();
        Ok(self.alpha * self.delta * (a - b))
    }

    /// Expected direct offspring per event.
    pub fn branching_ratio(&self) -> f64 {
        self.alpha * self.delta
    }

    /// Whether the single-kernel process is subcritical.
    pub fn is_stationary(&self) -> bool {
        self.branching_ratio() < 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ExpKernel::new(-0.1, 1.0).is_err());
        assert!(ExpKernel::new(1.0, 0.0).is_err());
        assert!(ExpKernel::new(1.0, -2.0).is_err());
        assert!(ExpKernel::new(f64::NAN, 1.0).is_err());
        assert!(ExpKernel::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn value_at_zero_is_alpha() {
        let k = ExpKernel::new(0.7, 0.3).unwrap();
        assert_eq!(k.value(0.0).unwrap(), 0.7);
    }

    #[test]
    fn value_matches_hand_computation() {
        // one decay time of lag scales the jump by e^{-1}
        let k = ExpKernel::new(0.5, 0.45).unwrap();
        let got = k.value(0.45).unwrap();
        assert!(close(got, 0.5 * (-1.0f64).exp(), 1e-12), "got {got}");
        assert!(close(got, 0.18393972058572117, 1e-12));
    }

    #[test]
    fn value_rejects_negative_lag() {
        let k = ExpKernel::new(0.5, 0.45).unwrap();
        assert!(matches!(k.value(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn compensator_unit_window() {
        let k = ExpKernel::new(1.0, 1.0).unwrap();
        let got = k.compensator(0.0, 0.0, 1.0).unwrap();
        assert!(close(got, 1.0 - (-1.0f64).exp(), 1e-12), "got {got}");
        assert!(close(got, 0.6321205588285577, 1e-12));
    }

    #[test]
    fn compensator_additivity_and_tail() {
        let k = ExpKernel::new(0.8, 0.45).unwrap();
        let t0 = 0.3;
        let whole = k.compensator(t0, 0.0, 5.0).unwrap();
        let parts = k.compensator(t0, 0.0, 1.1).unwrap() + k.compensator(t0, 1.1, 5.0).unwrap();
        assert!((whole - parts).abs() < 1e-14);
        // saturates at the branching ratio
        let far = k.compensator(t0, t0, 1e6).unwrap();
        assert!(close(far, k.branching_ratio(), 1e-12));
    }

    #[test]
    fn compensator_window_edge_cases() {
        let k = ExpKernel::new(0.8, 0.45).unwrap();
        assert!(k.compensator(2.0, 3.0, 1.0).is_err());
        assert_eq!(k.compensator(2.0, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(k.compensator(2.0, 0.0, 1.5).unwrap(), 0.0);
        // window starting before the event clamps to the event time
        let a = k.compensator(2.0, 0.0, 4.0).unwrap();
        let b = k.compensator(2.0, 2.0, 4.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stationarity_threshold() {
        assert!(ExpKernel::new(1.9, 0.45).unwrap().is_stationary());
        assert!(!ExpKernel::new(2.3, 0.45).unwrap().is_stationary());
        let critical = ExpKernel::new(2.0, 0.5).unwrap();
        assert!(!critical.is_stationary());
    }
}
