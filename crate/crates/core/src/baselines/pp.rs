//! Per-pair constant-rate model: every ordered pair gets its event count
//! over the window, smoothed so unseen pairs keep a small positive rate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::events::EventSequence;

pub const PP_SMOOTHING: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct PoissonRates {
    node_count: u32,
    horizon: f64,
    smoothing: f64,
    counts: BTreeMap<(u32, u32), u64>,
}

/// Counts events per ordered pair and divides by the window length,
/// adding `PP_SMOOTHING` pseudo-events to every pair.
pub fn fit_pp(data: &EventSequence, horizon: f64) -> Result<PoissonRates> {
    if !(horizon > 0.0) {
        return Err(Error::domain(format!(
            "rate window must be positive, got {horizon}"
        )));
    }
    let mut counts = BTreeMap::new();
    for ev in data.events() {
        *counts.entry((ev.src, ev.dst)).or_insert(0u64) += 1;
    }
    Ok(PoissonRates {
        node_count: data.node_count(),
        horizon,
        smoothing: PP_SMOOTHING,
        counts,
    })
}

impl PoissonRates {
    pub fn node_count(&self) -> u32 {
        self.node_count
    }

    pub fn rate(&self, u: u32, v: u32) -> f64 {
        let c = self.counts.get(&(u, v)).copied().unwrap_or(0) as f64;
        (c + self.smoothing) / self.horizon
    }

    /// `Σ_{u≠v} φ_{u,v}·T`: the expected event total implied by the fit.
    pub fn total_mass(&self) -> f64 {
        let v = self.node_count as f64;
        let observed: u64 = self.counts.values().sum();
        observed as f64 + self.smoothing * v * (v - 1.0)
    }
}
