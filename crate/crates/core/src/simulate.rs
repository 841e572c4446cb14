//! Generative sampling of the process by thinning.
//!
//! The dominating bound is the total intensity immediately after the
//! latest state change: base rates are constant and every kernel term
//! only decays until the next event, so `B = Σμ + S(t₀⁺)` dominates on
//! the whole next inter-event interval. One uniform draw both accepts
//! the candidate and picks its source component (base rate of some pair,
//! or one of the live kernel terms), which is the usual composition
//! trick; a second draw picks the pattern of exogenous events.
//!
//! Kernel terms below a relative floor are dropped during periodic
//! sweeps of the trigger list. That truncates each event's influence at
//! roughly 35 decay times, a relative intensity error of about 1e-15.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence, LatentAssignment};
use crate::params::{CovariateMatrix, HawkesParams};

pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;

/// One live kernel term: the event at `t` excites direction `src → dst`
/// at pattern `(k, kp)` with weight `alpha·exp(-(t_now - t)/δ)`.
struct Trigger {
    t: f64,
    src: u32,
    dst: u32,
    k: u16,
    kp: u16,
    alpha: f64,
}

/// Draws one realization on `[0, horizon)` together with the ground
/// truth tags. Callers should check [`HawkesParams::is_stationary`]
/// first; a supercritical process only terminates through the event cap,
/// which is reported as an error.
pub fn simulate<R: Rng>(
    params: &HawkesParams,
    covs: &CovariateMatrix,
    horizon: f64,
    event_cap: u64,
    rng: &mut R,
) -> Result<(EventSequence, LatentAssignment)> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::domain(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    let v = params.node_count();
    let k_total = params.k();
    let kk = k_total * k_total;
    let delta = params.delta();

    // cumulative base rates over ordered pairs, for exogenous selection
    let mut exo_pairs: Vec<(u32, u32)> = Vec::new();
    let mut exo_cum: Vec<f64> = Vec::new();
    let mut m_tot = 0.0;
    for u in 0..v {
        for w in 0..v {
            if u == w {
                continue;
            }
            let r = params.pair_base_rate(u, w, covs.get(u, w));
            if r > 0.0 {
                m_tot += r;
                exo_pairs.push((u, w));
                exo_cum.push(m_tot);
            }
        }
    }

    let mut events: Vec<Event> = Vec::new();
    let mut exogenous: Vec<bool> = Vec::new();
    let mut patterns: Vec<(u16, u16)> = Vec::new();
    let mut triggers: Vec<Trigger> = Vec::new();
    let mut s_total = 0.0f64; // Σ live kernel terms, carried at time t
    let mut t = 0.0f64;
    let mut next_sweep = 1024usize;
    let mut block = vec![0.0; kk];

    loop {
        let bound = m_tot + s_total;
        if !(bound > 0.0) {
            break;
        }
        let dt: f64 = rng.sample::<f64, _>(Exp1) / bound;
        let t_cand = t + dt;
        if !(t_cand < horizon) {
            break;
        }
        s_total *= (-dt / delta).exp();
        t = t_cand;

        let target: f64 = rng.random::<f64>() * bound;
        let accepted = if target <= m_tot {
            // exogenous: pair by cumulative base rate, pattern by the
            // pair's base-rate block
            let i = exo_cum.partition_point(|&c| c < target);
            let (u, w) = exo_pairs[i.min(exo_pairs.len() - 1)];
            params.base_rate_block_into(u, w, covs.get(u, w), &mut block);
            let bsum: f64 = block.iter().sum();
            let mut pick = rng.random::<f64>() * bsum;
            let mut cell = kk - 1;
            for (c, &m) in block.iter().enumerate() {
                pick -= m;
                if pick <= 0.0 {
                    cell = c;
                    break;
                }
            }
            Some((u, w, (cell / k_total) as u16, (cell % k_total) as u16, true))
        } else {
            // endogenous: walk the live kernel terms
            let mut need = target - m_tot;
            let mut hit = None;
            for tr in &triggers {
                need -= tr.alpha * (-(t - tr.t) / delta).exp();
                if need <= 0.0 {
                    hit = Some((tr.src, tr.dst, tr.k, tr.kp, false));
                    break;
                }
            }
            hit // scan exhausted (pruned or rounded-off mass): reject
        };

        if let Some((u, w, pk, pkp, is_exo)) = accepted {
            if events.len() as u64 >= event_cap {
                return Err(Error::numerical(format!(
                    "event cap {event_cap} reached at t = {t:.6} (of horizon {horizon}); \
                     the process is likely supercritical"
                )));
            }
            events.push(Event { t, src: u, dst: w });
            exogenous.push(is_exo);
            patterns.push((pk, pkp));
            let mirrored = params.alpha_at(pkp as usize, pk as usize);
            if mirrored > 0.0 {
                triggers.push(Trigger {
                    t,
                    src: w,
                    dst: u,
                    k: pkp,
                    kp: pk,
                    alpha: mirrored,
                });
                s_total += mirrored;
            }
        }

        if triggers.len() >= next_sweep {
            let floor = 1e-15 * m_tot.max(1.0);
            triggers.retain(|tr| tr.alpha * (-(t - tr.t) / delta).exp() >= floor);
            s_total = triggers
                .iter()
                .map(|tr| tr.alpha * (-(t - tr.t) / delta).exp())
                .sum();
            next_sweep = (triggers.len() * 2).max(1024);
        }
    }

    let seq = EventSequence::new(events, horizon, v)?;
    let assignment = LatentAssignment::Hard {
        exogenous,
        patterns,
    };
    Ok((seq, assignment))
}

/// Nodes in contiguous, near-equal community blocks: node `u` belongs to
/// community `⌊u·K/V⌋`.
pub fn block_communities(v: u32, k: usize) -> Vec<usize> {
    (0..v).map(|u| (u as usize * k) / v as usize).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    /// community-diagonal excitation, zero across communities
    Diagonal(Vec<f64>),
    /// full K×K matrix, rows outer
    Matrix(Vec<Vec<f64>>),
}

/// Synthetic-data recipe: `V` nodes in `K` equal communities, base rate
/// `μ_k` within community `k` (drawn U[0,1] per community when not
/// given), zero across communities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub nodes: u32,
    pub communities: usize,
    pub horizon: f64,
    pub alpha: AlphaSpec,
    pub delta: f64,
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub event_cap: Option<u64>,
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::data(format!("scenario config: {e}")))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data(format!("scenario config: {e}")))
    }

    pub fn event_cap(&self) -> u64 {
        self.event_cap.unwrap_or(DEFAULT_EVENT_CAP)
    }

    /// Materializes model parameters and the node-community map. `rng`
    /// is only drawn from when `mu` is absent.
    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<(HawkesParams, Vec<usize>)> {
        let k = self.communities;
        if k == 0 {
            return Err(Error::domain("communities must be positive".to_string()));
        }
        if self.nodes < 2 {
            return Err(Error::domain(format!(
                "need at least 2 nodes, got {}",
                self.nodes
            )));
        }
        let mu = match &self.mu {
            Some(m) => {
                if m.len() != k {
                    return Err(Error::domain(format!(
                        "mu has {} entries for {k} communities",
                        m.len()
                    )));
                }
                m.clone()
            }
            None => (0..k).map(|_| rng.random::<f64>()).collect(),
        };
        let alpha = match &self.alpha {
            AlphaSpec::Diagonal(d) => {
                if d.len() != k {
                    return Err(Error::domain(format!(
                        "alpha has {} entries for {k} communities",
                        d.len()
                    )));
                }
                nalgebra::DMatrix::from_fn(k, k, |i, j| if i == j { d[i] } else { 0.0 })
            }
            AlphaSpec::Matrix(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(Error::domain(format!("alpha matrix must be {k}x{k}")));
                }
                nalgebra::DMatrix::from_fn(k, k, |i, j| rows[i][j])
            }
        };
        let communities = block_communities(self.nodes, k);
        let phi = nalgebra::DMatrix::from_fn(self.nodes as usize, k, |u, c| {
            if communities[u] == c {
                1.0
            } else {
                0.0
            }
        });
        let omega = nalgebra::DMatrix::from_fn(k, k, |i, j| if i == j { mu[i] } else { 0.0 });
        let params = HawkesParams::new(phi, omega, alpha, self.delta)?;
        Ok((params, communities))
    }
}
