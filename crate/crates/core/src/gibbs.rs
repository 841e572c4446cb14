//! Event-level Gibbs sampler over branching structure, pattern tags, and
//! the conditionally conjugate parameter blocks.
//!
//! One iteration resamples, in order: per-event assignments (an exogenous
//! flag plus a pattern tag, swept chronologically against lazily updated
//! excitation sums), stored base-rate blocks, the covariate regression
//! block, and the excitation matrix. The regression block works on the
//! negative-binomial form of the exogenous counts with the base rates
//! integrated out, so its order within the iteration is `β` from the
//! current `ψ`, then `ω` at the current `ψ`, then `ψ` from the fresh
//! draws; the base rates are reinstated by their own conjugate draw. All
//! randomness comes from one counter-mode stream, so a chain is
//! reproducible from its seed.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::events::{EventSequence, LatentAssignment};
use crate::intensity::{log_posterior, PairExciter};
use crate::linalg::{chol_lt_solve, chol_solve, cholesky};
use crate::params::{CovariateMatrix, HawkesParams, ALPHA_PRIOR_RATE, ALPHA_PRIOR_SHAPE};
use crate::polya_gamma::sample_pg;
use crate::rng::{stream, streams};

/// Mutable state of one chain. The hard assignment is the single source
/// of truth for the latent structure; excitation sums are rebuilt from it
/// on the fly during each sweep. `psi`, `omega`, and `pi` live per active
/// directed pair, flattened over the `K·K` patterns where applicable.
#[derive(Clone, Debug)]
pub struct GibbsState {
    pub params: HawkesParams,
    pub assignment: LatentAssignment,
    pub psi: BTreeMap<(u32, u32), Vec<f64>>,
    pub omega: BTreeMap<(u32, u32), Vec<f64>>,
    pub pi: BTreeMap<(u32, u32), f64>,
}

impl GibbsState {
    pub fn new(params: HawkesParams) -> Self {
        GibbsState {
            params,
            assignment: LatentAssignment::Hard {
                exogenous: Vec::new(),
                patterns: Vec::new(),
            },
            psi: BTreeMap::new(),
            omega: BTreeMap::new(),
            pi: BTreeMap::new(),
        }
    }
}

/// Per-iteration snapshot: the joint log-posterior at the freshly drawn
/// state, the excitation matrix flattened row-major, and the total mass
/// of the stored base-rate blocks.
#[derive(Clone, Debug)]
pub struct IterRecord {
    pub log_posterior: f64,
    pub alpha: Vec<f64>,
    pub stored_mu_total: f64,
}

/// A finished chain: the final state plus one record per iteration.
#[derive(Clone, Debug)]
pub struct GibbsRun {
    pub state: GibbsState,
    pub records: Vec<IterRecord>,
}

impl GibbsRun {
    /// Mean excitation matrix over the post-burn-in records.
    pub fn alpha_posterior_mean(&self, burn_in: usize) -> Result<DMatrix<f64>> {
        if burn_in >= self.records.len() {
            return Err(Error::domain(format!(
                "burn-in of {burn_in} consumes the whole chain of {} iterations",
                self.records.len()
            )));
        }
        let k = self.state.params.k();
        let tail = &self.records[burn_in..];
        let mut acc = vec![0.0; k * k];
        for rec in tail {
            for (a, v) in acc.iter_mut().zip(&rec.alpha) {
                *a += v;
            }
        }
        let m = tail.len() as f64;
        Ok(DMatrix::from_fn(k, k, |a, b| acc[a * k + b] / m))
    }
}

/// Resamples every event's branching flag and pattern tag in one
/// chronological sweep per unordered pair. An event is exogenous with
/// probability `Σ_c μ_c / λ`, then lands on a pattern drawn from the
/// matching set of components: the base-rate block when exogenous, the
/// excitation components fed by the opposite direction's current tags
/// when not. Events sharing a timestamp are all drawn before any of them
/// enters the excitation sums, so excitation stays strictly causal. Tags
/// drawn earlier in the sweep feed later events immediately.
pub fn sample_assignments<R: Rng>(
    state: &mut GibbsState,
    data: &EventSequence,
    covs: &CovariateMatrix,
    rng: &mut R,
) -> Result<()> {
    let params = &state.params;
    let k = params.k();
    let kk = k * k;
    let delta = params.delta();
    let n = data.len();
    let mut exogenous = vec![false; n];
    let mut patterns = vec![(0u16, 0u16); n];
    let events = data.events();
    let mut mu_buf = vec![0.0; kk];
    let mut endo_buf = vec![0.0; kk];

    for ((ga, gb), idxs) in data.unordered_pair_groups() {
        let mut fwd = PairExciter::new(kk);
        let mut bwd = PairExciter::new(kk);
        let mut pos = 0usize;
        while pos < idxs.len() {
            let t = events[idxs[pos]].t;
            let mut end = pos;
            while end < idxs.len() && events[idxs[end]].t == t {
                end += 1;
            }
            fwd.decay_to(t, delta);
            bwd.decay_to(t, delta);
            let mut pushes: Vec<(bool, usize)> = Vec::with_capacity(end - pos);
            for &gi in &idxs[pos..end] {
                let ev = &events[gi];
                let forward = ev.src == ga && ev.dst == gb;
                let opp = if forward { &bwd } else { &fwd };
                params.base_rate_block_into(ev.src, ev.dst, covs.get(ev.src, ev.dst), &mut mu_buf);
                let mu_total: f64 = mu_buf.iter().sum();
                let mut endo_total = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        let e = params.alpha_at(a, b) * opp.feeding(k, a, b);
                        endo_buf[a * k + b] = e;
                        endo_total += e;
                    }
                }
                let lam = mu_total + endo_total;
                if !(lam > 0.0) || !lam.is_finite() {
                    return Err(Error::numerical(format!(
                        "intensity of event {gi} (pair {} -> {}, t={t}) is {lam}",
                        ev.src, ev.dst
                    )));
                }
                let exo = rng.random::<f64>() * lam < mu_total;
                let cell = if exo {
                    categorical(&mu_buf, mu_total, rng)
                } else {
                    categorical(&endo_buf, endo_total, rng)
                };
                exogenous[gi] = exo;
                patterns[gi] = ((cell / k) as u16, (cell % k) as u16);
                pushes.push((forward, cell));
            }
            for (forward, cell) in pushes {
                if forward {
                    fwd.add_one_hot(cell);
                } else {
                    bwd.add_one_hot(cell);
                }
            }
            pos = end;
        }
    }

    state.assignment = LatentAssignment::Hard {
        exogenous,
        patterns,
    };
    Ok(())
}

/// Redraws the stored base-rate block of every directed pair with events:
/// cell `c` comes from a gamma with shape `μ̃_c` plus the pair's exogenous
/// count at `c` and rate `T + exp(-xᵀβ_c)`. Cells with zero shape have a
/// degenerate point mass and stay exactly zero. Pairs without events keep
/// the factorized fallback instead of a stored block.
pub fn sample_mu<R: Rng>(
    state: &mut GibbsState,
    data: &EventSequence,
    covs: &CovariateMatrix,
    rng: &mut R,
) -> Result<()> {
    let k = state.params.k();
    let kk = k * k;
    let horizon = data.horizon();
    let counts = exo_counts(data, &state.assignment, k)?;
    for ((u, v), cnt) in counts {
        let x = covs.get(u, v);
        let mut block = vec![0.0; kk];
        for c in 0..kk {
            let shape = state.params.mu_tilde(u, c / k, c % k, v) + cnt[c];
            if shape > 0.0 {
                let rate = horizon + (-state.params.linear_predictor(c, x)).exp();
                block[c] = draw_gamma(shape, rate, rng)?;
            }
        }
        state.params.insert_mu_block(u, v, block)?;
    }
    Ok(())
}

/// Redraws the excitation matrix cell by cell from its conjugate
/// conditional: shape is the prior shape plus the count of endogenous
/// events tagged with the cell, rate is the prior rate plus the summed
/// integrated kernel of every event whose tag mirrors the cell.
pub fn sample_alpha<R: Rng>(
    state: &mut GibbsState,
    data: &EventSequence,
    rng: &mut R,
) -> Result<()> {
    let k = state.params.k();
    let kk = k * k;
    let delta = state.params.delta();
    let horizon = data.horizon();
    let LatentAssignment::Hard {
        exogenous,
        patterns,
    } = &state.assignment
    else {
        return Err(Error::domain(
            "the sampler state carries soft responsibilities; expected hard tags",
        ));
    };
    if exogenous.len() != data.len() {
        return Err(Error::data(format!(
            "assignment covers {} events but the sequence has {}",
            exogenous.len(),
            data.len()
        )));
    }
    let mut m_check = vec![0.0; kk];
    let mut trigger = vec![0.0; kk];
    for (i, ev) in data.events().iter().enumerate() {
        let (a, b) = patterns[i];
        let (a, b) = (a as usize, b as usize);
        if !exogenous[i] {
            m_check[a * k + b] += 1.0;
        }
        // an event tagged (a, b) excites the opposite direction at (b, a)
        trigger[b * k + a] += delta * (1.0 - (-(horizon - ev.t) / delta).exp());
    }
    let mut alpha = state.params.alpha().clone();
    for a in 0..k {
        for b in 0..k {
            let cell = a * k + b;
            alpha[(a, b)] = draw_gamma(
                ALPHA_PRIOR_SHAPE + m_check[cell],
                ALPHA_PRIOR_RATE + trigger[cell],
                rng,
            )?;
        }
    }
    state.params.set_alpha(alpha)?;
    Ok(())
}

/// Redraws the covariate block for every active pair and pattern whose
/// gamma shape is positive. Per pattern, `β` comes from a multivariate
/// normal with precision `τXᵀX + diag(1/ν)` around the ridge solution of
/// the current `ψ` values; then each `ψ` cell gets a fresh Pólya-Gamma
/// auxiliary at the current value and a normal draw with variance
/// `1/(ω+τ)` centered on the precision-weighted blend of the count signal
/// `(m̂-μ̃)/2` and the prior mean `xᵀβ + ln T`. The per-pair factor `π`
/// only widens the fallback normalizer and has no conditional of its own
/// here, so it is refreshed from its log-normal prior. Does nothing
/// without covariates.
pub fn sample_regression<R: Rng>(
    state: &mut GibbsState,
    data: &EventSequence,
    covs: &CovariateMatrix,
    rng: &mut R,
) -> Result<()> {
    let d = state.params.d();
    if d == 0 || covs.is_empty() {
        return Ok(());
    }
    let k = state.params.k();
    let kk = k * k;
    let ln_t = data.horizon().ln();
    let tau = state.params.tau();
    let counts = exo_counts(data, &state.assignment, k)?;
    for &pair in counts.keys() {
        state.psi.entry(pair).or_insert_with(|| vec![ln_t; kk]);
        state.omega.entry(pair).or_insert_with(|| vec![0.0; kk]);
    }

    // β per pattern from the current ψ column over pairs carrying evidence
    let nu = state.params.nu().to_vec();
    let mut new_beta = state.params.beta().to_vec();
    for c in 0..kk {
        let mut prec = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        let mut rows = 0usize;
        for (&(u, v), cnt) in &counts {
            let Some(x) = covs.get(u, v) else { continue };
            if state.params.mu_tilde(u, c / k, c % k, v) + cnt[c] <= 0.0 {
                continue;
            }
            let resid = state.psi[&(u, v)][c] - ln_t;
            for r in 0..d {
                rhs[r] += x[r] * resid;
                for s in 0..d {
                    prec[r * d + s] += x[r] * x[s];
                }
            }
            rows += 1;
        }
        if rows == 0 {
            continue;
        }
        for r in 0..d {
            for s in 0..d {
                prec[r * d + s] *= tau;
            }
            prec[r * d + r] += 1.0 / nu[r];
        }
        cholesky(&mut prec, d)?;
        let mut mean: Vec<f64> = rhs.iter().map(|r| tau * r).collect();
        chol_solve(&prec, &mut mean, d);
        let mut z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        chol_lt_solve(&prec, &mut z, d);
        for r in 0..d {
            new_beta[c * d + r] = mean[r] + z[r];
        }
    }
    state.params.set_beta(new_beta)?;

    // ω at the current ψ, then ψ from the fresh β and ω
    for (&(u, v), cnt) in &counts {
        let x = covs.get(u, v);
        let psi_blk = state.psi.get_mut(&(u, v)).expect("seeded above");
        let om_blk = state.omega.get_mut(&(u, v)).expect("seeded above");
        for c in 0..kk {
            let tilde = state.params.mu_tilde(u, c / k, c % k, v);
            let shape = tilde + cnt[c];
            if shape <= 0.0 {
                continue;
            }
            let om = sample_pg(shape, psi_blk[c], rng)?;
            om_blk[c] = om;
            let var = 1.0 / (om + tau);
            let kappa = (cnt[c] - tilde) / 2.0;
            let mean = var * (kappa + tau * (state.params.linear_predictor(c, x) + ln_t));
            let normal = Normal::new(mean, var.sqrt()).map_err(|e| {
                Error::numerical(format!("psi draw with mean {mean}, var {var}: {e}"))
            })?;
            psi_blk[c] = normal.sample(rng);
        }
    }

    let sd = (1.0 / tau).sqrt();
    for &pair in counts.keys() {
        let z: f64 = rng.sample(StandardNormal);
        state.pi.insert(pair, (sd * z).exp());
    }
    Ok(())
}

/// Runs a chain of `iters` full iterations from `params` on its own
/// deterministic stream. The fallback normalizer is pinned to the data
/// horizon up front; everything else starts from `params` as given, and
/// the first sweep tags the events under those values. Single-threaded by
/// construction: every draw depends on the one before it.
pub fn run_chain(
    params: HawkesParams,
    data: &EventSequence,
    covs: &CovariateMatrix,
    iters: usize,
    seed: u64,
) -> Result<GibbsRun> {
    if iters == 0 {
        return Err(Error::domain("the chain needs at least one iteration"));
    }
    if params.node_count() != data.node_count() {
        return Err(Error::domain(format!(
            "model covers {} nodes but the data has {}",
            params.node_count(),
            data.node_count()
        )));
    }
    if !covs.is_empty() && covs.d() != params.d() {
        return Err(Error::domain(format!(
            "model expects {} covariates but rows carry {}",
            params.d(),
            covs.d()
        )));
    }
    let mut rng = stream(seed, streams::EVENT_GIBBS);
    let mut state = GibbsState::new(params);
    state.params.set_mu_fallback_horizon(data.horizon());
    let k = state.params.k();
    let mut records = Vec::with_capacity(iters);
    for it in 0..iters {
        sample_assignments(&mut state, data, covs, &mut rng)?;
        sample_mu(&mut state, data, covs, &mut rng)?;
        sample_regression(&mut state, data, covs, &mut rng)?;
        sample_alpha(&mut state, data, &mut rng)?;
        let lp = log_posterior(&state.params, data, Some(&state.assignment), covs)?;
        if !lp.is_finite() {
            return Err(Error::numerical(format!(
                "log-posterior became non-finite at iteration {it}"
            )));
        }
        let am = state.params.alpha();
        let mut alpha = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                alpha.push(am[(a, b)]);
            }
        }
        let stored_mu_total = state
            .params
            .stored_mu()
            .values()
            .map(|b| b.iter().sum::<f64>())
            .sum();
        records.push(IterRecord {
            log_posterior: lp,
            alpha,
            stored_mu_total,
        });
    }
    Ok(GibbsRun { state, records })
}

/// Exogenous tag counts per directed pair, flattened over patterns. Every
/// pair with at least one event gets a block, zero-filled when all its
/// events are endogenous.
fn exo_counts(
    data: &EventSequence,
    assignment: &LatentAssignment,
    k: usize,
) -> Result<BTreeMap<(u32, u32), Vec<f64>>> {
    let LatentAssignment::Hard {
        exogenous,
        patterns,
    } = assignment
    else {
        return Err(Error::domain(
            "the sampler state carries soft responsibilities; expected hard tags",
        ));
    };
    if exogenous.len() != data.len() {
        return Err(Error::data(format!(
            "assignment covers {} events but the sequence has {}",
            exogenous.len(),
            data.len()
        )));
    }
    let kk = k * k;
    let mut counts = BTreeMap::new();
    for (i, ev) in data.events().iter().enumerate() {
        let blk = counts
            .entry((ev.src, ev.dst))
            .or_insert_with(|| vec![0.0; kk]);
        if exogenous[i] {
            let (a, b) = patterns[i];
            blk[a as usize * k + b as usize] += 1.0;
        }
    }
    Ok(counts)
}

/// Index draw proportional to `w`; `total` is the precomputed sum. Never
/// returns a zero-weight cell, also under accumulated rounding.
fn categorical<R: Rng>(w: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    let mut last_pos = 0usize;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            last_pos = i;
            u -= wi;
            if u < 0.0 {
                return i;
            }
        }
    }
    last_pos
}

/// Gamma draw in shape/rate form. Zero shape is the degenerate point mass
/// at zero; positive shapes are clamped away from literal zero so that
/// downstream log terms stay finite.
fn draw_gamma<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if shape <= 0.0 {
        return Ok(0.0);
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::numerical(format!("gamma draw with shape {shape}, rate {rate}: {e}")))?;
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}
