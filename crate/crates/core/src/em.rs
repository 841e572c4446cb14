//! EM fitter for the factorized Hawkes model on top of a community fit.
//!
//! One iteration runs an E-step that recomputes per-event pattern
//! responsibilities and the sufficient statistics `m̂` (base-rate mass)
//! and `m̌` (triggered mass), then closed-form M-steps for the stored
//! base rates, the covariate regression, and the excitation matrix. The
//! decay time `δ` stays fixed throughout.
//!
//! Histories are soft-tagged: event `j`'s kernel contribution to pattern
//! `(k, k')` of the opposite direction is weighted by `j`'s own
//! responsibility mass for `(k', k)`. Within an E-step pass events are
//! visited chronologically per pair, so the tags feeding an event are the
//! ones just recomputed this iteration.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::events::{EventSequence, LatentAssignment};
use crate::intensity::{log_posterior, PairExciter};
use crate::params::{CovariateMatrix, HawkesParams, ALPHA_PRIOR_RATE, ALPHA_PRIOR_SHAPE};
use crate::polya_gamma::pg_expectation;

#[derive(Clone, Copy, Debug)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative objective-change threshold; `0` disables early stopping.
    pub tol: f64,
    /// Force the E-step onto one thread.
    pub sequential: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 500,
            tol: 1e-6,
            sequential: false,
        }
    }
}

/// Fitter state carried across iterations. Sparse maps are keyed by the
/// directed pair and hold one `K²` block in `(k, k')` row-major order;
/// pairs without events never get an entry.
#[derive(Clone, Debug)]
pub struct EMState {
    pub params: HawkesParams,
    pub responsibilities: LatentAssignment,
    pub m_hat: BTreeMap<(u32, u32), Vec<f64>>,
    pub m_check: BTreeMap<(u32, u32), Vec<f64>>,
    pub omega_expect: BTreeMap<(u32, u32), Vec<f64>>,
    pub psi: BTreeMap<(u32, u32), Vec<f64>>,
    pub objective_trace: Vec<f64>,
}

impl EMState {
    pub fn new(params: HawkesParams) -> Self {
        let k = params.k();
        EMState {
            params,
            responsibilities: LatentAssignment::Soft {
                k,
                weights: Vec::new(),
            },
            m_hat: BTreeMap::new(),
            m_check: BTreeMap::new(),
            omega_expect: BTreeMap::new(),
            psi: BTreeMap::new(),
            objective_trace: Vec::new(),
        }
    }
}

struct GroupStats {
    /// One `K²` responsibility block per group event, in group order.
    weights: Vec<f64>,
    m_hat_fwd: Vec<f64>,
    m_check_fwd: Vec<f64>,
    n_fwd: usize,
    m_hat_bwd: Vec<f64>,
    m_check_bwd: Vec<f64>,
    n_bwd: usize,
}

/// Recomputes responsibilities and the sufficient statistics under the
/// current parameters. Every event's `K²` block sums to one; the base
/// shares accumulate into `m_hat` and the triggered shares into
/// `m_check`, per directed pair.
pub fn e_step(
    state: &mut EMState,
    data: &EventSequence,
    covs: &CovariateMatrix,
    sequential: bool,
) -> Result<()> {
    let params = &state.params;
    let k = params.k();
    let kk = k * k;
    let groups: Vec<((u32, u32), Vec<usize>)> =
        data.unordered_pair_groups().into_iter().collect();
    let events = data.events();
    let delta = params.delta();

    let per_group =
        crate::par::map_items(sequential, &groups, |((a, b), idxs)| -> Result<GroupStats> {
            let mut fwd = PairExciter::new(kk); // direction a -> b
            let mut bwd = PairExciter::new(kk); // direction b -> a
            let mut mu_fwd = vec![0.0; kk];
            let mut mu_bwd = vec![0.0; kk];
            params.base_rate_block_into(*a, *b, covs.get(*a, *b), &mut mu_fwd);
            params.base_rate_block_into(*b, *a, covs.get(*b, *a), &mut mu_bwd);
            let mut gs = GroupStats {
                weights: vec![0.0; idxs.len() * kk],
                m_hat_fwd: vec![0.0; kk],
                m_check_fwd: vec![0.0; kk],
                n_fwd: 0,
                m_hat_bwd: vec![0.0; kk],
                m_check_bwd: vec![0.0; kk],
                n_bwd: 0,
            };
            let mut i = 0;
            while i < idxs.len() {
                let t = events[idxs[i]].t;
                let mut j = i;
                while j < idxs.len() && events[idxs[j]].t == t {
                    j += 1;
                }
                fwd.decay_to(t, delta);
                bwd.decay_to(t, delta);
                for (local, &idx) in idxs.iter().enumerate().take(j).skip(i) {
                    let e = &events[idx];
                    let forward = e.src == *a;
                    let (mu, opp) = if forward {
                        (&mu_fwd, &bwd)
                    } else {
                        (&mu_bwd, &fwd)
                    };
                    let mut lam = 0.0;
                    let w = &mut gs.weights[local * kk..(local + 1) * kk];
                    for ka in 0..k {
                        for kb in 0..k {
                            let base = mu[ka * k + kb];
                            let exc = params.alpha_at(ka, kb) * opp.feeding(k, ka, kb);
                            w[ka * k + kb] = base + exc;
                            lam += base + exc;
                        }
                    }
                    if !(lam > 0.0) || !lam.is_finite() {
                        return Err(Error::numerical(format!(
                            "intensity of event {idx} (pair {} -> {}, t={t}) is {lam}",
                            e.src, e.dst
                        )));
                    }
                    let (m_hat, m_check) = if forward {
                        gs.n_fwd += 1;
                        (&mut gs.m_hat_fwd, &mut gs.m_check_fwd)
                    } else {
                        gs.n_bwd += 1;
                        (&mut gs.m_hat_bwd, &mut gs.m_check_bwd)
                    };
                    for c in 0..kk {
                        let base_share = mu[c] / lam;
                        m_hat[c] += base_share;
                        m_check[c] += w[c] / lam - base_share;
                        w[c] /= lam;
                    }
                }
                // the whole batch evaluated, now let it excite the future
                for (local, &idx) in idxs.iter().enumerate().take(j).skip(i) {
                    let e = &events[idx];
                    let w = &gs.weights[local * kk..(local + 1) * kk];
                    if e.src == *a {
                        fwd.add_weights(w);
                    } else {
                        bwd.add_weights(w);
                    }
                }
                i = j;
            }
            Ok(gs)
        });

    let mut weights = vec![0.0; data.len() * kk];
    let mut m_hat = BTreeMap::new();
    let mut m_check = BTreeMap::new();
    for (((a, b), idxs), gs) in groups.iter().zip(per_group) {
        let gs = gs?;
        for (local, &idx) in idxs.iter().enumerate() {
            weights[idx * kk..(idx + 1) * kk]
                .copy_from_slice(&gs.weights[local * kk..(local + 1) * kk]);
        }
        if gs.n_fwd > 0 {
            m_hat.insert((*a, *b), gs.m_hat_fwd);
            m_check.insert((*a, *b), gs.m_check_fwd);
        }
        if gs.n_bwd > 0 {
            m_hat.insert((*b, *a), gs.m_hat_bwd);
            m_check.insert((*b, *a), gs.m_check_bwd);
        }
    }
    state.responsibilities = LatentAssignment::Soft { k, weights };
    state.m_hat = m_hat;
    state.m_check = m_check;
    Ok(())
}

/// Closed-form base-rate update: every pair with events gets a stored
/// block `(μ̃ + m̂) / (T + exp(-xᵀβ))`. Pairs without events stay on the
/// factorized fallback, which is this same expression at `m̂ = 0`.
pub fn m_step_mu(state: &mut EMState, horizon: f64, covs: &CovariateMatrix) -> Result<()> {
    let k = state.params.k();
    let kk = k * k;
    let blocks: Vec<((u32, u32), Vec<f64>)> = state
        .m_hat
        .iter()
        .map(|(&(u, v), m_hat)| {
            let x = covs.get(u, v);
            let mut block = vec![0.0; kk];
            for a in 0..k {
                for b in 0..k {
                    let c = a * k + b;
                    let shape = state.params.mu_tilde(u, a, b, v) + m_hat[c];
                    let rate = horizon + (-state.params.linear_predictor(c, x)).exp();
                    block[c] = shape / rate;
                }
            }
            ((u, v), block)
        })
        .collect();
    for ((u, v), block) in blocks {
        state.params.insert_mu_block(u, v, block)?;
    }
    Ok(())
}

/// Covariate block: per pattern, a ridge solve for `β` from the current
/// `ψ`, Pólya-Gamma expectations at the current `ψ`, then the diagonal
/// Gaussian update for `ψ` itself. No-op without covariates.
///
/// Cells whose gamma shape `μ̃ + m̂` is zero carry no regression evidence
/// and are skipped; their base rate is pinned at zero anyway.
pub fn m_step_regression(
    state: &mut EMState,
    horizon: f64,
    covs: &CovariateMatrix,
) -> Result<()> {
    let d = state.params.d();
    if d == 0 || covs.is_empty() {
        return Ok(());
    }
    let k = state.params.k();
    let kk = k * k;
    let tau = state.params.tau();
    let ln_t = horizon.ln();
    let pairs: Vec<(u32, u32)> = state.m_hat.keys().copied().collect();

    // make sure every active pair has a ψ block to read from
    for &(u, v) in &pairs {
        state
            .psi
            .entry((u, v))
            .or_insert_with(|| vec![ln_t; kk]);
    }

    let mut beta = state.params.beta().to_vec();
    for c in 0..kk {
        // β_c from the current ψ: (XᵀX + τ⁻¹A) β = Xᵀ(ψ - ln T)
        let mut xtx = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for &(u, v) in &pairs {
            let Some(x) = covs.get(u, v) else { continue };
            let shape = state.params.mu_tilde(u, c / k, c % k, v) + state.m_hat[&(u, v)][c];
            if shape <= 0.0 {
                continue;
            }
            let psi_c = state.psi[&(u, v)][c];
            for di in 0..d {
                for dj in 0..d {
                    xtx[di * d + dj] += x[di] * x[dj];
                }
                rhs[di] += x[di] * (psi_c - ln_t);
            }
        }
        let nu = state.params.nu();
        for di in 0..d {
            xtx[di * d + di] += 1.0 / (tau * nu[di]);
        }
        let beta_c = solve_dense(&mut xtx, &mut rhs, d)?;
        beta[c * d..(c + 1) * d].copy_from_slice(&beta_c);
    }

    // E[ω] at the current ψ, then the ψ update with the fresh β
    let mut omega_expect = BTreeMap::new();
    let mut psi_new = BTreeMap::new();
    for &(u, v) in &pairs {
        let x = covs.get(u, v);
        let m_hat = &state.m_hat[&(u, v)];
        let psi_old = &state.psi[&(u, v)];
        let mut om = vec![0.0; kk];
        let mut ps = psi_old.clone();
        for a in 0..k {
            for b in 0..k {
                let c = a * k + b;
                let mu_tilde = state.params.mu_tilde(u, a, b, v);
                let shape = mu_tilde + m_hat[c];
                if shape <= 0.0 {
                    continue;
                }
                let w = pg_expectation(shape, psi_old[c])?;
                om[c] = w;
                let kappa = (m_hat[c] - mu_tilde) / 2.0;
                let prior_mean = dot(&beta[c * d..(c + 1) * d], x) + ln_t;
                ps[c] = (kappa + tau * prior_mean) / (w + tau);
            }
        }
        omega_expect.insert((u, v), om);
        psi_new.insert((u, v), ps);
    }
    state.params.set_beta(beta)?;
    state.omega_expect = omega_expect;
    state.psi = psi_new;
    Ok(())
}

/// Gamma-conjugate excitation update. The numerator collects the
/// triggered mass `m̌` per pattern; the denominator charges every event,
/// as a potential trigger of its opposite direction, its integrated
/// kernel to the horizon at the mirrored pattern.
pub fn m_step_alpha(state: &mut EMState, data: &EventSequence, horizon: f64) -> Result<()> {
    let k = state.params.k();
    let kk = k * k;
    let delta = state.params.delta();
    let mut trigger = vec![0.0; kk];
    let mut w = vec![0.0; kk];
    for (i, e) in data.events().iter().enumerate() {
        state.responsibilities.weights_into(i, k, &mut w);
        let tail = delta * (1.0 - (-(horizon - e.t) / delta).exp());
        for a in 0..k {
            for b in 0..k {
                trigger[b * k + a] += w[a * k + b] * tail;
            }
        }
    }
    let mut checked_mass = vec![0.0; kk];
    for block in state.m_check.values() {
        for (acc, m) in checked_mass.iter_mut().zip(block) {
            *acc += m;
        }
    }
    let mut alpha = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let c = a * k + b;
            alpha[(a, b)] =
                (ALPHA_PRIOR_SHAPE + checked_mass[c]) / (ALPHA_PRIOR_RATE + trigger[c]);
        }
    }
    state.params.set_alpha(alpha)
}

/// Runs EM to convergence: per iteration an E-step, the base-rate
/// update, the covariate block, the excitation update, then one joint
/// log-posterior evaluation appended to the trace. Stops when the
/// relative objective change drops below `tol` or after `max_iter`
/// iterations. Fully deterministic.
pub fn fit_em(
    params: HawkesParams,
    data: &EventSequence,
    covs: &CovariateMatrix,
    opts: &EmOptions,
) -> Result<EMState> {
    let horizon = data.horizon();
    if data.node_count() > params.node_count() {
        return Err(Error::domain(format!(
            "data mentions {} nodes but the model has {}",
            data.node_count(),
            params.node_count()
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::domain("max_iter must be at least 1".to_string()));
    }
    let k = params.k();
    let mut state = EMState::new(params);
    state.params.set_mu_fallback_horizon(horizon);
    state
        .params
        .set_alpha(DMatrix::from_element(k, k, INITIAL_ALPHA))?;
    let kkd = k * k * state.params.d();
    state.params.set_beta(vec![0.0; kkd])?;

    let mut prev = f64::NAN;
    for iter in 0..opts.max_iter {
        e_step(&mut state, data, covs, opts.sequential)?;
        m_step_mu(&mut state, horizon, covs)?;
        m_step_regression(&mut state, horizon, covs)?;
        m_step_alpha(&mut state, data, horizon)?;
        let obj = log_posterior(
            &state.params,
            data,
            Some(&state.responsibilities),
            covs,
        )?;
        if !obj.is_finite() {
            return Err(Error::numerical(format!(
                "objective became non-finite at iteration {iter}"
            )));
        }
        state.objective_trace.push(obj);
        if prev.is_finite() && (obj - prev).abs() <= opts.tol * prev.abs().max(1.0) {
            break;
        }
        prev = obj;
    }
    Ok(state)
}

/// Uniform starting excitation, inside the stationarity region for any
/// reasonable decay time.
pub const INITIAL_ALPHA: f64 = 0.1;

fn dot(beta: &[f64], x: Option<&[f64]>) -> f64 {
    match x {
        Some(x) => beta.iter().zip(x).map(|(b, xi)| b * xi).sum(),
        None => 0.0,
    }
}

/// Gaussian elimination with partial pivoting on a row-major `n×n`
/// system; consumes its inputs as scratch.
fn solve_dense(mat: &mut [f64], rhs: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                mat[i * n + col]
                    .abs()
                    .partial_cmp(&mat[j * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if mat[pivot * n + col].abs() < 1e-300 {
            return Err(Error::numerical(
                "regression system is singular".to_string(),
            ));
        }
        if pivot != col {
            for j in 0..n {
                mat.swap(col * n + j, pivot * n + j);
            }
            rhs.swap(col, pivot);
        }
        let diag = mat[col * n + col];
        for row in col + 1..n {
            let f = mat[row * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                mat[row * n + j] -= f * mat[col * n + j];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = rhs[col];
        for j in col + 1..n {
            s -= mat[col * n + j] * x[j];
        }
        x[col] = s / mat[col * n + col];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use crate::rng::{stream, streams};
    use crate::simulate::simulate;

    fn seq(events: Vec<Event>, horizon: f64, v: u32) -> EventSequence {
        EventSequence::new(events, horizon, v).unwrap()
    }

    fn ev(t: f64, src: u32, dst: u32) -> Event {
        Event { t, src, dst }
    }

    fn two_pattern_params(alpha: f64) -> HawkesParams {
        let phi = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.3, 1.1]);
        let omega = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.3, 0.8]);
        let a = DMatrix::from_element(2, 2, alpha);
        HawkesParams::new(phi, omega, a, 0.45).unwrap()
    }

    #[test]
    fn responsibilities_normalize_and_conserve_mass() {
        let data = seq(
            vec![ev(0.2, 0, 1), ev(0.7, 1, 0), ev(1.1, 0, 1), ev(1.6, 1, 0)],
            2.0,
            2,
        );
        let mut params = two_pattern_params(0.6);
        params.set_mu_fallback_horizon(2.0);
        let mut state = EMState::new(params);
        let covs = CovariateMatrix::empty();
        e_step(&mut state, &data, &covs, true).unwrap();

        let k = 2;
        let mut w = vec![0.0; 4];
        for i in 0..data.len() {
            state.responsibilities.weights_into(i, k, &mut w);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-10, "event {i} responsibilities {s}");
            assert!(w.iter().all(|&x| x >= 0.0));
        }
        let mut total = 0.0;
        for ((u, v), block) in &state.m_hat {
            let pair_events = data
                .events()
                .iter()
                .filter(|e| e.src == *u && e.dst == *v)
                .count() as f64;
            let hat: f64 = block.iter().sum();
            let check: f64 = state.m_check[&(*u, *v)].iter().sum();
            assert!(
                (hat + check - pair_events).abs() < 1e-10,
                "pair ({u},{v}) mass {} vs {pair_events}",
                hat + check
            );
            total += hat + check;
        }
        assert!((total - data.len() as f64).abs() < 1e-10);
        assert!(state
            .m_check
            .values()
            .flat_map(|b| b.iter())
            .all(|&x| x >= 0.0));
    }

    #[test]
    fn e_step_matches_direct_arithmetic() {
        // second event excited by the first: verify both events against
        // the defining formulas written out by hand
        let data = seq(vec![ev(0.4, 1, 0), ev(1.0, 0, 1)], 2.0, 2);
        let mut params = two_pattern_params(0.6);
        params.set_mu_fallback_horizon(2.0);
        let mut state = EMState::new(params);
        let covs = CovariateMatrix::empty();
        e_step(&mut state, &data, &covs, true).unwrap();

        let p = &state.params;
        let k = 2;
        // first event: no opposite history, responsibilities ∝ μ block
        let mut mu10 = vec![0.0; 4];
        p.base_rate_block_into(1, 0, None, &mut mu10);
        let tot10: f64 = mu10.iter().sum();
        let mut w = vec![0.0; 4];
        state.responsibilities.weights_into(0, k, &mut w);
        for c in 0..4 {
            assert!((w[c] - mu10[c] / tot10).abs() < 1e-12);
        }
        // second event: base + mirrored excitation from the first
        let mut mu01 = vec![0.0; 4];
        p.base_rate_block_into(0, 1, None, &mut mu01);
        let decay = (-(1.0f64 - 0.4) / 0.45).exp();
        let mut comp = vec![0.0; 4];
        let mut lam = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let exc = p.alpha_at(a, b) * (mu10[b * 2 + a] / tot10) * decay;
                comp[a * 2 + b] = mu01[a * 2 + b] + exc;
                lam += comp[a * 2 + b];
            }
        }
        state.responsibilities.weights_into(1, k, &mut w);
        for c in 0..4 {
            assert!(
                (w[c] - comp[c] / lam).abs() < 1e-12,
                "pattern {c}: {} vs {}",
                w[c],
                comp[c] / lam
            );
        }
        // and the split into base/triggered mass for the (0,1) pair
        let m_hat = &state.m_hat[&(0, 1)];
        let m_check = &state.m_check[&(0, 1)];
        for c in 0..4 {
            assert!((m_hat[c] - mu01[c] / lam).abs() < 1e-12);
            assert!((m_check[c] - (comp[c] - mu01[c]) / lam).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_excitation_gives_base_only_responsibilities() {
        let data = seq(vec![ev(0.4, 1, 0), ev(1.0, 0, 1), ev(1.2, 1, 0)], 2.0, 2);
        let mut params = two_pattern_params(0.0);
        params.set_mu_fallback_horizon(2.0);
        let mut state = EMState::new(params);
        e_step(&mut state, &data, &CovariateMatrix::empty(), true).unwrap();
        for block in state.m_check.values() {
            assert!(block.iter().all(|&x| x == 0.0));
        }
        let mut mu = vec![0.0; 4];
        state.params.base_rate_block_into(0, 1, None, &mut mu);
        let tot: f64 = mu.iter().sum();
        let mut w = vec![0.0; 4];
        state.responsibilities.weights_into(1, 2, &mut w);
        for c in 0..4 {
            assert!((w[c] - mu[c] / tot).abs() < 1e-12);
        }
    }

    #[test]
    fn first_event_of_a_pair_has_no_triggered_mass() {
        let data = seq(vec![ev(0.3, 0, 1), ev(0.9, 1, 0)], 2.0, 2);
        let mut params = two_pattern_params(0.9);
        params.set_mu_fallback_horizon(2.0);
        let mut state = EMState::new(params);
        e_step(&mut state, &data, &CovariateMatrix::empty(), true).unwrap();
        // the 0→1 event came first: all of its mass is base mass
        let hat: f64 = state.m_hat[&(0, 1)].iter().sum();
        assert!((hat - 1.0).abs() < 1e-12);
        assert!(state.m_check[&(0, 1)].iter().all(|&x| x == 0.0));
        // the 1→0 event has opposite history, so some mass is triggered
        let check: f64 = state.m_check[&(1, 0)].iter().sum();
        assert!(check > 0.0);
    }

    #[test]
    fn mu_update_matches_closed_form() {
        // μ̃=0.2, m̂=5, T=10, no covariates → 5.2/11
        let phi = DMatrix::from_row_slice(2, 1, &[0.2, 1.0]);
        let omega = DMatrix::from_element(1, 1, 1.0);
        let alpha = DMatrix::from_element(1, 1, 0.1);
        let mut params = HawkesParams::new(phi, omega, alpha, 0.45).unwrap();
        params.set_mu_fallback_horizon(10.0);
        assert!((params.mu_tilde(0, 0, 0, 1) - 0.2).abs() < 1e-15);
        let mut state = EMState::new(params);
        state.m_hat.insert((0, 1), vec![5.0]);
        m_step_mu(&mut state, 10.0, &CovariateMatrix::empty()).unwrap();
        let got = state.params.stored_mu_block(0, 1).unwrap()[0];
        assert!((got - 5.2 / 11.0).abs() < 1e-12, "got {got}");
        // pair without events stays on the fallback μ̃/(T+1)
        assert!(state.params.stored_mu_block(1, 0).is_none());
        let fb = params_fallback(&state.params, 1, 0);
        assert!((fb - 0.2 / 11.0).abs() < 1e-12);
    }

    fn params_fallback(p: &HawkesParams, u: u32, v: u32) -> f64 {
        let mut buf = vec![0.0; p.k() * p.k()];
        p.base_rate_block_into(u, v, None, &mut buf);
        buf.iter().sum()
    }

    #[test]
    fn alpha_update_reduces_to_prior_without_events() {
        let data = seq(vec![], 5.0, 2);
        let mut params = two_pattern_params(0.6);
        params.set_mu_fallback_horizon(5.0);
        let mut state = EMState::new(params);
        e_step(&mut state, &data, &CovariateMatrix::empty(), true).unwrap();
        m_step_alpha(&mut state, &data, 5.0).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (state.params.alpha_at(a, b) - ALPHA_PRIOR_SHAPE / ALPHA_PRIOR_RATE).abs()
                        < 1e-15
                );
            }
        }
    }

    #[test]
    fn alpha_update_saturated_compensator() {
        // single-pattern model, one event far from the horizon, total
        // triggered mass forced to 2 → (1+2)/(1+δ)
        let phi = DMatrix::from_element(2, 1, 1.0);
        let omega = DMatrix::from_element(1, 1, 1.0);
        let alpha = DMatrix::from_element(1, 1, 0.5);
        let delta = 0.45;
        let mut params = HawkesParams::new(phi, omega, alpha, delta).unwrap();
        let horizon = 1000.0;
        params.set_mu_fallback_horizon(horizon);
        let data = seq(vec![ev(1.0, 0, 1)], horizon, 2);
        let mut state = EMState::new(params);
        state.responsibilities = LatentAssignment::Soft {
            k: 1,
            weights: vec![1.0],
        };
        state.m_check.insert((1, 0), vec![2.0]);
        m_step_alpha(&mut state, &data, horizon).unwrap();
        let got = state.params.alpha_at(0, 0);
        let expect = 3.0 / (1.0 + delta);
        assert!((got - expect).abs() < 1e-9, "got {got} expect {expect}");
    }

    #[test]
    fn regression_is_a_noop_without_covariates() {
        let data = seq(vec![ev(0.5, 0, 1)], 2.0, 2);
        let mut params = two_pattern_params(0.3);
        params.set_mu_fallback_horizon(2.0);
        let mut state = EMState::new(params);
        e_step(&mut state, &data, &CovariateMatrix::empty(), true).unwrap();
        m_step_regression(&mut state, 2.0, &CovariateMatrix::empty()).unwrap();
        assert!(state.psi.is_empty());
        assert!(state.omega_expect.is_empty());
        assert!(state.params.beta().is_empty());
    }

    fn one_covariate_setup() -> (HawkesParams, EventSequence, CovariateMatrix) {
        let phi = DMatrix::from_row_slice(4, 1, &[1.0, 0.8, 1.2, 0.9]);
        let omega = DMatrix::from_element(1, 1, 1.0);
        let alpha = DMatrix::from_element(1, 1, 0.1);
        let mut params =
            HawkesParams::with_covariates(phi, omega, alpha, 0.45, 1, 1.0, vec![1.0]).unwrap();
        params.set_mu_fallback_horizon(4.0);
        let events = vec![
            ev(0.5, 0, 1),
            ev(1.0, 1, 2),
            ev(1.5, 2, 3),
            ev(2.0, 3, 0),
        ];
        let data = seq(events, 4.0, 4);
        let mut rows = BTreeMap::new();
        rows.insert((0u32, 1u32), vec![0.5]);
        rows.insert((1u32, 2u32), vec![-0.3]);
        rows.insert((2u32, 3u32), vec![1.0]);
        rows.insert((3u32, 0u32), vec![0.2]);
        let covs = CovariateMatrix::new(1, rows).unwrap();
        (params, data, covs)
    }

    #[test]
    fn regression_matches_scalar_ridge() {
        let (params, data, covs) = one_covariate_setup();
        let tau = params.tau();
        let nu0 = params.nu()[0];
        let mut state = EMState::new(params);
        e_step(&mut state, &data, &covs, true).unwrap();
        // seed ψ away from the prior mean so the ridge has signal
        let ln_t = 4.0f64.ln();
        let psis = [0.3, -0.2, 0.8, 0.1];
        for (i, (&(u, v), _)) in covs.pairs().enumerate() {
            state.psi.insert((u, v), vec![ln_t + psis[i]]);
        }
        m_step_regression(&mut state, 4.0, &covs).unwrap();
        // hand-solved 1×1 ridge over the four active pairs
        let xs = [0.5, -0.3, 1.0, 0.2];
        let mut num = 0.0;
        let mut den = 1.0 / (tau * nu0);
        for i in 0..4 {
            num += xs[i] * psis[i];
            den += xs[i] * xs[i];
        }
        let expect = num / den;
        let got = state.params.beta()[0];
        assert!((got - expect).abs() < 1e-10, "got {got} expect {expect}");
    }

    #[test]
    fn huge_tau_pins_psi_to_its_prior_mean() {
        let (mut params, data, covs) = one_covariate_setup();
        params = HawkesParams::with_covariates(
            params.phi().clone(),
            params.omega().clone(),
            params.alpha().clone(),
            params.delta(),
            1,
            1e12,
            vec![1.0],
        )
        .unwrap();
        params.set_mu_fallback_horizon(4.0);
        let mut state = EMState::new(params);
        e_step(&mut state, &data, &covs, true).unwrap();
        m_step_regression(&mut state, 4.0, &covs).unwrap();
        let ln_t = 4.0f64.ln();
        for (&(u, v), psi) in &state.psi {
            let x = covs.get(u, v).unwrap()[0];
            let mean = state.params.beta()[0] * x + ln_t;
            assert!(
                (psi[0] - mean).abs() < 1e-6,
                "pair ({u},{v}): {} vs {mean}",
                psi[0]
            );
        }
    }

    #[test]
    fn fit_runs_exactly_one_iteration_when_asked() {
        let data = seq(vec![ev(0.5, 0, 1), ev(1.1, 1, 0)], 2.0, 2);
        let params = two_pattern_params(0.6);
        let opts = EmOptions {
            max_iter: 1,
            tol: 0.0,
            sequential: true,
        };
        let state = fit_em(params, &data, &CovariateMatrix::empty(), &opts).unwrap();
        assert_eq!(state.objective_trace.len(), 1);
    }

    #[test]
    fn objective_is_monotone_on_simulated_data() {
        let phi = DMatrix::from_row_slice(6, 2, &[
            1.0, 0.0, //
            0.9, 0.1, //
            1.1, 0.0, //
            0.0, 1.0, //
            0.1, 0.9, //
            0.0, 1.2,
        ]);
        let omega = DMatrix::from_row_slice(2, 2, &[0.7, 0.05, 0.05, 0.6]);
        let alpha = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.3, 0.9]);
        let truth = HawkesParams::new(phi, omega, alpha, 0.45).unwrap();
        let mut rng = stream(11, streams::SIMULATE);
        let (data, _) = simulate(&truth, &CovariateMatrix::empty(), 60.0, 200_000, &mut rng)
            .unwrap();
        assert!(data.len() > 200, "want a non-trivial sample, got {}", data.len());

        let opts = EmOptions {
            max_iter: 60,
            tol: 0.0,
            sequential: false,
        };
        let state = fit_em(truth, &data, &CovariateMatrix::empty(), &opts).unwrap();
        assert_eq!(state.objective_trace.len(), 60);
        for w in state.objective_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * w[0].abs(),
                "objective dropped: {} -> {}",
                w[0],
                w[1]
            );
        }
        // and it should have improved substantially over the start
        let first = state.objective_trace[0];
        let last = *state.objective_trace.last().unwrap();
        assert!(last > first);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = seq(
            vec![ev(0.2, 0, 1), ev(0.7, 1, 0), ev(1.1, 0, 1), ev(1.6, 1, 0)],
            2.0,
            2,
        );
        let opts = EmOptions {
            max_iter: 10,
            tol: 0.0,
            sequential: false,
        };
        let a = fit_em(two_pattern_params(0.6), &data, &CovariateMatrix::empty(), &opts)
            .unwrap();
        let b = fit_em(two_pattern_params(0.6), &data, &CovariateMatrix::empty(), &opts)
            .unwrap();
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.params.alpha(), b.params.alpha());
    }

    #[test]
    fn early_stop_on_converged_objective() {
        let data = seq(vec![ev(0.5, 0, 1), ev(1.1, 1, 0)], 2.0, 2);
        let opts = EmOptions {
            max_iter: 500,
            tol: 1e-6,
            sequential: true,
        };
        let state = fit_em(two_pattern_params(0.6), &data, &CovariateMatrix::empty(), &opts)
            .unwrap();
        assert!(state.objective_trace.len() < 500);
    }
}
