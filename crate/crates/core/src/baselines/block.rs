//! Block-structured Hawkes baselines: spectral node labels from the
//! aggregated adjacency, then per-block exponential-kernel MLE. Two
//! variants share the machinery. The per-pair variant treats every
//! ordered node pair as an independent process with block-shared
//! parameters, excited by the reverse pair. The pooled variant collapses
//! each ordered block pair into a single process excited by the pooled
//! history of the mirrored block pair.
//!
//! The exponential decay is not jointly concave with the rates, so it is
//! profiled over a fixed logarithmic grid and the concave `(φ, α)`
//! subproblem is solved exactly at each candidate.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;

use super::opt::{maximize, LinearHawkesDesign};
use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::hgap::AggregatedGraph;
use crate::rng::{stream, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    /// independent reverse-excited pair processes, parameters shared per
    /// ordered block pair
    Chip,
    /// one pooled process per ordered block pair
    HawkesSbm,
}

/// Node labels plus per-ordered-block-pair rates: base rate, excitation
/// jump, and the exponential timescale (`α·e^{-Δ/decay}`).
#[derive(Clone, Debug)]
pub struct BlockModelParams {
    pub variant: BlockVariant,
    pub labels: Vec<u32>,
    pub k: usize,
    pub phi: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub decay: DMatrix<f64>,
}

impl BlockModelParams {
    /// Number of ordered node pairs in block pair `(a, b)` under the
    /// fitted labels.
    pub fn pair_count(&self, a: usize, b: usize) -> usize {
        let na = self.labels.iter().filter(|&&c| c as usize == a).count();
        let nb = self.labels.iter().filter(|&&c| c as usize == b).count();
        if a == b {
            na * na.saturating_sub(1)
        } else {
            na * nb
        }
    }
}

/// Decay candidates: 13 points log-spaced over `[1e-2, 1e2]`.
pub(crate) fn decay_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-2.0 + i as f64 / 3.0)).collect()
}

/// Labels the nodes by k-means on the top-`k` left and right singular
/// vectors of the aggregated adjacency, so a node's profile covers both
/// its out- and in-neighborhoods. Deterministic for a given seed.
pub fn spectral_labels(graph: &AggregatedGraph, k: usize, seed: u64) -> Result<Vec<u32>> {
    let v = graph.node_count() as usize;
    if k == 0 {
        return Err(Error::domain("need at least one block"));
    }
    if k > v {
        return Err(Error::domain(format!("{k} blocks for {v} nodes")));
    }
    if k == 1 {
        return Ok(vec![0; v]);
    }
    let mut adj = DMatrix::zeros(v, v);
    for &(a, b) in graph.edges() {
        adj[(a as usize, b as usize)] = 1.0;
    }
    let svd = adj.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .expect("singular values are finite")
    });
    let mut features = DMatrix::zeros(v, 2 * k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        for row in 0..v {
            features[(row, col)] = u[(row, idx)];
            features[(row, k + col)] = vt[(idx, row)];
        }
    }
    let mut rng = stream(seed, streams::SPECTRAL);
    Ok(kmeans(&features, k, &mut rng))
}

/// Standard k-means with distance-squared seeding. Ties in seeding and
/// assignment resolve to the lowest index; an emptied cluster is reseeded
/// on the point farthest from its center.
fn kmeans<R: Rng>(features: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<u32> {
    let n = features.nrows();
    let dim = features.ncols();
    let dist2 = |row: usize, center: &[f64]| -> f64 {
        (0..dim)
            .map(|d| {
                let diff = features[(row, d)] - center[d];
                diff * diff
            })
            .sum()
    };
    let point = |row: usize| -> Vec<f64> { (0..dim).map(|d| features[(row, d)]).collect() };

    let mut centers: Vec<Vec<f64>> = vec![point(rng.random_range(0..n))];
    let mut best = vec![f64::MAX; n];
    while centers.len() < k {
        let latest = centers.last().expect("nonempty");
        for row in 0..n {
            best[row] = best[row].min(dist2(row, latest));
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (row, &d) in best.iter().enumerate() {
                u -= d;
                if u < 0.0 {
                    chosen = row;
                    break;
                }
            }
            chosen
        } else {
            // all points coincide with some center; any index works
            centers.len() % n
        };
        centers.push(point(next));
    }

    let mut labels = vec![0u32; n];
    for _ in 0..100 {
        let mut changed = false;
        for row in 0..n {
            let mut arg = 0usize;
            let mut min = f64::MAX;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(row, center);
                if d < min {
                    min = d;
                    arg = c;
                }
            }
            if labels[row] != arg as u32 {
                labels[row] = arg as u32;
                changed = true;
            }
        }
        // reseed empty clusters on the worst-fit point
        for c in 0..k {
            if !labels.iter().any(|&l| l as usize == c) {
                let mut worst = 0usize;
                let mut max = -1.0;
                for row in 0..n {
                    let d = dist2(row, &centers[labels[row] as usize]);
                    if d > max {
                        max = d;
                        worst = row;
                    }
                }
                centers[c] = point(worst);
                labels[worst] = c as u32;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&r| labels[r] as usize == c).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                center[d] =
                    members.iter().map(|&r| features[(r, d)]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

struct BlockFitInput {
    /// per block pair: flattened per-event activation values, one decay
    /// candidate at a time
    events_of: BTreeMap<(u32, u32), Vec<usize>>,
    pair_counts: BTreeMap<(u32, u32), f64>,
}

fn block_key(labels: &[u32], src: u32, dst: u32) -> (u32, u32) {
    (labels[src as usize], labels[dst as usize])
}

/// Per-event reverse-excitation sums at a single decay, per-pair variant:
/// each event is scored against the opposite direction of its own node
/// pair.
fn chip_activations(data: &EventSequence, decay: f64) -> Vec<f64> {
    let events = data.events();
    let mut g = vec![0.0; data.len()];
    for ((ga, gb), idxs) in data.unordered_pair_groups() {
        let mut fwd = (0.0f64, 0.0f64); // (sum, last_t)
        let mut bwd = (0.0f64, 0.0f64);
        let mut pos = 0usize;
        while pos < idxs.len() {
            let t = events[idxs[pos]].t;
            let mut end = pos;
            while end < idxs.len() && events[idxs[end]].t == t {
                end += 1;
            }
            fwd.0 *= (-(t - fwd.1) / decay).exp();
            fwd.1 = t;
            bwd.0 *= (-(t - bwd.1) / decay).exp();
            bwd.1 = t;
            for &gi in &idxs[pos..end] {
                let ev = &events[gi];
                let forward = ev.src == ga && ev.dst == gb;
                g[gi] = if forward { bwd.0 } else { fwd.0 };
            }
            for &gi in &idxs[pos..end] {
                let ev = &events[gi];
                if ev.src == ga && ev.dst == gb {
                    fwd.0 += 1.0;
                } else {
                    bwd.0 += 1.0;
                }
            }
            pos = end;
        }
    }
    g
}

/// Per-event excitation sums at a single decay, pooled variant: each
/// event is scored against the pooled history of the mirrored block pair.
fn sbm_activations(data: &EventSequence, labels: &[u32], decay: f64) -> Vec<f64> {
    let events = data.events();
    let mut g = vec![0.0; data.len()];
    let mut sums: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
    let mut pos = 0usize;
    while pos < events.len() {
        let t = events[pos].t;
        let mut end = pos;
        while end < events.len() && events[end].t == t {
            end += 1;
        }
        for s in sums.values_mut() {
            s.0 *= (-(t - s.1) / decay).exp();
            s.1 = t;
        }
        for (gi, ev) in events.iter().enumerate().take(end).skip(pos) {
            let (a, b) = block_key(labels, ev.src, ev.dst);
            g[gi] = sums.get(&(b, a)).map(|s| s.0).unwrap_or(0.0);
        }
        for ev in &events[pos..end] {
            let key = block_key(labels, ev.src, ev.dst);
            let s = sums.entry(key).or_insert((0.0, t));
            s.0 += 1.0;
        }
        pos = end;
    }
    g
}

/// Fits one block pair (or the global pool) by profiling the decay grid;
/// `base_exposure` is `#pairs·T` for the per-pair variant and `T` for the
/// pooled one. Returns `(φ, α, decay, log_likelihood)`.
fn fit_block_rates(
    event_idxs: &[usize],
    exciter_idxs: &[usize],
    activations_per_decay: &[(f64, Vec<f64>)],
    tails_per_decay: &[Vec<f64>],
    base_exposure: f64,
) -> Result<(f64, f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for ((decay, acts), tails) in activations_per_decay.iter().zip(tails_per_decay) {
        let g: Vec<f64> = event_idxs.iter().map(|&i| acts[i]).collect();
        let mass: f64 = exciter_idxs.iter().map(|&j| tails[j]).sum();
        let design = LinearHawkesDesign {
            g,
            b: 1,
            kernel_mass: vec![mass],
            base_exposure,
            n: event_idxs.len(),
        };
        let fit = maximize(&design, 1e-6)?;
        let better = match &best {
            Some((_, _, _, ll)) => fit.log_likelihood > *ll,
            None => true,
        };
        if better {
            best = Some((fit.phi, fit.weights[0], *decay, fit.log_likelihood));
        }
    }
    best.ok_or_else(|| Error::domain("empty decay grid"))
}

/// Spectral labels, then per-ordered-block-pair exponential MLE. A block
/// pair without any ordered node pairs or without events falls back to
/// the global single-block fit.
pub fn fit_blockmodels(
    data: &EventSequence,
    graph: &AggregatedGraph,
    k: usize,
    horizon: f64,
    variant: BlockVariant,
    seed: u64,
) -> Result<BlockModelParams> {
    if k == 0 {
        return Err(Error::domain("need at least one block"));
    }
    if !(horizon > 0.0) {
        return Err(Error::domain(format!(
            "rate window must be positive, got {horizon}"
        )));
    }
    if data.is_empty() {
        return Err(Error::data(
            "cannot fit block rates without any training events",
        ));
    }
    if graph.node_count() != data.node_count() {
        return Err(Error::domain(format!(
            "graph covers {} nodes but the data has {}",
            graph.node_count(),
            data.node_count()
        )));
    }
    let labels = spectral_labels(graph, k, seed)?;
    let v = data.node_count() as usize;

    let grid = decay_grid();
    let activations: Vec<(f64, Vec<f64>)> = grid
        .iter()
        .map(|&w| {
            let acts = match variant {
                BlockVariant::Chip => chip_activations(data, w),
                BlockVariant::HawkesSbm => sbm_activations(data, &labels, w),
            };
            (w, acts)
        })
        .collect();
    let tails: Vec<Vec<f64>> = grid
        .iter()
        .map(|&w| {
            data.events()
                .iter()
                .map(|ev| w * (1.0 - (-(horizon - ev.t) / w).exp()))
                .collect()
        })
        .collect();

    let input = {
        let mut events_of: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, ev) in data.events().iter().enumerate() {
            events_of
                .entry(block_key(&labels, ev.src, ev.dst))
                .or_default()
                .push(i);
        }
        let mut pair_counts = BTreeMap::new();
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        for a in 0..k as u32 {
            for b in 0..k as u32 {
                let na = sizes[a as usize];
                let nb = sizes[b as usize];
                let p = if a == b {
                    na * na.saturating_sub(1)
                } else {
                    na * nb
                };
                pair_counts.insert((a, b), p as f64);
            }
        }
        BlockFitInput {
            events_of,
            pair_counts,
        }
    };

    // global single-block fit as the fallback for degenerate blocks
    let all_idxs: Vec<usize> = (0..data.len()).collect();
    let global_exposure = match variant {
        BlockVariant::Chip => (v * (v - 1)) as f64 * horizon,
        BlockVariant::HawkesSbm => horizon,
    };
    let global_acts: Vec<(f64, Vec<f64>)> = match variant {
        BlockVariant::Chip => activations.clone(),
        // the pooled global process is excited by its own whole history
        BlockVariant::HawkesSbm => grid
            .iter()
            .map(|&w| (w, sbm_activations(data, &vec![0; v], w)))
            .collect(),
    };
    let (g_phi, g_alpha, g_decay, _) =
        fit_block_rates(&all_idxs, &all_idxs, &global_acts, &tails, global_exposure)?;

    let mut phi = DMatrix::from_element(k, k, g_phi);
    let mut alpha = DMatrix::from_element(k, k, g_alpha);
    let mut decay = DMatrix::from_element(k, k, g_decay);
    let empty: Vec<usize> = Vec::new();
    for a in 0..k as u32 {
        for b in 0..k as u32 {
            let pairs = input.pair_counts[&(a, b)];
            let idxs = input.events_of.get(&(a, b)).unwrap_or(&empty);
            if pairs == 0.0 || idxs.is_empty() {
                continue; // fallback stands
            }
            let exciters = input.events_of.get(&(b, a)).unwrap_or(&empty);
            let exposure = match variant {
                BlockVariant::Chip => pairs * horizon,
                BlockVariant::HawkesSbm => horizon,
            };
            let (p, al, w, _) =
                fit_block_rates(idxs, exciters, &activations, &tails, exposure)?;
            let (ai, bi) = (a as usize, b as usize);
            phi[(ai, bi)] = p;
            alpha[(ai, bi)] = al;
            decay[(ai, bi)] = w;
        }
    }

    Ok(BlockModelParams {
        variant,
        labels,
        k,
        phi,
        alpha,
        decay,
    })
}
