//! Temporal link prediction: chronological train/test splits, closed-form
//! window probabilities under a frozen history, and ranking metrics.
//!
//! Every model is reduced to one interface: the expected number of events
//! it assigns to an ordered pair over a prediction window opening where
//! the training data ends, with the history frozen at that instant.
//! Events the window itself would produce do not feed back into the
//! intensity, so each probability is the conservative closed form
//! `1 - exp(-mass)`. AUC-ROC and AUC-PR then compare those scores against
//! the pairs that actually interacted inside the window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::Serialize;

use crate::baselines::{
    basis_integrals, fit_blockmodels, fit_mhp, fit_pp, BlockModelParams, BlockVariant, MhpFit,
    PoissonRates, BASIS_COUNT,
};
use crate::em::{fit_em, EmOptions, INITIAL_ALPHA};
use crate::error::{Error, Result};
use crate::events::{DirectedPairHistory, EventSequence, LatentAssignment};
use crate::hgap::{fit_map, AggregatedGraph};
use crate::par;
use crate::params::{CovariateMatrix, HawkesParams};
use crate::rng::{stream, streams};

pub const DEFAULT_WINDOW: f64 = 50.0;
pub const DEFAULT_TRAIN_FRACTIONS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// A train/test protocol: keep the first `train_fraction` of the events
/// (by count) for fitting and predict over `[t_split, t_split + window)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub window: f64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, window: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::domain(format!(
                "train fraction must lie strictly between 0 and 1, got {train_fraction}"
            )));
        }
        if !window.is_finite() || window <= 0.0 {
            return Err(Error::domain(format!(
                "prediction window must be positive and finite, got {window}"
            )));
        }
        Ok(SplitSpec {
            train_fraction,
            window,
        })
    }

    pub fn split(&self, data: &EventSequence) -> Result<(EventSequence, EventSequence, f64)> {
        chronological_split(data, self.train_fraction)
    }

    /// True when the window reaches past the recorded horizon, so part
    /// of the prediction interval was never observed.
    pub fn extrapolates(&self, t_split: f64, horizon: f64) -> bool {
        t_split + self.window > horizon
    }
}

/// Splits off the first `ceil(fraction * N)` events as training data.
/// The train sequence's window ends at its last event time (returned as
/// `t_split`); the test sequence keeps the original horizon.
pub fn chronological_split(
    data: &EventSequence,
    train_fraction: f64,
) -> Result<(EventSequence, EventSequence, f64)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    if data.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 events to split, got {}",
            data.len()
        )));
    }
    let n = (train_fraction * data.len() as f64).ceil() as usize;
    let n = n.clamp(1, data.len());
    let (train, test) = data.split_at_count(n)?;
    let t_split = train.horizon();
    Ok((train, test, t_split))
}

/// Ordered pairs with at least one event in `[t, t + window)`.
pub fn positive_pairs(test: &EventSequence, t: f64, window: f64) -> BTreeSet<(u32, u32)> {
    test.events()
        .iter()
        .filter(|e| e.t >= t && e.t < t + window)
        .map(|e| (e.src, e.dst))
        .collect()
}

/// A fitted model queried for its expected event count on an ordered
/// pair over a window. The history is frozen at the time the predictor
/// was built; the window slides forward from there.
pub trait LinkPredictor: Sync {
    fn window_mass(&self, u: u32, v: u32, window: f64) -> f64;
}

/// Probability of at least one event: `1 - exp(-mass)`. Small negative
/// masses from float cancellation are treated as zero; non-finite masses
/// propagate so the caller can reject them.
pub fn link_probability(
    model: &(impl LinkPredictor + ?Sized),
    u: u32,
    v: u32,
    window: f64,
) -> f64 {
    let mass = model.window_mass(u, v, window);
    let mass = if mass < 0.0 { 0.0 } else { mass };
    -(-mass).exp_m1()
}

/// Homogeneous rates: mass is linear in the window.
pub struct PoissonPredictor {
    rates: PoissonRates,
}

impl PoissonPredictor {
    pub fn new(rates: PoissonRates) -> Self {
        PoissonPredictor { rates }
    }
}

impl LinkPredictor for PoissonPredictor {
    fn window_mass(&self, u: u32, v: u32, window: f64) -> f64 {
        self.rates.rate(u, v) * window
    }
}

/// Shared-kernel model: the window mass integrates every bank kernel
/// from each opposite-direction training event.
pub struct MhpPredictor {
    fit: MhpFit,
    t: f64,
    history: BTreeMap<(u32, u32), Vec<f64>>,
}

impl MhpPredictor {
    pub fn new(fit: MhpFit, train: &EventSequence, t: f64) -> Result<Self> {
        if t < train.horizon() {
            return Err(Error::domain(format!(
                "prediction time {t} precedes the end of the training window {}",
                train.horizon()
            )));
        }
        let mut history: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
        for e in train.events() {
            history.entry((e.src, e.dst)).or_default().push(e.t);
        }
        Ok(MhpPredictor { fit, t, history })
    }
}

impl LinkPredictor for MhpPredictor {
    fn window_mass(&self, u: u32, v: u32, window: f64) -> f64 {
        let mut mass = self.fit.phi * window;
        if let Some(times) = self.history.get(&(v, u)) {
            for &tj in times {
                let lo = basis_integrals(self.t - tj);
                let hi = basis_integrals(self.t - tj + window);
                for b in 0..BASIS_COUNT {
                    mass += self.fit.beta[b] * (hi[b] - lo[b]);
                }
            }
        }
        mass
    }
}

/// Block-shared rates. Per-pair variant: each pair is excited by its own
/// reverse history. Pooled variant: one process per ordered block pair,
/// excited by the mirrored block pair's pooled history, with the mass
/// spread uniformly over the block's pairs.
pub struct BlockPredictor {
    params: BlockModelParams,
    /// Decayed exponential sums at the freeze time, keyed by directed
    /// node pair (per-pair variant) or by the events' block pair (pooled
    /// variant). Each sum is evaluated with the decay of the process it
    /// excites, which is the mirrored key.
    sums: BTreeMap<(u32, u32), f64>,
}

impl BlockPredictor {
    pub fn new(params: BlockModelParams, train: &EventSequence, t: f64) -> Result<Self> {
        if t < train.horizon() {
            return Err(Error::domain(format!(
                "prediction time {t} precedes the end of the training window {}",
                train.horizon()
            )));
        }
        if params.labels.len() < train.node_count() as usize {
            return Err(Error::domain(format!(
                "the block labels cover {} nodes but the data mentions {}",
                params.labels.len(),
                train.node_count()
            )));
        }
        let mut sums: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for e in train.events() {
            let a = params.labels[e.src as usize];
            let b = params.labels[e.dst as usize];
            let decay = params.decay[(b as usize, a as usize)];
            let key = match params.variant {
                BlockVariant::Chip => (e.src, e.dst),
                BlockVariant::HawkesSbm => (a, b),
            };
            *sums.entry(key).or_insert(0.0) += (-(t - e.t) / decay).exp();
        }
        Ok(BlockPredictor { params, sums })
    }
}

impl LinkPredictor for BlockPredictor {
    fn window_mass(&self, u: u32, v: u32, window: f64) -> f64 {
        let a = self.params.labels[u as usize];
        let b = self.params.labels[v as usize];
        let (ai, bi) = (a as usize, b as usize);
        let decay = self.params.decay[(ai, bi)];
        let key = match self.params.variant {
            BlockVariant::Chip => (v, u),
            BlockVariant::HawkesSbm => (b, a),
        };
        let s = self.sums.get(&key).copied().unwrap_or(0.0);
        let tail = decay * (-(-window / decay).exp_m1());
        let mass = self.params.phi[(ai, bi)] * window + self.params.alpha[(ai, bi)] * tail * s;
        match self.params.variant {
            BlockVariant::Chip => mass,
            BlockVariant::HawkesSbm => mass / self.params.pair_count(ai, bi).max(1) as f64,
        }
    }
}

/// Pattern-factorized model. The exogenous part is linear in the window;
/// the endogenous part collapses, per pair, to one scalar (the
/// alpha-weighted decayed pattern sums at the freeze time) times the
/// kernel tail `delta * (1 - exp(-window / delta))`.
pub struct HawkesEpmPredictor {
    params: HawkesParams,
    covs: CovariateMatrix,
    endo: BTreeMap<(u32, u32), f64>,
}

impl HawkesEpmPredictor {
    pub fn new(
        mut params: HawkesParams,
        train: &EventSequence,
        tags: &LatentAssignment,
        covs: &CovariateMatrix,
        t: f64,
    ) -> Result<Self> {
        if t < train.horizon() {
            return Err(Error::domain(format!(
                "prediction time {t} precedes the end of the training window {}",
                train.horizon()
            )));
        }
        if train.node_count() > params.node_count() {
            return Err(Error::domain(format!(
                "data mentions {} nodes but the model has {}",
                train.node_count(),
                params.node_count()
            )));
        }
        let k = params.k();
        let kk = k * k;
        let hist = DirectedPairHistory::build(train, k, Some(tags))?;
        params.set_mu_fallback_horizon(train.horizon());
        let delta = params.delta();
        let mut endo = BTreeMap::new();
        for (&(src, dst), ev) in hist.pairs() {
            let mut g = vec![0.0; kk];
            for (j, &tj) in ev.times.iter().enumerate() {
                let decay = (-(t - tj) / delta).exp();
                for (gc, wc) in g.iter_mut().zip(&ev.weights[j * kk..(j + 1) * kk]) {
                    *gc += wc * decay;
                }
            }
            let mut total = 0.0;
            for a in 0..k {
                for b in 0..k {
                    total += params.alpha_at(a, b) * g[b * k + a];
                }
            }
            if total > 0.0 {
                endo.insert((dst, src), total);
            }
        }
        Ok(HawkesEpmPredictor {
            params,
            covs: covs.clone(),
            endo,
        })
    }
}

impl LinkPredictor for HawkesEpmPredictor {
    fn window_mass(&self, u: u32, v: u32, window: f64) -> f64 {
        let mu = self.params.pair_base_rate(u, v, self.covs.get(u, v));
        let delta = self.params.delta();
        let tail = delta * (-(-window / delta).exp_m1());
        mu * window + self.endo.get(&(u, v)).copied().unwrap_or(0.0) * tail
    }
}

/// One scored ordered pair: the predicted probability of an interaction
/// inside the window, and whether one actually happened.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairPrediction {
    pub src: u32,
    pub dst: u32,
    pub probability: f64,
    pub label: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictionTable {
    pub rows: Vec<PairPrediction>,
}

/// Scores every ordered pair `(u, v)`, `u != v`, in lexicographic order.
pub fn score_all_pairs(
    model: &(impl LinkPredictor + ?Sized),
    node_count: u32,
    window: f64,
    positives: &BTreeSet<(u32, u32)>,
    sequential: bool,
) -> Result<PredictionTable> {
    if !window.is_finite() || window <= 0.0 {
        return Err(Error::domain(format!(
            "prediction window must be positive and finite, got {window}"
        )));
    }
    let mut pairs = Vec::with_capacity((node_count as usize) * (node_count as usize - 1));
    for u in 0..node_count {
        for v in 0..node_count {
            if u != v {
                pairs.push((u, v));
            }
        }
    }
    let probs = par::map_items(sequential, &pairs, |&(u, v)| {
        link_probability(model, u, v, window)
    });
    let mut rows = Vec::with_capacity(pairs.len());
    for (&(u, v), &p) in pairs.iter().zip(&probs) {
        if !p.is_finite() {
            return Err(Error::numerical(format!(
                "predicted probability for pair ({u}, {v}) is {p}"
            )));
        }
        rows.push(PairPrediction {
            src: u,
            dst: v,
            probability: p,
            label: positives.contains(&(u, v)),
        });
    }
    Ok(PredictionTable { rows })
}

fn check_scores(table: &PredictionTable) -> Result<()> {
    for r in &table.rows {
        if !r.probability.is_finite() {
            return Err(Error::data(format!(
                "score for pair ({}, {}) is {}; ranking is undefined",
                r.src, r.dst, r.probability
            )));
        }
    }
    Ok(())
}

/// Indices sorted ascending by score; ties keep index order.
fn sorted_by_score(table: &PredictionTable) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..table.rows.len()).collect();
    idx.sort_by(|&a, &b| {
        table.rows[a]
            .probability
            .total_cmp(&table.rows[b].probability)
    });
    idx
}

/// Rank statistic: the chance a random positive outranks a random
/// negative, with tied scores counted half. Needs both label classes.
pub fn auc_roc(table: &PredictionTable) -> Result<f64> {
    check_scores(table)?;
    let rows = &table.rows;
    let pos = rows.iter().filter(|r| r.label).count();
    let neg = rows.len() - pos;
    if pos == 0 {
        return Err(Error::data(
            "no positive labels; AUC-ROC is undefined".to_string(),
        ));
    }
    if neg == 0 {
        return Err(Error::data(
            "no negative labels; AUC-ROC is undefined".to_string(),
        ));
    }
    let idx = sorted_by_score(table);
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < rows.len() {
        let mut j = i + 1;
        while j < rows.len() && rows[idx[j]].probability == rows[idx[i]].probability {
            j += 1;
        }
        // ranks are 1-based; a tie group spanning i..j shares the mean rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let group_pos = idx[i..j].iter().filter(|&&r| rows[r].label).count();
        rank_sum_pos += avg_rank * group_pos as f64;
        i = j;
    }
    let pos_f = pos as f64;
    let u = rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0;
    Ok(u / (pos_f * neg as f64))
}

/// Area under precision-recall, stepping through thresholds from the top
/// score down: each new slab of recall gets the precision at the
/// threshold that produced it. Tied scores enter as one block. Needs at
/// least one positive label.
pub fn auc_pr(table: &PredictionTable) -> Result<f64> {
    check_scores(table)?;
    let rows = &table.rows;
    let pos = rows.iter().filter(|r| r.label).count();
    if pos == 0 {
        return Err(Error::data(
            "no positive labels; AUC-PR is undefined".to_string(),
        ));
    }
    let mut idx = sorted_by_score(table);
    idx.reverse();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < rows.len() {
        let mut j = i + 1;
        while j < rows.len() && rows[idx[j]].probability == rows[idx[i]].probability {
            j += 1;
        }
        for &r in &idx[i..j] {
            if rows[r].label {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ModelKind {
    Pp,
    Mhp,
    Chip,
    HawkesSbm,
    HawkesEpm,
}

impl ModelKind {
    pub fn all() -> [ModelKind; 5] {
        [
            ModelKind::Pp,
            ModelKind::Mhp,
            ModelKind::Chip,
            ModelKind::HawkesSbm,
            ModelKind::HawkesEpm,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Pp => "pp",
            ModelKind::Mhp => "mhp",
            ModelKind::Chip => "chip",
            ModelKind::HawkesSbm => "hawkes-sbm",
            ModelKind::HawkesEpm => "hawkes-epm",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        ModelKind::all()
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                Error::domain(format!(
                    "unknown model '{s}'; expected pp, mhp, chip, hawkes-sbm, or hawkes-epm"
                ))
            })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Settings for fitting the pattern-factorized model inside the harness:
/// a community fit on the aggregated training graph feeds the EM stage.
#[derive(Clone, Debug)]
pub struct EpmFitConfig {
    pub k_max: usize,
    pub sweeps: usize,
    pub delta: f64,
    pub tau: f64,
    /// Shared prior variance for every covariate weight.
    pub nu: f64,
    pub em: EmOptions,
}

impl Default for EpmFitConfig {
    fn default() -> Self {
        EpmFitConfig {
            k_max: 100,
            sweeps: 10_000,
            delta: 0.1,
            tau: 1.0,
            nu: 1.0,
            em: EmOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub train_fractions: Vec<f64>,
    pub window: f64,
    /// Cluster count for the block-shared baselines.
    pub blocks: usize,
    pub epm: EpmFitConfig,
    pub seed: u64,
    /// Keep the per-pair score tables for the JSON dump.
    pub keep_scores: bool,
    pub sequential: bool,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            models: ModelKind::all().to_vec(),
            train_fractions: DEFAULT_TRAIN_FRACTIONS.to_vec(),
            window: DEFAULT_WINDOW,
            blocks: 3,
            epm: EpmFitConfig::default(),
            seed,
            keep_scores: false,
            sequential: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellMetrics {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub fit_seconds: f64,
    pub scores: Option<PredictionTable>,
}

/// One (model, train fraction) cell. Failures are recorded, not fatal.
#[derive(Clone, Debug)]
pub struct CellReport {
    pub model: ModelKind,
    pub train_fraction: f64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub window: f64,
    pub seed: u64,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    /// One row per cell. Failed cells keep their model and fraction with
    /// empty metric fields. Timings are the only nondeterministic column,
    /// so reproducibility checks pass `include_timings = false`.
    pub fn to_csv(&self, include_timings: bool) -> String {
        let mut out = String::from("model,p,auc_roc,auc_pr,fit_seconds\n");
        for cell in &self.cells {
            let model = cell.model.label();
            let p = cell.train_fraction;
            match &cell.outcome {
                Ok(m) => {
                    let timing = if include_timings {
                        format!("{:.3}", m.fit_seconds)
                    } else {
                        String::new()
                    };
                    let _ = writeln!(out, "{model},{p},{},{},{timing}", m.auc_roc, m.auc_pr);
                }
                Err(_) => {
                    let _ = writeln!(out, "{model},{p},,,");
                }
            }
        }
        out
    }

    /// Per-pair score dumps for the cells that kept them.
    pub fn scores_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            model: &'static str,
            p: f64,
            rows: &'a [PairPrediction],
        }
        let dumps: Vec<Dump> = self
            .cells
            .iter()
            .filter_map(|c| {
                let metrics = c.outcome.as_ref().ok()?;
                let table = metrics.scores.as_ref()?;
                Some(Dump {
                    model: c.model.label(),
                    p: c.train_fraction,
                    rows: &table.rows,
                })
            })
            .collect();
        serde_json::to_string_pretty(&dumps)
            .map_err(|e| Error::data(format!("could not encode scores: {e}")))
    }
}

fn fit_predictor(
    model: ModelKind,
    train: &EventSequence,
    covs: &CovariateMatrix,
    t: f64,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Box<dyn LinkPredictor>> {
    match model {
        ModelKind::Pp => {
            let rates = fit_pp(train, train.horizon())?;
            Ok(Box::new(PoissonPredictor::new(rates)))
        }
        ModelKind::Mhp => {
            let fit = fit_mhp(train, train.horizon())?;
            Ok(Box::new(MhpPredictor::new(fit, train, t)?))
        }
        ModelKind::Chip | ModelKind::HawkesSbm => {
            let variant = if model == ModelKind::Chip {
                BlockVariant::Chip
            } else {
                BlockVariant::HawkesSbm
            };
            let graph = AggregatedGraph::from_events(train);
            let params =
                fit_blockmodels(train, &graph, config.blocks, train.horizon(), variant, seed)?;
            Ok(Box::new(BlockPredictor::new(params, train, t)?))
        }
        ModelKind::HawkesEpm => {
            let graph = AggregatedGraph::from_events(train);
            let static_fit = fit_map(&graph, config.epm.k_max, config.epm.sweeps, seed)?;
            let community = static_fit.community_subset()?;
            let k = community.k();
            let d = covs.d();
            let params = HawkesParams::with_covariates(
                community.phi().clone(),
                community.omega().clone(),
                DMatrix::from_element(k, k, INITIAL_ALPHA),
                config.epm.delta,
                d,
                config.epm.tau,
                vec![config.epm.nu; d],
            )?;
            let state = fit_em(params, train, covs, &config.epm.em)?;
            Ok(Box::new(HawkesEpmPredictor::new(
                state.params,
                train,
                &state.responsibilities,
                covs,
                t,
            )?))
        }
    }
}

fn run_cell(
    data: &EventSequence,
    covs: &CovariateMatrix,
    config: &ExperimentConfig,
    model: ModelKind,
    train_fraction: f64,
    seed: u64,
) -> Result<CellMetrics> {
    let split = SplitSpec::new(train_fraction, config.window)?;
    let (train, test, t_split) = split.split(data)?;
    let started = Instant::now();
    let predictor = fit_predictor(model, &train, covs, t_split, config, seed)?;
    let fit_seconds = started.elapsed().as_secs_f64();
    let positives = positive_pairs(&test, t_split, config.window);
    let table = score_all_pairs(
        predictor.as_ref(),
        data.node_count(),
        config.window,
        &positives,
        config.sequential,
    )?;
    let roc = auc_roc(&table)?;
    let pr = auc_pr(&table)?;
    Ok(CellMetrics {
        auc_roc: roc,
        auc_pr: pr,
        fit_seconds,
        scores: config.keep_scores.then_some(table),
    })
}

/// Fits and scores every (model, train fraction) cell. Each cell draws
/// its own seed from the root seed and the cell index, so the report is
/// reproducible and cells are insensitive to each other's presence...
/// as long as the grid shape is unchanged. A failed cell records its
/// error and the run continues.
pub fn run_experiment(
    data: &EventSequence,
    covs: &CovariateMatrix,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if config.models.is_empty() {
        return Err(Error::domain("no models requested".to_string()));
    }
    if config.train_fractions.is_empty() {
        return Err(Error::domain("no train fractions requested".to_string()));
    }
    if config.blocks == 0 {
        return Err(Error::domain(
            "the block baselines need at least one cluster".to_string(),
        ));
    }
    for &p in &config.train_fractions {
        SplitSpec::new(p, config.window)?;
    }
    if data.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 events to run the experiment, got {}",
            data.len()
        )));
    }
    let mut cells = Vec::with_capacity(config.models.len() * config.train_fractions.len());
    for (mi, &model) in config.models.iter().enumerate() {
        for (pi, &p) in config.train_fractions.iter().enumerate() {
            let cell_idx = (mi * config.train_fractions.len() + pi) as u64;
            let cell_seed = stream(config.seed, streams::EVAL_BASE + cell_idx).random::<u64>();
            let outcome =
                run_cell(data, covs, config, model, p, cell_seed).map_err(|e| e.to_string());
            cells.push(CellReport {
                model,
                train_fraction: p,
                outcome,
            });
        }
    }
    Ok(ExperimentReport {
        window: config.window,
        seed: config.seed,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use crate::intensity::intensity_at;
    use crate::rng::{stream, streams};
    use crate::simulate::{block_communities, simulate};
    use nalgebra::DMatrix;

    struct FlatModel(f64);

    impl LinkPredictor for FlatModel {
        fn window_mass(&self, _u: u32, _v: u32, window: f64) -> f64 {
            self.0 * window
        }
    }

    fn table(scores: &[f64], labels: &[bool]) -> PredictionTable {
        let rows = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&s, &l))| PairPrediction {
                src: i as u32,
                dst: (i + 1) as u32,
                probability: s,
                label: l,
            })
            .collect();
        PredictionTable { rows }
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut acc = f(a) + f(b);
        for i in 1..panels {
            let w = if i % 2 == 0 { 2.0 } else { 4.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn toy_sequence() -> EventSequence {
        let events = vec![
            Event {
                t: 0.5,
                src: 0,
                dst: 1,
            },
            Event {
                t: 1.0,
                src: 1,
                dst: 0,
            },
            Event {
                t: 1.5,
                src: 0,
                dst: 2,
            },
            Event {
                t: 2.0,
                src: 2,
                dst: 0,
            },
            Event {
                t: 2.5,
                src: 1,
                dst: 0,
            },
            Event {
                t: 3.0,
                src: 0,
                dst: 1,
            },
            Event {
                t: 3.5,
                src: 2,
                dst: 1,
            },
            Event {
                t: 4.0,
                src: 1,
                dst: 2,
            },
            Event {
                t: 4.5,
                src: 0,
                dst: 2,
            },
            Event {
                t: 5.0,
                src: 2,
                dst: 0,
            },
        ];
        EventSequence::new(events, 6.0, 3).unwrap()
    }

    #[test]
    fn split_counts_follow_the_ceiling() {
        let data = toy_sequence();
        let (train, test, t_split) = chronological_split(&data, 0.5).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(test.len(), 5);
        assert_eq!(t_split, 2.5);
        assert_eq!(train.horizon(), 2.5);
        assert_eq!(test.horizon(), 6.0);

        let (train, test, _) = chronological_split(&data, 0.9).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);

        let (train, test, _) = chronological_split(&data, 0.55).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 4);

        let last_train = train.events().last().unwrap().t;
        let first_test = test.events().first().unwrap().t;
        assert!(last_train <= first_test);

        let one = EventSequence::new(
            vec![Event {
                t: 0.1,
                src: 0,
                dst: 1,
            }],
            1.0,
            2,
        )
        .unwrap();
        assert!(chronological_split(&one, 0.5).is_err());
        assert!(chronological_split(&data, 0.0).is_err());
        assert!(chronological_split(&data, 1.0).is_err());
    }

    #[test]
    fn split_spec_flags_extrapolation() {
        let spec = SplitSpec::new(0.5, 10.0).unwrap();
        assert!(spec.extrapolates(2.5, 6.0));
        let spec = SplitSpec::new(0.5, 1.0).unwrap();
        assert!(!spec.extrapolates(2.5, 6.0));
        assert!(SplitSpec::new(0.5, 0.0).is_err());
        assert!(SplitSpec::new(1.5, 1.0).is_err());
    }

    #[test]
    fn silent_model_scores_zero() {
        let m = FlatModel(0.0);
        assert_eq!(link_probability(&m, 0, 1, 50.0), 0.0);
    }

    #[test]
    fn constant_rate_halves_at_log_two() {
        let window = 50.0;
        let m = FlatModel(std::f64::consts::LN_2 / window);
        let p = link_probability(&m, 0, 1, window);
        assert!((p - 0.5).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn scoring_covers_every_ordered_pair_once() {
        let m = FlatModel(0.1);
        let positives = BTreeSet::from([(0u32, 1u32)]);
        let t = score_all_pairs(&m, 5, 1.0, &positives, true).unwrap();
        assert_eq!(t.rows.len(), 20);
        let keys: BTreeSet<(u32, u32)> = t.rows.iter().map(|r| (r.src, r.dst)).collect();
        assert_eq!(keys.len(), 20);
        assert!(keys.iter().all(|&(u, v)| u != v && u < 5 && v < 5));
        assert!(t.rows.iter().all(|r| (0.0..=1.0).contains(&r.probability)));
        assert_eq!(t.rows.iter().filter(|r| r.label).count(), 1);
        let par = score_all_pairs(&m, 5, 1.0, &positives, false).unwrap();
        for (a, b) in t.rows.iter().zip(&par.rows) {
            assert_eq!(a.probability.to_bits(), b.probability.to_bits());
        }
    }

    #[test]
    fn hand_checked_rank_metrics() {
        let t = table(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]);
        assert_eq!(auc_roc(&t).unwrap(), 0.75);

        let perfect = table(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(auc_roc(&perfect).unwrap(), 1.0);
        assert_eq!(auc_pr(&perfect).unwrap(), 1.0);

        let flat = table(&[0.3; 6], &[true, false, false, true, false, false]);
        assert_eq!(auc_roc(&flat).unwrap(), 0.5);
        // one tie block: recall jumps to 1 at the base precision
        assert!((auc_pr(&flat).unwrap() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_labels_error_by_name() {
        let no_pos = table(&[0.2, 0.1], &[false, false]);
        let err = auc_roc(&no_pos).unwrap_err().to_string();
        assert!(err.contains("no positive labels"), "{err}");
        let err = auc_pr(&no_pos).unwrap_err().to_string();
        assert!(err.contains("no positive labels"), "{err}");

        let no_neg = table(&[0.2, 0.1], &[true, true]);
        let err = auc_roc(&no_neg).unwrap_err().to_string();
        assert!(err.contains("no negative labels"), "{err}");
        assert_eq!(auc_pr(&no_neg).unwrap(), 1.0);
    }

    #[test]
    fn roc_ignores_monotone_score_transforms() {
        let scores = [0.91, 0.05, 0.4, 0.33, 0.7, 0.05, 0.2, 0.85];
        let labels = [true, false, true, false, true, false, false, true];
        let base = auc_roc(&table(&scores, &labels)).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let exped: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        assert_eq!(auc_roc(&table(&cubed, &labels)).unwrap(), base);
        assert_eq!(auc_roc(&table(&exped, &labels)).unwrap(), base);
    }

    #[test]
    fn pattern_model_window_mass_matches_quadrature() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.3, 1.0, 0.5, 0.5]);
        let omega = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.2, 0.3]);
        let alpha = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.2, 1.1]);
        let mut params = HawkesParams::new(phi, omega, alpha, 0.6).unwrap();
        params.insert_mu_block(0, 1, vec![0.05, 0.2, 0.1, 0.15]).unwrap();

        let train = toy_sequence();
        let tags = LatentAssignment::Hard {
            exogenous: vec![true, false, true, false, false, false, true, false, false, false],
            patterns: vec![(0, 0), (1, 0), (0, 1), (1, 1), (0, 0), (1, 0), (0, 1), (1, 1), (0, 0), (1, 1)],
        };
        let t = train.horizon();
        let window = 0.8;
        let predictor =
            HawkesEpmPredictor::new(params.clone(), &train, &tags, &CovariateMatrix::empty(), t)
                .unwrap();

        params.set_mu_fallback_horizon(train.horizon());
        let hist = DirectedPairHistory::build(&train, 2, Some(&tags)).unwrap();
        let covs = CovariateMatrix::empty();
        for u in 0..3u32 {
            for v in 0..3u32 {
                if u == v {
                    continue;
                }
                let mass = predictor.window_mass(u, v, window);
                let quad = simpson(
                    |s| intensity_at(&params, &hist, u, v, s, &covs).unwrap(),
                    t,
                    t + window,
                    4000,
                );
                assert!(
                    (mass - quad).abs() <= 1e-9 * quad.max(1.0),
                    "pair ({u}, {v}): closed {mass} vs quadrature {quad}"
                );
            }
        }
    }

    #[test]
    fn window_probability_grows_with_the_window() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.3, 1.0, 0.5, 0.5]);
        let omega = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.2, 0.3]);
        let alpha = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.2, 1.1]);
        let params = HawkesParams::new(phi, omega, alpha, 0.6).unwrap();
        let train = toy_sequence();
        let tags = LatentAssignment::Hard {
            exogenous: vec![true; 10],
            patterns: vec![(0, 0); 10],
        };
        let predictor = HawkesEpmPredictor::new(
            params,
            &train,
            &tags,
            &CovariateMatrix::empty(),
            train.horizon(),
        )
        .unwrap();
        let mut prev = 0.0;
        for i in 1..40 {
            let w = 0.25 * i as f64;
            let p = link_probability(&predictor, 1, 0, w);
            assert!(p >= prev, "window {w}: {p} < {prev}");
            prev = p;
        }
    }

    #[test]
    fn shared_kernel_window_mass_matches_quadrature() {
        use crate::baselines::basis_kernels;
        let train = toy_sequence();
        let t = train.horizon();
        let fit = MhpFit {
            phi: 0.02,
            beta: [0.3, 0.15, 0.05, 0.2],
            log_likelihood: 0.0,
        };
        let predictor = MhpPredictor::new(fit.clone(), &train, t).unwrap();
        let window = 2.5;
        for (u, v) in [(0u32, 1u32), (1, 0), (2, 0), (1, 2)] {
            let mass = predictor.window_mass(u, v, window);
            let opposite: Vec<f64> = train
                .events()
                .iter()
                .filter(|e| (e.src, e.dst) == (v, u))
                .map(|e| e.t)
                .collect();
            let quad = simpson(
                |s| {
                    let mut lam = fit.phi;
                    for &tj in &opposite {
                        let g = basis_kernels(s - tj);
                        for b in 0..BASIS_COUNT {
                            lam += fit.beta[b] * g[b];
                        }
                    }
                    lam
                },
                t,
                t + window,
                4000,
            );
            assert!(
                (mass - quad).abs() <= 1e-8 * quad.max(1.0),
                "pair ({u}, {v}): closed {mass} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn block_window_masses_match_quadrature_and_pool_split() {
        let train = toy_sequence();
        let t = train.horizon();
        let labels = vec![0u32, 0, 1];
        let phi = DMatrix::from_row_slice(2, 2, &[0.05, 0.02, 0.04, 0.01]);
        let alpha = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.2, 0.5]);
        let decay = DMatrix::from_row_slice(2, 2, &[0.5, 1.5, 0.8, 1.0]);

        let chip = BlockModelParams {
            variant: BlockVariant::Chip,
            labels: labels.clone(),
            k: 2,
            phi: phi.clone(),
            alpha: alpha.clone(),
            decay: decay.clone(),
        };
        let predictor = BlockPredictor::new(chip, &train, t).unwrap();
        let window = 1.7;
        for (u, v) in [(0u32, 1u32), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)] {
            let (a, b) = (labels[u as usize] as usize, labels[v as usize] as usize);
            let w = decay[(a, b)];
            let opposite: Vec<f64> = train
                .events()
                .iter()
                .filter(|e| (e.src, e.dst) == (v, u))
                .map(|e| e.t)
                .collect();
            let mass = predictor.window_mass(u, v, window);
            let quad = simpson(
                |s| {
                    let mut lam = phi[(a, b)];
                    for &tj in &opposite {
                        lam += alpha[(a, b)] * (-(s - tj) / w).exp();
                    }
                    lam
                },
                t,
                t + window,
                4000,
            );
            assert!(
                (mass - quad).abs() <= 1e-9 * quad.max(1.0),
                "pair ({u}, {v}): closed {mass} vs quadrature {quad}"
            );
        }

        let sbm = BlockModelParams {
            variant: BlockVariant::HawkesSbm,
            labels: labels.clone(),
            k: 2,
            phi,
            alpha,
            decay,
        };
        let predictor = BlockPredictor::new(sbm, &train, t).unwrap();
        // block (0, 1) holds pairs (0, 2) and (1, 2): same mass, half the pool each
        let m02 = predictor.window_mass(0, 2, window);
        let m12 = predictor.window_mass(1, 2, window);
        assert_eq!(m02, m12);
        let pooled: Vec<f64> = train
            .events()
            .iter()
            .filter(|e| (labels[e.src as usize], labels[e.dst as usize]) == (1, 0))
            .map(|e| e.t)
            .collect();
        assert!(!pooled.is_empty());
        let w = 1.5; // decay[(0, 1)]
        let expect = (0.02 * window
            + 0.3 * w * (1.0 - (-window / w).exp())
                * pooled
                    .iter()
                    .map(|&tj| (-(t - tj) / w).exp())
                    .sum::<f64>())
            / 2.0;
        assert!((m02 - expect).abs() < 1e-12, "{m02} vs {expect}");
    }

    fn small_scenario(seed: u64) -> EventSequence {
        let v = 12u32;
        let k = 2;
        let communities = block_communities(v, k);
        let phi = DMatrix::from_fn(v as usize, k, |u, c| {
            if communities[u] == c {
                1.0
            } else {
                0.0
            }
        });
        let omega = DMatrix::from_diagonal_element(k, k, 0.25);
        let alpha = DMatrix::from_element(k, k, 0.5);
        let params = HawkesParams::new(phi, omega, alpha, 0.45).unwrap();
        let mut rng = stream(seed, streams::SIMULATE);
        let (data, _) = simulate(&params, &CovariateMatrix::empty(), 40.0, 100_000, &mut rng).unwrap();
        data
    }

    #[test]
    fn experiment_report_is_reproducible() {
        let data = small_scenario(77);
        assert!(data.len() > 100, "scenario too sparse: {}", data.len());
        let mut config = ExperimentConfig::new(9);
        config.models = vec![ModelKind::Pp, ModelKind::Chip, ModelKind::HawkesEpm];
        config.train_fractions = vec![0.6, 0.8];
        config.window = 8.0;
        config.blocks = 2;
        config.epm.k_max = 8;
        config.epm.sweeps = 60;
        config.epm.delta = 0.45;
        config.epm.em.max_iter = 15;
        config.keep_scores = true;

        let a = run_experiment(&data, &CovariateMatrix::empty(), &config).unwrap();
        let b = run_experiment(&data, &CovariateMatrix::empty(), &config).unwrap();
        assert_eq!(a.to_csv(false), b.to_csv(false));
        assert_eq!(a.scores_json().unwrap(), b.scores_json().unwrap());

        assert_eq!(a.cells.len(), 6);
        for cell in &a.cells {
            let m = cell
                .outcome
                .as_ref()
                .unwrap_or_else(|e| panic!("{} at p={} failed: {e}", cell.model, cell.train_fraction));
            assert!((0.0..=1.0).contains(&m.auc_roc));
            assert!((0.0..=1.0).contains(&m.auc_pr));
            assert!(m.scores.as_ref().unwrap().rows.len() == 12 * 11);
        }
        let csv = a.to_csv(false);
        assert!(csv.starts_with("model,p,auc_roc,auc_pr,fit_seconds\n"));
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("hawkes-epm,0.6,"));
    }

    #[test]
    fn failed_cells_are_recorded_and_skipped() {
        let data = small_scenario(78);
        let mut config = ExperimentConfig::new(5);
        config.models = vec![ModelKind::Pp, ModelKind::Chip];
        config.train_fractions = vec![0.7];
        config.window = 8.0;
        config.blocks = 999; // more clusters than nodes
        let report = run_experiment(&data, &CovariateMatrix::empty(), &config).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells[0].outcome.is_ok());
        let err = report.cells[1].outcome.as_ref().unwrap_err();
        assert!(!err.is_empty());
        let csv = report.to_csv(true);
        assert!(csv.lines().nth(2).unwrap().ends_with(",,,"));
    }

    #[test]
    fn model_labels_round_trip() {
        for m in ModelKind::all() {
            assert_eq!(ModelKind::parse(m.label()).unwrap(), m);
        }
        assert!(ModelKind::parse("nope").is_err());
    }
}
