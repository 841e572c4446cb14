//! Command-line pipeline: simulate a scenario, fit the static community
//! structure, fit the dynamics (EM or Gibbs), evaluate link prediction,
//! and score pairs from a checkpoint.
//!
//! Every stage writes into an output directory (flag `--out`, overridden
//! by `HAWKES_EPM_OUT` when set) and appends one line per emitted file
//! to `manifest.tsv` there: file name, SHA-256 of the resolved options,
//! seed. Exit codes: 0 success, 1 usage, 2 bad data, 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hawkes_epm::em::{fit_em, EmOptions, INITIAL_ALPHA};
use hawkes_epm::eval::{
    chronological_split, link_probability, EpmFitConfig, ExperimentConfig, HawkesEpmPredictor,
    ModelKind, SplitSpec, DEFAULT_WINDOW,
};
use hawkes_epm::gibbs::run_chain;
use hawkes_epm::hgap::{fit_map, AggregatedGraph};
use hawkes_epm::io::{
    append_manifest, config_digest, load_checkpoint, load_covariates, load_events,
    save_checkpoint, CommunityCheckpoint, DynamicsCheckpoint, Vocabulary, COMMUNITY_KIND,
    DYNAMICS_KIND,
};
use hawkes_epm::rng::{stream, streams};
use hawkes_epm::simulate::{simulate, ScenarioConfig};
use hawkes_epm::{CovariateMatrix, Error, HawkesParams, Result};
use nalgebra::DMatrix;

const OUT_DIR_ENV: &str = "HAWKES_EPM_OUT";

#[derive(Parser)]
#[command(
    name = "hawkes-epm",
    version,
    about = "Community-structured mutually exciting Hawkes processes for directed interaction events"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic event stream from a scenario file
    Simulate(SimulateArgs),
    /// Fit the community structure on the aggregated interaction graph
    FitStatic(FitStaticArgs),
    /// Fit the dynamics by EM, starting from a static checkpoint
    FitEm(FitEmArgs),
    /// Sample the dynamics posterior, starting from a static checkpoint
    FitGibbs(FitGibbsArgs),
    /// Run the temporal link-prediction experiment grid
    Evaluate(EvaluateArgs),
    /// Score every ordered pair from a fitted dynamics checkpoint
    Predict(PredictArgs),
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Scenario file (TOML, or JSON with --json)
    #[arg(long)]
    scenario: PathBuf,
    /// Parse the scenario file as JSON instead of TOML
    #[arg(long)]
    json: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Root seed; falls back to the scenario's `seed` entry
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct FitStaticArgs {
    /// Event stream CSV with header t,src,dst
    #[arg(long)]
    events: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Community budget for the shrinkage prior
    #[arg(long, default_value_t = 100)]
    k_max: usize,
    /// Gibbs sweeps over the graph
    #[arg(long, default_value_t = 10_000)]
    sweeps: usize,
    /// Observation window end; defaults to the last event time
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args, Serialize)]
struct FitEmArgs {
    #[arg(long)]
    events: PathBuf,
    /// Community checkpoint written by fit-static
    #[arg(long)]
    static_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Kernel decay time
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Relative objective-change stopping threshold; 0 disables
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Pair covariates CSV with header src,dst,x1..
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Covariate noise precision
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Prior variance shared by all covariate weights
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long)]
    horizon: Option<f64>,
    /// Keep the expectation pass on one thread
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Serialize)]
struct FitGibbsArgs {
    #[arg(long)]
    events: PathBuf,
    /// Community checkpoint written by fit-static
    #[arg(long)]
    static_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Kernel decay time
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Covariate noise precision
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Prior variance shared by all covariate weights
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Comma-separated models: pp, mhp, chip, hawkes-sbm, hawkes-epm
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated train fractions in (0, 1)
    #[arg(long, value_delimiter = ',')]
    p_grid: Option<Vec<f64>>,
    /// Prediction window length
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: f64,
    /// Cluster count for the block baselines
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 100)]
    k_max: usize,
    #[arg(long, default_value_t = 10_000)]
    sweeps: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 500)]
    em_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Also write per-pair scores to scores.json
    #[arg(long)]
    dump_scores: bool,
    /// Leave the fit_seconds column empty for byte-stable output
    #[arg(long)]
    omit_timings: bool,
    #[arg(long)]
    horizon: Option<f64>,
    /// Keep pair scoring on one thread
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    /// Training events the checkpoint was fitted on
    #[arg(long)]
    events: PathBuf,
    /// Dynamics checkpoint written by fit-em or fit-gibbs
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prediction window length
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: f64,
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<f64>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::FitStatic(args) => cmd_fit_static(args),
        Command::FitEm(args) => cmd_fit_em(args),
        Command::FitGibbs(args) => cmd_fit_gibbs(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

/// Resolved output location plus the manifest bookkeeping for this run.
struct Outputs {
    dir: PathBuf,
    digest: String,
    seed: u64,
}

impl Outputs {
    fn new(flag_dir: &Path, options: &impl Serialize, seed: u64) -> Result<Self> {
        let dir = match std::env::var_os(OUT_DIR_ENV) {
            Some(d) => PathBuf::from(d),
            None => flag_dir.to_path_buf(),
        };
        fs::create_dir_all(&dir)?;
        let encoded = serde_json::to_vec(options)
            .map_err(|e| Error::data(format!("could not encode options: {e}")))?;
        Ok(Outputs {
            dir,
            digest: config_digest(&encoded),
            seed,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&self, file: &Path) -> Result<()> {
        append_manifest(&self.path("manifest.tsv"), file, &self.digest, self.seed)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text)?;
        self.record(&path)?;
        Ok(path)
    }
}

fn load_events_verbose(path: &Path, horizon: Option<f64>) -> Result<hawkes_epm::io::LoadedEvents> {
    let loaded = load_events(path, horizon)?;
    if loaded.skipped_self_edges > 0 {
        eprintln!(
            "warning: skipped {} self-edge row(s) in {}",
            loaded.skipped_self_edges,
            path.display()
        );
    }
    Ok(loaded)
}

fn load_covariates_opt(path: &Option<PathBuf>, vocab: &Vocabulary) -> Result<CovariateMatrix> {
    match path {
        Some(p) => load_covariates(p, vocab, None),
        None => Ok(CovariateMatrix::empty()),
    }
}

fn warn_if_supercritical(params: &HawkesParams, context: &str) {
    if !params.is_stationary() {
        eprintln!(
            "warning: {context} has a branching ratio at or above one; \
             the process is supercritical and simulations may only stop at the event cap"
        );
    }
}

/// Loads the static checkpoint and restricts it to the communities that
/// stayed active, giving the pattern space for the dynamics stage.
fn community_structure(path: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !path.exists() {
        return Err(Error::StageDependency(format!(
            "no community checkpoint at {}; run fit-static first",
            path.display()
        )));
    }
    let ckpt: CommunityCheckpoint = load_checkpoint(path, COMMUNITY_KIND)?;
    let subset = ckpt.params.restrict(&ckpt.active)?;
    Ok((subset.phi().clone(), subset.omega().clone()))
}

fn dynamics_params(
    phi: DMatrix<f64>,
    omega: DMatrix<f64>,
    delta: f64,
    covs: &CovariateMatrix,
    tau: f64,
    nu: f64,
) -> Result<HawkesParams> {
    let k = omega.nrows();
    let d = covs.d();
    HawkesParams::with_covariates(
        phi,
        omega,
        DMatrix::from_element(k, k, INITIAL_ALPHA),
        delta,
        d,
        tau,
        vec![nu; d],
    )
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.scenario)?;
    let scenario = if args.json {
        ScenarioConfig::from_json_str(&text)?
    } else {
        ScenarioConfig::from_toml_str(&text)?
    };
    let seed = args.seed.or(scenario.seed).ok_or_else(|| {
        Error::domain("a seed is required: pass --seed or put one in the scenario file")
    })?;
    let out = Outputs::new(&args.out, &args, seed)?;

    let mut rng = stream(seed, streams::SIMULATE);
    let (params, _) = scenario.build(&mut rng)?;
    warn_if_supercritical(&params, "the scenario");
    let (data, tags) = simulate(
        &params,
        &CovariateMatrix::empty(),
        scenario.horizon,
        scenario.event_cap(),
        &mut rng,
    )?;

    let vocab = Vocabulary::identity(data.node_count());
    let events_path = out.path("events.csv");
    hawkes_epm::io::write_events(&events_path, &data, &vocab)?;
    out.record(&events_path)?;
    let vocab_path = out.path("vocabulary.json");
    vocab.save(&vocab_path)?;
    out.record(&vocab_path)?;

    let truth = DynamicsCheckpoint {
        params,
        assignment: tags,
        trace: Vec::new(),
        seed,
    };
    let truth_path = out.path("truth.json");
    save_checkpoint(&truth_path, DYNAMICS_KIND, &truth)?;
    out.record(&truth_path)?;

    println!(
        "wrote {} events on {} nodes to {}",
        data.len(),
        data.node_count(),
        events_path.display()
    );
    Ok(())
}

fn cmd_fit_static(args: FitStaticArgs) -> Result<()> {
    let out = Outputs::new(&args.out, &args, args.seed)?;
    let loaded = load_events_verbose(&args.events, args.horizon)?;
    let graph = AggregatedGraph::from_events(&loaded.data);
    let fit = fit_map(&graph, args.k_max, args.sweeps, args.seed)?;
    if fit.degenerate {
        eprintln!("warning: the graph has no edges; the checkpoint holds prior means");
    }

    let mut trace = String::from("sweep,log_joint\n");
    for (i, lj) in fit.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{lj}");
    }
    out.write_text("trace-static.csv", &trace)?;

    let ckpt = CommunityCheckpoint {
        params: fit.params,
        active: fit.active,
        log_joint: fit.log_joint,
        seed: args.seed,
    };
    let path = out.path("static.json");
    save_checkpoint(&path, COMMUNITY_KIND, &ckpt)?;
    out.record(&path)?;
    println!(
        "kept {} active communities (log joint {:.3}) in {}",
        ckpt.active.len(),
        ckpt.log_joint,
        path.display()
    );
    Ok(())
}

fn cmd_fit_em(args: FitEmArgs) -> Result<()> {
    let out = Outputs::new(&args.out, &args, 0)?;
    let loaded = load_events_verbose(&args.events, args.horizon)?;
    let covs = load_covariates_opt(&args.covariates, &loaded.vocab)?;
    let (phi, omega) = community_structure(&args.static_checkpoint)?;
    if phi.nrows() < loaded.data.node_count() as usize {
        return Err(Error::data(format!(
            "the static checkpoint covers {} nodes but the data mentions {}",
            phi.nrows(),
            loaded.data.node_count()
        )));
    }
    let params = dynamics_params(phi, omega, args.delta, &covs, args.tau, args.nu)?;
    let opts = EmOptions {
        max_iter: args.iters,
        tol: args.tol,
        sequential: args.sequential,
    };
    let state = fit_em(params, &loaded.data, &covs, &opts)?;
    warn_if_supercritical(&state.params, "the fitted model");

    let mut trace = String::from("iter,log_posterior\n");
    for (i, obj) in state.objective_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{obj}");
    }
    out.write_text("trace-em.csv", &trace)?;

    let ckpt = DynamicsCheckpoint {
        params: state.params,
        assignment: state.responsibilities,
        trace: state.objective_trace,
        seed: 0,
    };
    let path = out.path("dynamics.json");
    save_checkpoint(&path, DYNAMICS_KIND, &ckpt)?;
    out.record(&path)?;
    println!(
        "EM stopped after {} iterations (objective {:.3}) in {}",
        ckpt.trace.len(),
        ckpt.trace.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_fit_gibbs(args: FitGibbsArgs) -> Result<()> {
    let out = Outputs::new(&args.out, &args, args.seed)?;
    let loaded = load_events_verbose(&args.events, args.horizon)?;
    let covs = load_covariates_opt(&args.covariates, &loaded.vocab)?;
    let (phi, omega) = community_structure(&args.static_checkpoint)?;
    if phi.nrows() != loaded.data.node_count() as usize {
        return Err(Error::data(format!(
            "the static checkpoint covers {} nodes but the data mentions {}",
            phi.nrows(),
            loaded.data.node_count()
        )));
    }
    let params = dynamics_params(phi, omega, args.delta, &covs, args.tau, args.nu)?;
    let run = run_chain(params, &loaded.data, &covs, args.iters, args.seed)?;
    warn_if_supercritical(&run.state.params, "the final sampled state");

    let k = run.state.params.k();
    let mut trace = String::from("iter,log_posterior,stored_mu_total");
    for a in 0..k {
        for b in 0..k {
            let _ = write!(trace, ",alpha_{a}_{b}");
        }
    }
    trace.push('\n');
    for (i, rec) in run.records.iter().enumerate() {
        let _ = write!(trace, "{i},{},{}", rec.log_posterior, rec.stored_mu_total);
        for a in &rec.alpha {
            let _ = write!(trace, ",{a}");
        }
        trace.push('\n');
    }
    out.write_text("trace-gibbs.csv", &trace)?;

    let log_trace = run.records.iter().map(|r| r.log_posterior).collect();
    let ckpt = DynamicsCheckpoint {
        params: run.state.params,
        assignment: run.state.assignment,
        trace: log_trace,
        seed: args.seed,
    };
    let path = out.path("dynamics.json");
    save_checkpoint(&path, DYNAMICS_KIND, &ckpt)?;
    out.record(&path)?;
    println!(
        "sampled {} iterations (final log posterior {:.3}) in {}",
        ckpt.trace.len(),
        ckpt.trace.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let out = Outputs::new(&args.out, &args, args.seed)?;
    let loaded = load_events_verbose(&args.events, args.horizon)?;
    let covs = load_covariates_opt(&args.covariates, &loaded.vocab)?;

    let mut config = ExperimentConfig::new(args.seed);
    if let Some(names) = &args.models {
        config.models = names
            .iter()
            .map(|n| ModelKind::parse(n))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(grid) = &args.p_grid {
        config.train_fractions = grid.clone();
    }
    config.window = args.window;
    config.blocks = args.blocks;
    config.epm = EpmFitConfig {
        k_max: args.k_max,
        sweeps: args.sweeps,
        delta: args.delta,
        tau: 1.0,
        nu: 1.0,
        em: EmOptions {
            max_iter: args.em_iters,
            tol: args.em_tol,
            sequential: args.sequential,
        },
    };
    config.keep_scores = args.dump_scores;
    config.sequential = args.sequential;

    for &p in &config.train_fractions {
        let spec = SplitSpec::new(p, config.window)?;
        if let Ok((_, _, t_split)) = chronological_split(&loaded.data, p) {
            if spec.extrapolates(t_split, loaded.data.horizon()) {
                eprintln!(
                    "note: at p={p} the window [{t_split}, {}) reaches past the data horizon {}",
                    t_split + config.window,
                    loaded.data.horizon()
                );
            }
        }
    }

    let report = hawkes_epm::eval::run_experiment(&loaded.data, &covs, &config)?;
    for cell in &report.cells {
        if let Err(e) = &cell.outcome {
            eprintln!(
                "warning: {} at p={} failed: {e}",
                cell.model, cell.train_fraction
            );
        }
    }
    out.write_text("metrics.csv", &report.to_csv(!args.omit_timings))?;
    if args.dump_scores {
        out.write_text("scores.json", &report.scores_json()?)?;
    }
    let ok = report.cells.iter().filter(|c| c.outcome.is_ok()).count();
    println!(
        "evaluated {ok}/{} cells into {}",
        report.cells.len(),
        out.path("metrics.csv").display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let out = Outputs::new(&args.out, &args, 0)?;
    let loaded = load_events_verbose(&args.events, args.horizon)?;
    let covs = load_covariates_opt(&args.covariates, &loaded.vocab)?;
    if !args.checkpoint.exists() {
        return Err(Error::StageDependency(format!(
            "no dynamics checkpoint at {}; run fit-em or fit-gibbs first",
            args.checkpoint.display()
        )));
    }
    let ckpt: DynamicsCheckpoint = load_checkpoint(&args.checkpoint, DYNAMICS_KIND)?;
    if !(args.window > 0.0) || !args.window.is_finite() {
        return Err(Error::domain(format!(
            "prediction window must be positive and finite, got {}",
            args.window
        )));
    }
    let predictor = HawkesEpmPredictor::new(
        ckpt.params,
        &loaded.data,
        &ckpt.assignment,
        &covs,
        loaded.data.horizon(),
    )?;

    let v = loaded.data.node_count();
    let mut text = String::from("src,dst,probability\n");
    for u in 0..v {
        for w in 0..v {
            if u == w {
                continue;
            }
            let p = link_probability(&predictor, u, w, args.window);
            if !p.is_finite() {
                return Err(Error::numerical(format!(
                    "predicted probability for pair ({u}, {w}) is {p}"
                )));
            }
            let su = loaded.vocab.name(u).unwrap_or("?");
            let sw = loaded.vocab.name(w).unwrap_or("?");
            let _ = writeln!(text, "{su},{sw},{p}");
        }
    }
    let path = out.write_text("predictions.csv", &text)?;
    println!(
        "scored {} ordered pairs over a window of {} into {}",
        (v as u64) * (v as u64 - 1),
        args.window,
        path.display()
    );
    Ok(())
}
