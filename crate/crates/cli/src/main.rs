use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sparsefactor::artifacts;
use sparsefactor::cavi::{self, CaviConfig};
use sparsefactor::evaluate::{self, PosteriorSummary};
use sparsefactor::experiment::{
    self, CaviSettings, DataSource, ExperimentConfig, FileSource, GibbsSettings, Method, PriorSettings,
};
use sparsefactor::gibbs::{self, ChainConfig};
use sparsefactor::io;
use sparsefactor::relabel::{self, RelabelOptions};
use sparsefactor::simulate::{simulate, SimulationSpec};
use sparsefactor::{Dataset, Error, Hyperparameters};

/// Sparse Bayesian factor analysis: simulation, Gibbs sampling, CAVI,
/// relabelling and evaluation.
#[derive(Debug, Parser)]
#[command(name = "sparsefactor", version)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for chains and trials.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset and write it with its generating parameters.
    Simulate(SimulateArgs),
    /// Run collapsed Gibbs chains.
    Gibbs(GibbsArgs),
    /// Run multi-trial CAVI.
    Cavi(CaviArgs),
    /// Align chains to a common labelling.
    Relabel(RelabelArgs),
    /// Score chains or a CAVI result against a truth and/or held-out entries.
    Evaluate(EvaluateArgs),
    /// Hold out entries, fit, and score the held-out predictions.
    Fillin(FillinArgs),
    /// Run the full pipeline from a TOML config.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// G=800, N=100, K=6 with six sparsity levels.
    Reference,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum, conflicts_with_all = ["g", "n", "k", "pi"])]
    preset: Option<Preset>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Per-factor inclusion probabilities, comma separated.
    #[arg(long, value_delimiter = ',')]
    pi: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5.0)]
    snr: f64,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Data matrix (features by samples); `NA` marks a missing entry.
    #[arg(long)]
    data: PathBuf,
    /// Optional 0/1 observation mask.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PriorArgs {
    /// Per-factor inclusion probabilities, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["sparse", "dense"])]
    pi: Option<Vec<f64>>,
    /// Number of sparse factors (prior inclusion 0.1).
    #[arg(long)]
    sparse: Option<usize>,
    /// Number of dense factors (prior inclusion 0.9).
    #[arg(long)]
    dense: Option<usize>,
    #[arg(long, default_value_t = Hyperparameters::VAGUE)]
    a_tau: f64,
    #[arg(long, default_value_t = Hyperparameters::VAGUE)]
    b_tau: f64,
    #[arg(long, default_value_t = Hyperparameters::VAGUE)]
    a_alpha: f64,
    #[arg(long, default_value_t = Hyperparameters::VAGUE)]
    b_alpha: f64,
}

impl PriorArgs {
    fn settings(&self) -> PriorSettings {
        PriorSettings {
            pi: self.pi.clone(),
            sparse: self.sparse,
            dense: self.dense,
            a_tau: self.a_tau,
            b_tau: self.b_tau,
            a_alpha: self.a_alpha,
            b_alpha: self.b_alpha,
        }
    }
}

#[derive(Debug, Args)]
struct ChainArgs {
    #[arg(long, default_value_t = GibbsSettings::default().iterations)]
    iterations: usize,
    #[arg(long, default_value_t = GibbsSettings::default().burn_in)]
    burn_in: usize,
    #[arg(long, default_value_t = GibbsSettings::default().thin)]
    thin: usize,
    #[arg(long, default_value_t = GibbsSettings::default().chains)]
    chains: usize,
}

impl ChainArgs {
    fn settings(&self) -> GibbsSettings {
        GibbsSettings {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            chains: self.chains,
        }
    }
}

#[derive(Debug, Args)]
struct TrialArgs {
    #[arg(long, default_value_t = CaviSettings::default().trials)]
    trials: usize,
    #[arg(long, default_value_t = CaviSettings::default().max_sweeps)]
    max_sweeps: usize,
    #[arg(long, default_value_t = CaviSettings::default().abs_tol)]
    abs_tol: f64,
    #[arg(long, default_value_t = CaviSettings::default().rel_tol)]
    rel_tol: f64,
    /// Run every trial this many sweeps, then finish only the best one.
    #[arg(long)]
    early_stop_sweeps: Option<usize>,
    /// Evaluate the ELBO every this many sweeps.
    #[arg(long, default_value_t = CaviSettings::default().elbo_every)]
    elbo_every: usize,
}

impl TrialArgs {
    fn settings(&self) -> CaviSettings {
        CaviSettings {
            trials: self.trials,
            max_sweeps: self.max_sweeps,
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            elbo_every: self.elbo_every,
            early_stop_sweeps: self.early_stop_sweeps,
        }
    }
}

#[derive(Debug, Args)]
struct GibbsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Debug, Args)]
struct CaviArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    trial: TrialArgs,
}

#[derive(Debug, Args)]
struct RelabelArgs {
    /// Chain directories written by `gibbs`.
    #[arg(required = true)]
    chains: Vec<PathBuf>,
    /// Scale each row of F to unit norm before aligning.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = relabel::DEFAULT_MAX_ITERATIONS)]
    max_iterations: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory with the true l.tsv, f.tsv, z.tsv, tau.tsv, alpha.tsv.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Chain directories whose samples are pooled.
    #[arg(long, num_args = 1.., conflicts_with = "cavi")]
    chains: Vec<PathBuf>,
    /// Output directory of `cavi`.
    #[arg(long)]
    cavi: Option<PathBuf>,
    /// Full data for scoring held-out entries.
    #[arg(long, requires = "heldout")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    mask: Option<PathBuf>,
    /// Held-out `row, col` pairs.
    #[arg(long, requires = "data")]
    heldout: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Gibbs,
    Cavi,
    Both,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gibbs => Method::Gibbs,
            MethodArg::Cavi => Method::Cavi,
            MethodArg::Both => Method::Both,
        }
    }
}

#[derive(Debug, Args)]
struct FillinArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    prior: PriorArgs,
    /// Share of observed entries to hold out.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    method: MethodArg,
    #[command(flatten)]
    chain: ChainArgs,
    #[command(flatten)]
    trial: TrialArgs,
    /// Align chains after normalising rows of F.
    #[arg(long)]
    normalize: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    fill_in: Option<f64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
}

struct Globals {
    seed: u64,
    out: PathBuf,
}

fn hyperparameters(prior: &PriorArgs) -> Result<Hyperparameters> {
    Ok(prior.settings().hyperparameters()?)
}

fn load(data: &DataArgs) -> Result<Dataset> {
    Ok(io::load_dataset(&data.data, data.mask.as_deref())?)
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidParameter(format!("{name} must be positive")).into());
    }
    Ok(())
}

fn print_metrics(metrics: &[(String, f64)]) {
    for (k, v) in metrics {
        println!("{k}\t{}", io::format_f64(*v));
    }
}

fn cmd_simulate(a: &SimulateArgs, g: &Globals) -> Result<()> {
    let spec = match a.preset {
        Some(Preset::Reference) => SimulationSpec::reference(a.snr, g.seed),
        None => {
            let (Some(rows), Some(cols), Some(k), Some(pi)) = (a.g, a.n, a.k, a.pi.clone()) else {
                return Err(Error::InvalidParameter("give --preset or all of --g, --n, --k, --pi".into()).into());
            };
            SimulationSpec {
                g: rows,
                n: cols,
                k,
                pi,
                snr: a.snr,
                seed: g.seed,
            }
        }
    };
    let (data, truth) = simulate(&spec)?;
    io::save_dataset(&g.out, &data)?;
    artifacts::save_truth(&g.out, &truth, &spec)?;
    eprintln!("wrote {}x{} dataset and truth to {}", spec.g, spec.n, g.out.display());
    Ok(())
}

fn cmd_gibbs(a: &GibbsArgs, g: &Globals) -> Result<()> {
    let data = load(&a.data)?;
    let hyper = hyperparameters(&a.prior)?;
    positive("--chains", a.chain.chains)?;
    let configs = ChainConfig::new(a.chain.iterations, a.chain.burn_in, a.chain.thin, 0).for_chains(g.seed, a.chain.chains);
    let chains = gibbs::run_chains(&data, &hyper, &configs)?;
    for (c, chain) in chains.iter().enumerate() {
        let dir = g.out.join(format!("chain_{c}"));
        artifacts::save_chain(&dir, chain)?;
        eprintln!(
            "chain {c}: {} samples in {:.3}s, mean log joint {:.4}",
            chain.len(),
            chain.runtime,
            chain.mean_log_joint()
        );
    }
    Ok(())
}

fn cmd_cavi(a: &CaviArgs, g: &Globals) -> Result<()> {
    let data = load(&a.data)?;
    let hyper = hyperparameters(&a.prior)?;
    let s = a.trial.settings();
    positive("--trials", s.trials)?;
    let config = CaviConfig {
        elbo_every: s.elbo_every,
        ..CaviConfig::new(s.max_sweeps, s.abs_tol, s.rel_tol, g.seed)
    };
    let seeds = cavi::trial_seeds(g.seed, s.trials);
    let trials = cavi::run_seeded_trials(&data, &hyper, &config, &seeds, s.early_stop_sweeps)?;
    artifacts::save_trials(&g.out, &trials.runs, trials.best, trials.early_stop)?;
    let best = trials.best_run();
    eprintln!(
        "best trial {} of {}: ELBO {:.6} after {} sweeps ({})",
        trials.best,
        trials.runs.len(),
        best.final_elbo().unwrap_or(f64::NAN),
        best.sweeps,
        if best.converged { "converged" } else { "not converged" }
    );
    Ok(())
}

fn cmd_relabel(a: &RelabelArgs, g: &Globals) -> Result<()> {
    let chains = a
        .chains
        .iter()
        .map(|d| artifacts::load_chain(d).with_context(|| format!("loading chain {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let options = RelabelOptions {
        normalize: a.normalize,
        max_iterations: a.max_iterations,
    };
    let aligned = relabel::relabel_chains(&chains, options)?;
    for (c, chain) in aligned.chains.iter().enumerate() {
        artifacts::save_chain(g.out.join(format!("chain_{c}")), chain)?;
    }
    artifacts::write_relabelling_log(g.out.join("relabelling.tsv"), &aligned.relabellings)?;
    let a = &aligned.alignment;
    eprintln!(
        "aligned {} samples in {} iterations ({}), final risk {:.6}",
        a.relabellings.len(),
        a.iterations,
        if a.converged { "converged" } else { "iteration cap reached" },
        a.risk_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn summary_of(chains: &[PathBuf], cavi_dir: Option<&Path>) -> Result<PosteriorSummary> {
    if let Some(dir) = cavi_dir {
        return Ok(evaluate::summarize_variational(&artifacts::load_variational(dir.join("best"))?));
    }
    if chains.is_empty() {
        return Err(Error::InvalidParameter("give --chains or --cavi".into()).into());
    }
    let loaded = chains.iter().map(artifacts::load_chain).collect::<sparsefactor::Result<Vec<_>>>()?;
    Ok(evaluate::summarize_chains(&loaded)?)
}

fn cmd_evaluate(a: &EvaluateArgs, g: &Globals) -> Result<()> {
    if a.truth.is_none() && a.heldout.is_none() {
        return Err(Error::InvalidParameter("give --truth and/or --data with --heldout".into()).into());
    }
    let summary = summary_of(&a.chains, a.cavi.as_deref())?;
    let mut metrics = Vec::new();
    if let Some(dir) = &a.truth {
        let truth = artifacts::load_state(dir)?;
        let (m, _) = evaluate::evaluate_against_truth(&summary, &truth)?;
        metrics.extend(m.rows());
    }
    std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    if let (Some(data), Some(heldout)) = (&a.data, &a.heldout) {
        let full = io::load_dataset(data, a.mask.as_deref())?;
        let heldout = artifacts::read_heldout(heldout)?;
        metrics.push(("fill_in_rrmse".into(), evaluate::fill_in_rrmse(&summary, &full, &heldout)?));
        artifacts::write_residuals(g.out.join("residuals.tsv"), &evaluate::residual_table(&summary, &full, &heldout))?;
    }
    io::write_metrics(g.out.join("metrics.tsv"), &metrics)?;
    print_metrics(&metrics);
    Ok(())
}

fn cmd_fillin(a: &FillinArgs, g: &Globals, threads: Option<usize>) -> Result<()> {
    let config = ExperimentConfig {
        seed: g.seed,
        method: a.method.into(),
        fill_in: Some(a.fraction),
        snapshot_every: None,
        out: g.out.clone(),
        threads,
        data: DataSource::Files(FileSource {
            y: a.data.data.clone(),
            mask: a.data.mask.clone(),
        }),
        prior: a.prior.settings(),
        gibbs: a.chain.settings(),
        cavi: a.trial.settings(),
        relabel: experiment::RelabelSettings {
            normalize: a.normalize,
            ..Default::default()
        },
    };
    report(experiment::run_experiment(&config)?);
    Ok(())
}

fn cmd_run(a: &RunArgs, cli: &Cli) -> Result<()> {
    let mut config = ExperimentConfig::from_file(&a.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if let Some(m) = a.method {
        config.method = m.into();
    }
    if a.fill_in.is_some() {
        config.fill_in = a.fill_in;
    }
    if a.snapshot_every.is_some() {
        config.snapshot_every = a.snapshot_every;
    }
    report(experiment::run_experiment(&config)?);
    Ok(())
}

fn report(r: experiment::ExperimentReport) {
    for (name, metrics) in [("gibbs", &r.gibbs_metrics), ("cavi", &r.cavi_metrics)] {
        if let Some(m) = metrics {
            println!("[{name}]");
            print_metrics(m);
        }
    }
    eprintln!("artifacts in {} (config {})", r.dir.display(), &r.manifest.config_hash[..12]);
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        positive("--threads", t)?;
    }
    let globals = Globals {
        seed: cli.seed.unwrap_or(0),
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from("out")),
    };
    let task = || match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, &globals),
        Command::Gibbs(a) => cmd_gibbs(a, &globals),
        Command::Cavi(a) => cmd_cavi(a, &globals),
        Command::Relabel(a) => cmd_relabel(a, &globals),
        Command::Evaluate(a) => cmd_evaluate(a, &globals),
        Command::Fillin(a) => cmd_fillin(a, &globals, cli.threads),
        Command::Run(a) => cmd_run(a, cli),
    };
    match cli.threads {
        Some(t) => rayon::ThreadPoolBuilder::new().num_threads(t).build()?.install(task),
        None => task(),
    }
}

/// 1 for bad input, 2 for failures during computation.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_validation));
    if validation {
        1
    } else {
        2
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message before them.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
