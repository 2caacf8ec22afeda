//! End-to-end experiments: simulate or load data, optionally hold out a
//! fill-in split, run Gibbs chains and/or CAVI trials, relabel, evaluate, and
//! persist every intermediate result.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.json        version, config, config hash, seeds, stage timings
//! dataset/             y.tsv, mask.tsv (the data as loaded or simulated)
//! truth/               l.tsv, f.tsv, z.tsv, tau.tsv, alpha.tsv, spec.json
//! fillin/              training y.tsv, mask.tsv, and heldout.tsv
//! gibbs/chain_<c>/     raw traces and chain manifest
//! gibbs/aligned/...    relabelled traces, relabelling.tsv
//! cavi/trial_<t>/      elbo.tsv; cavi/best/ holds the selected parameters
//! <method>/metrics.tsv, residuals.tsv, snapshots.tsv
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts;
use crate::cavi::{self, CaviConfig, CaviEngine, MultiTrial};
use crate::error::{Error, Result};
use crate::evaluate::{self, PosteriorSummary, RunningMean};
use crate::gibbs::{self, ChainConfig, ChainProgress, SampleChain};
use crate::io;
use crate::model::{Dataset, Hyperparameters, ModelState};
use crate::relabel::{self, RelabelOptions};
use crate::seed::derive_seed;
use crate::simulate::{simulate, SimulationSpec};

/// Stream indices for seeds split from the master seed.
const SIMULATION_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const CHAIN_STREAM: u64 = 2;
const TRIAL_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Simulate(SimulateSettings),
    Files(FileSource),
}

/// A [`SimulationSpec`] whose seed defaults to one split from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSettings {
    pub g: usize,
    pub n: usize,
    pub k: usize,
    pub pi: Vec<f64>,
    pub snr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub y: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Either `pi` or a sparse/dense factor count must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<usize>,
    #[serde(default = "vague")]
    pub a_tau: f64,
    #[serde(default = "vague")]
    pub b_tau: f64,
    #[serde(default = "vague")]
    pub a_alpha: f64,
    #[serde(default = "vague")]
    pub b_alpha: f64,
}

fn vague() -> f64 {
    Hyperparameters::VAGUE
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            pi: None,
            sparse: None,
            dense: None,
            a_tau: vague(),
            b_tau: vague(),
            a_alpha: vague(),
            b_alpha: vague(),
        }
    }
}

impl PriorSettings {
    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        let pi = match (&self.pi, self.sparse, self.dense) {
            (Some(pi), None, None) => pi.clone(),
            (None, s, d) if s.is_some() || d.is_some() => Hyperparameters::sparse_dense(s.unwrap_or(0), d.unwrap_or(0)),
            _ => {
                return Err(Error::InvalidParameter(
                    "the prior needs either `pi` or the `sparse`/`dense` factor counts".into(),
                ))
            }
        };
        Hyperparameters::new(pi, self.a_tau, self.b_tau, self.a_alpha, self.b_alpha)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gibbs,
    Cavi,
    #[default]
    Both,
}

impl Method {
    pub fn gibbs(self) -> bool {
        matches!(self, Method::Gibbs | Method::Both)
    }

    pub fn cavi(self) -> bool {
        matches!(self, Method::Cavi | Method::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
}

impl Default for GibbsSettings {
    fn default() -> Self {
        GibbsSettings {
            iterations: 2_000,
            burn_in: 1_000,
            thin: 5,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaviSettings {
    pub trials: usize,
    pub max_sweeps: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub elbo_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_sweeps: Option<usize>,
}

impl Default for CaviSettings {
    fn default() -> Self {
        CaviSettings {
            trials: 1,
            max_sweeps: 100_000,
            abs_tol: 1e-10,
            rel_tol: 1e-14,
            elbo_every: 1,
            early_stop_sweeps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSettings {
    pub normalize: bool,
    pub max_iterations: usize,
}

impl Default for RelabelSettings {
    fn default() -> Self {
        let d = RelabelOptions::default();
        RelabelSettings {
            normalize: d.normalize,
            max_iterations: d.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    /// Share of observed entries held out for the fill-in test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill_in: Option<f64>,
    /// Snapshot interval, in kept samples for Gibbs and sweeps for CAVI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; the current rayon pool is used when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub data: DataSource,
    #[serde(default)]
    pub prior: PriorSettings,
    #[serde(default)]
    pub gibbs: GibbsSettings,
    #[serde(default)]
    pub cavi: CaviSettings,
    #[serde(default)]
    pub relabel: RelabelSettings,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidParameter(format!("{name} must be positive")));
    }
    Ok(())
}

fn exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::InvalidParameter(format!("{} does not exist", path.display())));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    /// Read a TOML config. Relative data paths are taken relative to the
    /// config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::InvalidParameter(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Files(f) = &mut config.data {
            f.y = base.join(&f.y);
            f.mask = f.mask.as_ref().map(|m| base.join(m));
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        self.prior.hyperparameters()
    }

    pub fn simulation_spec(&self) -> Option<SimulationSpec> {
        match &self.data {
            DataSource::Simulate(s) => Some(SimulationSpec {
                g: s.g,
                n: s.n,
                k: s.k,
                pi: s.pi.clone(),
                snr: s.snr,
                seed: s.seed.unwrap_or_else(|| derive_seed(self.seed, SIMULATION_STREAM)),
            }),
            DataSource::Files(_) => None,
        }
    }

    pub fn chain_configs(&self) -> Vec<ChainConfig> {
        let g = &self.gibbs;
        ChainConfig::new(g.iterations, g.burn_in, g.thin, 0).for_chains(derive_seed(self.seed, CHAIN_STREAM), g.chains)
    }

    pub fn cavi_config(&self) -> CaviConfig {
        let c = &self.cavi;
        CaviConfig {
            elbo_every: c.elbo_every,
            ..CaviConfig::new(c.max_sweeps, c.abs_tol, c.rel_tol, derive_seed(self.seed, TRIAL_STREAM))
        }
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        cavi::trial_seeds(self.cavi_config().seed, self.cavi.trials)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, SPLIT_STREAM)
    }

    pub fn relabel_options(&self) -> RelabelOptions {
        RelabelOptions {
            normalize: self.relabel.normalize,
            max_iterations: self.relabel.max_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hyper = self.hyperparameters()?;
        match &self.data {
            DataSource::Simulate(_) => {
                let spec = self.simulation_spec().expect("simulated source");
                spec.validate()?;
                if spec.k != hyper.k() {
                    return Err(Error::InvalidParameter(format!(
                        "the prior has {} factors but the simulation has {}; metrics against the truth need them equal",
                        hyper.k(),
                        spec.k
                    )));
                }
            }
            DataSource::Files(f) => {
                exists(&f.y)?;
                if let Some(m) = &f.mask {
                    exists(m)?;
                }
            }
        }
        if self.method.gibbs() {
            positive("gibbs.chains", self.gibbs.chains)?;
            self.chain_configs()[0].validate()?;
            positive("kept samples (iterations - burn_in) / thin", ChainConfig::new(
                self.gibbs.iterations,
                self.gibbs.burn_in,
                self.gibbs.thin,
                0,
            )
            .kept_count())?;
        }
        if self.method.cavi() {
            positive("cavi.trials", self.cavi.trials)?;
            positive("cavi.max_sweeps", self.cavi.max_sweeps)?;
            self.cavi_config().validate()?;
            if let Some(s) = self.cavi.early_stop_sweeps {
                positive("cavi.early_stop_sweeps", s)?;
            }
        }
        if let Some(f) = self.fill_in {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidParameter(format!("fill_in = {f} is outside (0, 1)")));
            }
        }
        if let Some(s) = self.snapshot_every {
            positive("snapshot_every", s)?;
        }
        if let Some(t) = self.threads {
            positive("threads", t)?;
        }
        positive("relabel.max_iterations", self.relabel.max_iterations)
    }

    /// SHA-256 of the config as JSON without `out` and `threads`, which do
    /// not change any result.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            map.remove("out");
            map.remove("threads");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// What snapshots and final metrics are scored against.
#[derive(Debug, Clone, Copy, Default)]
pub struct Reference<'a> {
    pub truth: Option<&'a ModelState>,
    /// The full data and the held-out entries.
    pub heldout: Option<(&'a Dataset, &'a [(usize, usize)])>,
}

/// Metrics of `summary`: Z-accuracy and RRMSE of L, F and LF after
/// alignment when a truth is known, held-out RRMSE when there is a fill-in
/// split. Best effort: metrics that cannot be computed are left out.
pub fn snapshot_metrics(summary: &PosteriorSummary, reference: &Reference<'_>) -> Vec<(String, f64)> {
    let mut rows = Vec::new();
    if let Some(truth) = reference.truth {
        if let Ok((m, _)) = evaluate::evaluate_against_truth(summary, truth) {
            rows.extend(m.rows());
        }
    }
    if let Some((full, heldout)) = reference.heldout {
        if let Ok(r) = evaluate::fill_in_rrmse(summary, full, heldout) {
            rows.push(("fill_in_rrmse".into(), r));
        }
    }
    rows
}

/// One timestamped row of metrics for chain or trial `unit` after `step`
/// kept samples or sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub unit: usize,
    pub step: usize,
    pub elapsed: f64,
    pub values: Vec<(String, f64)>,
}

/// Rows of `unit, step, elapsed, <metric>...`. Keys are taken from the first
/// row; a missing value is written as `NA`.
pub fn write_snapshots(path: impl AsRef<Path>, rows: &[Snapshot]) -> Result<()> {
    let keys: Vec<String> = rows.first().map_or_else(Vec::new, |r| r.values.iter().map(|(k, _)| k.clone()).collect());
    let mut header = vec!["unit".to_string(), "step".to_string(), "elapsed".to_string()];
    header.extend(keys.iter().cloned());
    io::write_rows(
        path,
        Some(&header),
        rows.iter().map(|r| {
            let mut cells = vec![r.unit.to_string(), r.step.to_string(), io::format_f64(r.elapsed)];
            cells.extend(keys.iter().map(|k| {
                r.values
                    .iter()
                    .find(|(name, _)| name == k)
                    .map_or_else(|| io::NA.to_string(), |(_, v)| io::format_f64(*v))
            }));
            cells
        }),
    )
}

/// Run chains in parallel, snapshotting each chain's running means every
/// `every` kept samples and once more at the end.
pub fn run_chains_with_snapshots(
    data: &Dataset,
    hyper: &Hyperparameters,
    configs: &[ChainConfig],
    every: usize,
    reference: &Reference<'_>,
) -> Result<(Vec<SampleChain>, Vec<Snapshot>)> {
    let (g, k, n) = (data.n_features(), hyper.k(), data.n_samples());
    let per_chain: Vec<(SampleChain, Vec<Snapshot>)> = configs
        .par_iter()
        .enumerate()
        .map(|(unit, config)| {
            let mut acc = RunningMean::new(g, k, n);
            let mut rows = Vec::new();
            let mut last: Option<(usize, f64, f64)> = None;
            let snap = |acc: &RunningMean, step: usize, elapsed: f64, log_joint: f64, rows: &mut Vec<Snapshot>| {
                if let Ok(summary) = acc.summary() {
                    let mut values = snapshot_metrics(&summary, reference);
                    values.push(("log_joint".into(), log_joint));
                    rows.push(Snapshot { unit, step, elapsed, values });
                }
            };
            let chain = gibbs::run_chain_observed(data, hyper, config, |p: &ChainProgress<'_>| {
                acc.push(p.state);
                let step = p.kept_index + 1;
                if step.is_multiple_of(every) {
                    snap(&acc, step, p.elapsed, p.log_joint, &mut rows);
                }
                last = Some((step, p.elapsed, p.log_joint));
            })?;
            if let Some((step, elapsed, lj)) = last {
                if !step.is_multiple_of(every) {
                    snap(&acc, step, elapsed, lj, &mut rows);
                }
            }
            Ok((chain, rows))
        })
        .collect::<Result<_>>()?;
    Ok(per_chain.into_iter().unzip::<_, _, Vec<_>, Vec<_>>()).map(|(c, r)| (c, r.into_iter().flatten().collect()))
}

fn cavi_snapshot(engine: &CaviEngine<'_>, unit: usize, reference: &Reference<'_>) -> Snapshot {
    let mut values = snapshot_metrics(&evaluate::summarize_variational(engine.state()), reference);
    if let Some(e) = engine.latest_elbo() {
        values.push(("elbo".into(), e));
    }
    Snapshot {
        unit,
        step: engine.sweeps(),
        elapsed: engine.elapsed(),
        values,
    }
}

fn advance_with_snapshots(
    engine: &mut CaviEngine<'_>,
    limit: usize,
    every: usize,
    unit: usize,
    reference: &Reference<'_>,
    rows: &mut Vec<Snapshot>,
) -> Result<()> {
    while !engine.is_done() && engine.sweeps() < limit {
        let next = ((engine.sweeps() / every + 1) * every).min(limit);
        engine.advance_to(next)?;
        if engine.sweeps().is_multiple_of(every) {
            rows.push(cavi_snapshot(engine, unit, reference));
        }
    }
    Ok(())
}

/// Multi-trial CAVI as in [`cavi::run_seeded_trials`], snapshotting each
/// trial's current means every `every` sweeps and once more at its end.
pub fn run_trials_with_snapshots(
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &CaviConfig,
    seeds: &[u64],
    early_stop: Option<usize>,
    every: usize,
    reference: &Reference<'_>,
) -> Result<(MultiTrial, Vec<Snapshot>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let budget = early_stop.unwrap_or(config.max_sweeps);
    let mut work: Vec<(CaviEngine<'_>, Vec<Snapshot>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(unit, &seed)| -> Result<_> {
            let mut e = CaviEngine::new(data, hyper, &CaviConfig { seed, ..config.clone() })?;
            let mut rows = Vec::new();
            advance_with_snapshots(&mut e, budget, every, unit, reference, &mut rows)?;
            Ok((e, rows))
        })
        .collect::<Result<_>>()?;
    let best = cavi::best_index(work.iter().map(|(e, _)| e.latest_elbo().unwrap_or(f64::NEG_INFINITY)));
    if early_stop.is_some() {
        let (e, rows) = &mut work[best];
        advance_with_snapshots(e, config.max_sweeps, every, best, reference, rows)?;
    }
    let mut runs = Vec::with_capacity(work.len());
    let mut snapshots = Vec::new();
    for (unit, (e, mut rows)) in work.into_iter().enumerate() {
        if rows.last().is_none_or(|r| r.step != e.sweeps()) {
            rows.push(cavi_snapshot(&e, unit, reference));
        }
        snapshots.extend(rows);
        runs.push(e.into_run());
    }
    Ok((MultiTrial { runs, best, early_stop }, snapshots))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<u64>,
    pub chains: Vec<u64>,
    pub trials: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub stages: Vec<StageRecord>,
    /// `"complete"` or `"failed"`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub gibbs_metrics: Option<Vec<(String, f64)>>,
    pub cavi_metrics: Option<Vec<(String, f64)>>,
}

struct Run<'c> {
    config: &'c ExperimentConfig,
    dir: PathBuf,
    stages: Vec<StageRecord>,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&self.dir).map_err(|e| e.at_stage(name))?;
        self.stages.push(StageRecord {
            name: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn manifest(&self, failure: Option<&Error>) -> Manifest {
        let c = self.config;
        Manifest {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: c.hash(),
            config: c.clone(),
            seeds: SeedRecord {
                master: c.seed,
                simulation: c.simulation_spec().map(|s| s.seed),
                split: c.fill_in.map(|_| c.split_seed()),
                chains: if c.method.gibbs() { c.chain_configs().iter().map(|x| x.seed).collect() } else { Vec::new() },
                trials: if c.method.cavi() { c.trial_seeds() } else { Vec::new() },
            },
            stages: self.stages.clone(),
            status: if failure.is_some() { "failed" } else { "complete" }.into(),
            failed_stage: failure.and_then(|e| match e {
                Error::Stage { stage, .. } => Some(stage.clone()),
                _ => None,
            }),
            error: failure.map(|e| e.to_string()),
        }
    }
}

fn write_method_outputs(
    dir: &Path,
    summary: &PosteriorSummary,
    reference: &Reference<'_>,
    snapshots: &[Snapshot],
    config: &ExperimentConfig,
) -> Result<Vec<(String, f64)>> {
    let metrics = snapshot_metrics(summary, reference);
    io::write_metrics(dir.join("metrics.tsv"), &metrics)?;
    if let Some((full, heldout)) = reference.heldout {
        artifacts::write_residuals(dir.join("residuals.tsv"), &evaluate::residual_table(summary, full, heldout))?;
    }
    if config.snapshot_every.is_some() {
        write_snapshots(dir.join("snapshots.tsv"), snapshots)?;
    }
    Ok(metrics)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Run the whole pipeline. On failure the manifest records the failing
/// stage and everything persisted up to that point is left in place.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(|| run_pipeline(config)),
        None => run_pipeline(config),
    }
}

fn run_pipeline(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut run = Run {
        config,
        dir: config.out.clone(),
        stages: Vec::new(),
    };
    create_dir(&run.dir)?;
    let result = pipeline(&mut run);
    let manifest = run.manifest(result.as_ref().err());
    io::write_json(run.dir.join("manifest.json"), &manifest)?;
    let (gibbs_metrics, cavi_metrics) = result?;
    Ok(ExperimentReport {
        dir: run.dir,
        manifest,
        gibbs_metrics,
        cavi_metrics,
    })
}

type MethodMetrics = (Option<Vec<(String, f64)>>, Option<Vec<(String, f64)>>);

fn pipeline(run: &mut Run<'_>) -> Result<MethodMetrics> {
    let config = run.config;
    let hyper = config.hyperparameters()?;
    let (data, truth) = run.stage("data", |dir| {
        let (data, truth) = match (&config.data, config.simulation_spec()) {
            (_, Some(spec)) => {
                let (data, truth) = simulate(&spec)?;
                artifacts::save_truth(dir.join("truth"), &truth, &spec)?;
                (data, Some(truth))
            }
            (DataSource::Files(f), None) => (io::load_dataset(&f.y, f.mask.as_deref())?, None),
            (DataSource::Simulate(_), None) => unreachable!("simulated sources always have a spec"),
        };
        io::save_dataset(dir.join("dataset"), &data)?;
        Ok((data, truth))
    })?;
    let split = match config.fill_in {
        Some(fraction) => Some(run.stage("fillin", |dir| {
            let split = evaluate::make_fill_in_split(&data, fraction, config.split_seed())?;
            let fd = dir.join("fillin");
            io::save_dataset(&fd, &split.masked)?;
            artifacts::write_heldout(fd.join("heldout.tsv"), &split.heldout)?;
            Ok(split)
        })?),
        None => None,
    };
    let train = split.as_ref().map_or(&data, |s| &s.masked);
    let reference = Reference {
        truth: truth.as_ref(),
        heldout: split.as_ref().map(|s| (&data, s.heldout.as_slice())),
    };

    let gibbs_metrics = if config.method.gibbs() {
        let configs = config.chain_configs();
        let (chains, snapshots) = run.stage("gibbs", |dir| {
            let (chains, snapshots) = match config.snapshot_every {
                Some(every) => run_chains_with_snapshots(train, &hyper, &configs, every, &reference)?,
                None => (gibbs::run_chains(train, &hyper, &configs)?, Vec::new()),
            };
            for (c, chain) in chains.iter().enumerate() {
                artifacts::save_chain(dir.join("gibbs").join(format!("chain_{c}")), chain)?;
            }
            Ok((chains, snapshots))
        })?;
        let aligned = run.stage("relabel", |dir| {
            let aligned = relabel::relabel_chains(&chains, config.relabel_options())?;
            let ad = dir.join("gibbs").join("aligned");
            for (c, chain) in aligned.chains.iter().enumerate() {
                artifacts::save_chain(ad.join(format!("chain_{c}")), chain)?;
            }
            artifacts::write_relabelling_log(ad.join("relabelling.tsv"), &aligned.relabellings)?;
            Ok(aligned)
        })?;
        Some(run.stage("evaluate-gibbs", |dir| {
            let summary = evaluate::summarize_chains(&aligned.chains)?;
            write_method_outputs(&dir.join("gibbs"), &summary, &reference, &snapshots, config)
        })?)
    } else {
        None
    };

    let cavi_metrics = if config.method.cavi() {
        let cavi_config = config.cavi_config();
        let seeds = config.trial_seeds();
        let early = config.cavi.early_stop_sweeps;
        let (trials, snapshots) = run.stage("cavi", |dir| {
            let (trials, snapshots) = match config.snapshot_every {
                Some(every) => run_trials_with_snapshots(train, &hyper, &cavi_config, &seeds, early, every, &reference)?,
                None => (cavi::run_seeded_trials(train, &hyper, &cavi_config, &seeds, early)?, Vec::new()),
            };
            artifacts::save_trials(dir.join("cavi"), &trials.runs, trials.best, trials.early_stop)?;
            Ok((trials, snapshots))
        })?;
        Some(run.stage("evaluate-cavi", |dir| {
            let summary = evaluate::summarize_variational(&trials.best_run().state);
            write_method_outputs(&dir.join("cavi"), &summary, &reference, &snapshots, config)
        })?)
    } else {
        None
    };
    Ok((gibbs_metrics, cavi_metrics))
}
