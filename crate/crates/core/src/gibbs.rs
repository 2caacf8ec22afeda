//! Collapsed Gibbs sampler.
//!
//! One sweep draws every `z_ik` (rows outer, factors inner) from its
//! conditional with the whole loading row `l_i·` integrated out, then draws
//! `L` row by row, `F` column by column, and finally `τ` and `α`. All
//! likelihood sums run over observed entries only.
//!
//! For a row `i` the sufficient statistics are the Gram matrix
//! `Σ_{j observed} f_·j f_·jᵀ` and the vector `Σ_{j observed} f_·j y_ij`.
//! They are computed once per row and sweep. The collapsed log-odds of
//! `z_ik` then only needs the Cholesky factor of the active set without `k`,
//! bordered by one row for `k`: the bordering pivot gives the determinant
//! ratio and the new triangular-solve component gives the change in the
//! quadratic form.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{backward_solve, cholesky, forward_solve, logistic, sample_gamma, sample_gaussian_canonical, standard_normal};
use crate::model::{log_joint, Dataset, Hyperparameters, ModelState};
use crate::seed::{derive_seed, rng_from_seed, SfRng};

#[derive(Debug, Clone, PartialEq)]
pub enum ChainInit {
    /// `Z`, `F` and active loadings drawn from their priors (slab precision
    /// one), then `τ` and `α` drawn from their full conditionals.
    PriorDraw,
    Supplied(Box<ModelState>),
}

/// Parameter blocks held at their initial values instead of being resampled.
/// With all three fixed, the chain targets `p(Z, L | Y, F, τ, α)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedBlocks {
    pub f: bool,
    pub tau: bool,
    pub alpha: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Total sweeps, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub init: ChainInit,
    pub fixed: FixedBlocks,
}

impl ChainConfig {
    pub fn new(iterations: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        ChainConfig {
            iterations,
            burn_in,
            thin,
            seed,
            init: ChainInit::PriorDraw,
            fixed: FixedBlocks::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        Ok(())
    }

    /// Sweep `t` (1-based) is kept when it is past burn-in and closes a
    /// window of `thin` sweeps.
    pub fn keeps(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn kept_count(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin
    }

    /// Copies of this configuration for `chains` chains with seeds split
    /// from `master_seed`.
    pub fn for_chains(&self, master_seed: u64, chains: usize) -> Vec<ChainConfig> {
        (0..chains)
            .map(|c| ChainConfig {
                seed: derive_seed(master_seed, c as u64),
                ..self.clone()
            })
            .collect()
    }
}

/// Thinned draws from one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleChain {
    pub samples: Vec<ModelState>,
    pub log_joint: Vec<f64>,
    /// Sampler wall-clock seconds at which each sample was kept.
    pub elapsed: Vec<f64>,
    /// Sampler wall-clock seconds for the whole run.
    pub runtime: f64,
    pub config: ChainConfig,
}

impl SampleChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_factors(&self) -> Option<usize> {
        self.samples.first().map(|s| s.n_factors())
    }

    pub fn mean_log_joint(&self) -> f64 {
        self.log_joint.iter().sum::<f64>() / self.log_joint.len() as f64
    }
}

/// Passed to the observer of [`run_chain_observed`] for every kept sample.
pub struct ChainProgress<'a> {
    pub iteration: usize,
    pub kept_index: usize,
    pub state: &'a ModelState,
    pub log_joint: f64,
    pub elapsed: f64,
}

/// Conditional normal over the active loadings of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowConditional {
    pub active: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

struct RowSystem {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

fn full_gram(f: &DMatrix<f64>) -> DMatrix<f64> {
    f * f.transpose()
}

fn row_rhs(f: &DMatrix<f64>, data: &Dataset, i: usize) -> DVector<f64> {
    let k = f.nrows();
    let mut rhs = DVector::zeros(k);
    for j in 0..data.n_samples() {
        if data.is_observed(i, j) {
            let y = data.y()[(i, j)];
            for c in 0..k {
                rhs[c] += f[(c, j)] * y;
            }
        }
    }
    rhs
}

fn masked_gram(f: &DMatrix<f64>, data: &Dataset, i: usize) -> DMatrix<f64> {
    let k = f.nrows();
    let mut gram = DMatrix::zeros(k, k);
    for j in 0..data.n_samples() {
        if data.is_observed(i, j) {
            for a in 0..k {
                let fa = f[(a, j)];
                for b in a..k {
                    gram[(a, b)] += fa * f[(b, j)];
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram
}

fn row_system(f: &DMatrix<f64>, data: &Dataset, i: usize, shared_gram: Option<&DMatrix<f64>>) -> RowSystem {
    RowSystem {
        gram: match shared_gram {
            Some(g) => g.clone(),
            None => masked_gram(f, data, i),
        },
        rhs: row_rhs(f, data, i),
    }
}

fn row_systems(f: &DMatrix<f64>, data: &Dataset) -> Vec<RowSystem> {
    let shared = data.is_fully_observed().then(|| full_gram(f));
    (0..data.n_features()).map(|i| row_system(f, data, i, shared.as_ref())).collect()
}

fn not_pd(i: usize, k: Option<usize>) -> Error {
    Error::NotPositiveDefinite {
        context: match k {
            Some(k) => format!("loading row {i}, factor {k}"),
            None => format!("loading row {i}"),
        },
    }
}

/// Precision matrix and information vector of the active loadings of a row.
fn active_system(sys: &RowSystem, active: &[usize], tau: f64, alpha: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let m = active.len();
    let prec = DMatrix::from_fn(m, m, |a, b| {
        let v = tau * sys.gram[(active[a], active[b])];
        if a == b {
            v + alpha[active[a]]
        } else {
            v
        }
    });
    let info = DVector::from_fn(m, |a, _| tau * sys.rhs[active[a]]);
    (prec, info)
}

fn collapsed_log_odds(
    sys: &RowSystem,
    z_row: &[bool],
    tau: f64,
    alpha: &DVector<f64>,
    pi: f64,
    i: usize,
    k: usize,
) -> Result<f64> {
    if pi >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let others: Vec<usize> = (0..z_row.len()).filter(|&c| c != k && z_row[c]).collect();
    let (prec0, info0) = active_system(sys, &others, tau, alpha);
    let border = DVector::from_fn(others.len(), |a, _| tau * sys.gram[(others[a], k)]);
    let (v, w0) = if others.is_empty() {
        (DVector::zeros(0), DVector::zeros(0))
    } else {
        let chol = cholesky(&prec0).ok_or_else(|| not_pd(i, Some(k)))?;
        (forward_solve(&chol, &border), forward_solve(&chol, &info0))
    };
    let schur = tau * sys.gram[(k, k)] + alpha[k] - v.dot(&v);
    if !(schur > 0.0) || !schur.is_finite() {
        return Err(not_pd(i, Some(k)));
    }
    let w_new = (tau * sys.rhs[k] - v.dot(&w0)) / schur.sqrt();
    Ok(0.5 * (alpha[k].ln() - schur.ln() + w_new * w_new) + pi.ln() - (1.0 - pi).ln())
}

fn z_row(state: &ModelState, i: usize) -> Vec<bool> {
    (0..state.n_factors()).map(|c| state.z[(i, c)]).collect()
}

/// Log-odds `log p(z_ik = 1 | ·) - log p(z_ik = 0 | ·)` with `l_i·`
/// marginalised out. Infinite when `π_k = 1`.
pub fn z_log_odds(state: &ModelState, data: &Dataset, hyper: &Hyperparameters, i: usize, k: usize) -> Result<f64> {
    state.check_against(data, Some(hyper))?;
    let sys = row_system(&state.f, data, i, None);
    collapsed_log_odds(&sys, &z_row(state, i), state.tau[i], &state.alpha, hyper.pi[k], i, k)
}

fn draw_z(rng: &mut SfRng, log_odds: f64) -> bool {
    let p = logistic(log_odds);
    p >= 1.0 || rng.random::<f64>() < p
}

/// Redraw `z_ik` from its collapsed conditional. Turning a loading off sets
/// it to exactly zero.
pub fn sample_z_entry(
    state: &mut ModelState,
    data: &Dataset,
    hyper: &Hyperparameters,
    i: usize,
    k: usize,
    rng: &mut SfRng,
) -> Result<()> {
    let lo = z_log_odds(state, data, hyper, i, k)?;
    set_z(state, i, k, draw_z(rng, lo));
    Ok(())
}

fn set_z(state: &mut ModelState, i: usize, k: usize, on: bool) {
    state.z[(i, k)] = on;
    if !on {
        state.l[(i, k)] = 0.0;
    }
}

fn conditional_from_system(sys: &RowSystem, active: Vec<usize>, tau: f64, alpha: &DVector<f64>, i: usize) -> Result<RowConditional> {
    if active.is_empty() {
        return Ok(RowConditional {
            active,
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        });
    }
    let (prec, info) = active_system(sys, &active, tau, alpha);
    let chol = cholesky(&prec).ok_or_else(|| not_pd(i, None))?;
    let mean = backward_solve(&chol, &forward_solve(&chol, &info));
    let cov = prec.cholesky().ok_or_else(|| not_pd(i, None))?.inverse();
    Ok(RowConditional { active, mean, cov })
}

/// Conditional mean and covariance of the active loadings of row `i`.
pub fn l_row_conditional(state: &ModelState, data: &Dataset, i: usize) -> Result<RowConditional> {
    state.check_against(data, None)?;
    let sys = row_system(&state.f, data, i, None);
    let active = (0..state.n_factors()).filter(|&c| state.z[(i, c)]).collect();
    conditional_from_system(&sys, active, state.tau[i], &state.alpha, i)
}

fn draw_l_row(state: &mut ModelState, sys: &RowSystem, i: usize, rng: &mut SfRng) -> Result<()> {
    let k = state.n_factors();
    let active: Vec<usize> = (0..k).filter(|&c| state.z[(i, c)]).collect();
    for c in 0..k {
        state.l[(i, c)] = 0.0;
    }
    if active.is_empty() {
        return Ok(());
    }
    let (prec, info) = active_system(sys, &active, state.tau[i], &state.alpha);
    let draw = sample_gaussian_canonical(rng, &prec, &info).ok_or_else(|| not_pd(i, None))?;
    for (a, &c) in active.iter().enumerate() {
        state.l[(i, c)] = draw[a];
    }
    Ok(())
}

/// Draw every row of `L` from its conditional; inactive loadings are zero.
pub fn sample_l_rows(state: &mut ModelState, data: &Dataset, rng: &mut SfRng) -> Result<()> {
    state.check_against(data, None)?;
    let systems = row_systems(&state.f, data);
    for (i, sys) in systems.iter().enumerate() {
        draw_l_row(state, sys, i, rng)?;
    }
    Ok(())
}

fn f_system(state: &ModelState, data: &Dataset, j: usize) -> (DMatrix<f64>, DVector<f64>) {
    let k = state.n_factors();
    let mut prec = DMatrix::identity(k, k);
    let mut info = DVector::zeros(k);
    for i in 0..data.n_features() {
        if !data.is_observed(i, j) {
            continue;
        }
        let t = state.tau[i];
        let y = data.y()[(i, j)];
        for a in 0..k {
            let la = state.l[(i, a)];
            if la == 0.0 {
                continue;
            }
            info[a] += t * la * y;
            for b in 0..k {
                prec[(a, b)] += t * la * state.l[(i, b)];
            }
        }
    }
    (prec, info)
}

/// Conditional mean and covariance of column `j` of `F`.
pub fn f_col_conditional(state: &ModelState, data: &Dataset, j: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    state.check_against(data, None)?;
    let (prec, info) = f_system(state, data, j);
    let chol = prec.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("activation column {j}"),
    })?;
    Ok((chol.solve(&info), chol.inverse()))
}

/// Draw every column of `F` from its conditional.
pub fn sample_f_cols(state: &mut ModelState, data: &Dataset, rng: &mut SfRng) -> Result<()> {
    state.check_against(data, None)?;
    let k = state.n_factors();
    if data.is_fully_observed() {
        // Every column shares the same precision matrix.
        let (prec, _) = f_system(state, data, 0);
        let chol = cholesky(&prec).ok_or_else(|| Error::NotPositiveDefinite {
            context: "activation columns".into(),
        })?;
        let weighted = DMatrix::from_fn(data.n_features(), k, |i, c| state.tau[i] * state.l[(i, c)]);
        let info_all = weighted.transpose() * data.y();
        for j in 0..data.n_samples() {
            let info = info_all.column(j).into_owned();
            let mean = backward_solve(&chol, &forward_solve(&chol, &info));
            let eps = DVector::from_fn(k, |_, _| standard_normal(rng));
            let draw = mean + backward_solve(&chol, &eps);
            state.f.set_column(j, &draw);
        }
        return Ok(());
    }
    for j in 0..data.n_samples() {
        let (prec, info) = f_system(state, data, j);
        let draw = sample_gaussian_canonical(rng, &prec, &info).ok_or_else(|| Error::NotPositiveDefinite {
            context: format!("activation column {j}"),
        })?;
        state.f.set_column(j, &draw);
    }
    Ok(())
}

/// Shape and rate of the gamma conditional of `τ_i`.
pub fn tau_conditional(state: &ModelState, data: &Dataset, hyper: &Hyperparameters, i: usize) -> (f64, f64) {
    let mut n_obs = 0usize;
    let mut rss = 0.0;
    for j in 0..data.n_samples() {
        if data.is_observed(i, j) {
            let r = data.y()[(i, j)] - state.predict(i, j);
            rss += r * r;
            n_obs += 1;
        }
    }
    (hyper.a_tau + 0.5 * n_obs as f64, hyper.b_tau + 0.5 * rss)
}

pub fn sample_tau(state: &mut ModelState, data: &Dataset, hyper: &Hyperparameters, rng: &mut SfRng) {
    for i in 0..state.n_features() {
        let (shape, rate) = tau_conditional(state, data, hyper, i);
        state.tau[i] = sample_gamma(rng, shape, rate);
    }
}

/// Shape and rate of the gamma conditional of `α_k`.
pub fn alpha_conditional(state: &ModelState, hyper: &Hyperparameters, k: usize) -> (f64, f64) {
    let mut active = 0usize;
    let mut ss = 0.0;
    for i in 0..state.n_features() {
        if state.z[(i, k)] {
            active += 1;
            ss += state.l[(i, k)] * state.l[(i, k)];
        }
    }
    (hyper.a_alpha + 0.5 * active as f64, hyper.b_alpha + 0.5 * ss)
}

pub fn sample_alpha(state: &mut ModelState, hyper: &Hyperparameters, rng: &mut SfRng) {
    for k in 0..state.n_factors() {
        let (shape, rate) = alpha_conditional(state, hyper, k);
        state.alpha[k] = sample_gamma(rng, shape, rate);
    }
}

/// One full sweep in the fixed order: all `z_ik`, then `L`, `F`, `τ`, `α`.
pub fn sweep(state: &mut ModelState, data: &Dataset, hyper: &Hyperparameters, fixed: FixedBlocks, rng: &mut SfRng) -> Result<()> {
    let k = state.n_factors();
    let systems = row_systems(&state.f, data);
    for (i, sys) in systems.iter().enumerate() {
        let mut row = z_row(state, i);
        for c in 0..k {
            let lo = collapsed_log_odds(sys, &row, state.tau[i], &state.alpha, hyper.pi[c], i, c)?;
            row[c] = draw_z(rng, lo);
            set_z(state, i, c, row[c]);
        }
    }
    for (i, sys) in systems.iter().enumerate() {
        draw_l_row(state, sys, i, rng)?;
    }
    if !fixed.f {
        sample_f_cols(state, data, rng)?;
    }
    if !fixed.tau {
        sample_tau(state, data, hyper, rng);
    }
    if !fixed.alpha {
        sample_alpha(state, hyper, rng);
    }
    Ok(())
}

/// Starting state for a chain.
pub fn initial_state(data: &Dataset, hyper: &Hyperparameters, init: &ChainInit, rng: &mut SfRng) -> Result<ModelState> {
    match init {
        ChainInit::Supplied(state) => {
            state.check_against(data, Some(hyper))?;
            state.check_spike()?;
            Ok((**state).clone())
        }
        ChainInit::PriorDraw => {
            let (g, n, k) = (data.n_features(), data.n_samples(), hyper.k());
            let z = DMatrix::from_fn(g, k, |_, c| rng.random_bool(hyper.pi[c]));
            let f = DMatrix::from_fn(k, n, |_, _| standard_normal(rng));
            let l = DMatrix::from_fn(g, k, |i, c| if z[(i, c)] { standard_normal(rng) } else { 0.0 });
            let mut state = ModelState {
                l,
                f,
                z,
                tau: DVector::from_element(g, 1.0),
                alpha: DVector::from_element(k, 1.0),
            };
            sample_tau(&mut state, data, hyper, rng);
            sample_alpha(&mut state, hyper, rng);
            Ok(state)
        }
    }
}

pub fn run_chain(data: &Dataset, hyper: &Hyperparameters, config: &ChainConfig) -> Result<SampleChain> {
    run_chain_observed(data, hyper, config, |_| {})
}

/// Run one chain, calling `observer` after every kept sample. Time spent in
/// the observer is excluded from the recorded elapsed times.
pub fn run_chain_observed<O>(data: &Dataset, hyper: &Hyperparameters, config: &ChainConfig, mut observer: O) -> Result<SampleChain>
where
    O: FnMut(&ChainProgress<'_>),
{
    config.validate()?;
    let capacity = config.kept_count();
    let mut samples = Vec::with_capacity(capacity);
    let mut log_joints = Vec::with_capacity(capacity);
    let mut elapsed = Vec::with_capacity(capacity);
    let runtime = stream_chain(data, hyper, config, |p| {
        observer(p);
        samples.push(p.state.clone());
        log_joints.push(p.log_joint);
        elapsed.push(p.elapsed);
    })?;
    Ok(SampleChain {
        samples,
        log_joint: log_joints,
        elapsed,
        runtime,
        config: config.clone(),
    })
}

/// Run one chain without storing it: every kept sample is handed to
/// `observer` and then dropped. Time spent in the observer is excluded from
/// the reported elapsed times. Returns the sampler's total seconds.
pub fn stream_chain<O>(data: &Dataset, hyper: &Hyperparameters, config: &ChainConfig, mut observer: O) -> Result<f64>
where
    O: FnMut(&ChainProgress<'_>),
{
    config.validate()?;
    hyper.validate()?;
    if hyper.k() == 0 {
        return Err(Error::InvalidParameter("at least one factor is required".into()));
    }
    let mut rng = rng_from_seed(config.seed);
    let mut state = initial_state(data, hyper, &config.init, &mut rng)?;
    state.check_against(data, Some(hyper))?;

    let start = Instant::now();
    let mut paused = 0.0;
    let mut kept = 0;
    for t in 1..=config.iterations {
        sweep(&mut state, data, hyper, config.fixed, &mut rng).map_err(|e| Error::Iteration {
            iteration: t,
            source: Box::new(e),
        })?;
        if config.keeps(t) {
            let lj = log_joint(&state, data, hyper)?;
            let now = start.elapsed().as_secs_f64() - paused;
            let pause = Instant::now();
            observer(&ChainProgress {
                iteration: t,
                kept_index: kept,
                state: &state,
                log_joint: lj,
                elapsed: now,
            });
            paused += pause.elapsed().as_secs_f64();
            kept += 1;
        }
    }
    Ok(start.elapsed().as_secs_f64() - paused)
}

/// Run independent chains in parallel on the current rayon pool. The
/// result order follows `configs`.
pub fn run_chains(data: &Dataset, hyper: &Hyperparameters, configs: &[ChainConfig]) -> Result<Vec<SampleChain>> {
    configs.par_iter().map(|c| run_chain(data, hyper, c)).collect()
}
