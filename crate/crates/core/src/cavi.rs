//! Coordinate-ascent variational inference.
//!
//! The variational family factorises over `(l_ik, z_ik)` pairs, the entries
//! of `F`, and the precisions. Each `q(l_ik, z_ik)` is an exact spike and
//! slab: with probability `η_ik` the loading is `N(μ_l, σ²_l)`, otherwise it
//! is exactly zero. `q(f_kj)` is normal and `q(τ_i)`, `q(α_k)` are gamma in
//! shape-rate form.
//!
//! A sweep updates every `(l_ik, z_ik)` (rows outer, factors inner), then
//! every `f_kj`, then every `τ_i`, then every `α_k`. Each update uses the
//! latest values of everything else. While the loadings are updated `q(F)`
//! is fixed, so it enters only through `Y E[F]ᵀ` and one `K × K` Gram matrix
//! of `E[F]` per row; the activation updates use the mirror-image statistics
//! of `q(L)` per column. Each coordinate update then costs `O(K)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{digamma, ln_gamma, logistic, standard_normal, xlogx, LN_2PI};
use crate::model::{Dataset, Hyperparameters};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub eta: DMatrix<f64>,
    pub mu_l: DMatrix<f64>,
    pub var_l: DMatrix<f64>,
    pub mu_f: DMatrix<f64>,
    pub var_f: DMatrix<f64>,
    pub a_tau: DVector<f64>,
    pub b_tau: DVector<f64>,
    pub a_alpha: DVector<f64>,
    pub b_alpha: DVector<f64>,
}

impl VariationalState {
    pub fn n_features(&self) -> usize {
        self.eta.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.eta.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.mu_f.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (g, k, n) = (self.n_features(), self.n_factors(), self.n_samples());
        let shapes_ok = self.mu_l.shape() == (g, k)
            && self.var_l.shape() == (g, k)
            && self.mu_f.shape() == (k, n)
            && self.var_f.shape() == (k, n)
            && self.a_tau.len() == g
            && self.b_tau.len() == g
            && self.a_alpha.len() == k
            && self.b_alpha.len() == k;
        if !shapes_ok {
            return Err(Error::Dimension("variational parameter shapes disagree".into()));
        }
        if self.eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidParameter("η outside [0, 1]".into()));
        }
        if self.mu_l.iter().chain(self.mu_f.iter()).any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("non-finite variational mean".into()));
        }
        let positive = self
            .var_l
            .iter()
            .chain(self.var_f.iter())
            .chain(self.a_tau.iter())
            .chain(self.b_tau.iter())
            .chain(self.a_alpha.iter())
            .chain(self.b_alpha.iter())
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::InvalidParameter("variances and gamma parameters must be positive".into()));
        }
        Ok(())
    }

    fn check_against(&self, data: &Dataset, hyper: &Hyperparameters) -> Result<()> {
        self.validate()?;
        if self.n_features() != data.n_features() || self.n_samples() != data.n_samples() {
            return Err(Error::Dimension(format!(
                "variational state is {}×{} but data is {}×{}",
                self.n_features(),
                self.n_samples(),
                data.n_features(),
                data.n_samples()
            )));
        }
        if self.n_factors() != hyper.k() {
            return Err(Error::Dimension(format!(
                "variational state has {} factors but pi has {}",
                self.n_factors(),
                hyper.k()
            )));
        }
        Ok(())
    }

    /// `E[L]`, i.e. `η ∘ μ_l`.
    pub fn mean_l(&self) -> DMatrix<f64> {
        self.eta.component_mul(&self.mu_l)
    }

    /// `E[L] E[F]`, which equals `E[LF]` under the mean-field factorisation.
    pub fn mean_lf(&self) -> DMatrix<f64> {
        self.mean_l() * &self.mu_f
    }

    pub fn mean_tau(&self) -> DVector<f64> {
        self.a_tau.component_div(&self.b_tau)
    }

    pub fn mean_alpha(&self) -> DVector<f64> {
        self.a_alpha.component_div(&self.b_alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariationalInit {
    Random,
    Supplied(Box<VariationalState>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaviConfig {
    pub max_sweeps: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub elbo_every: usize,
    pub seed: u64,
    pub init: VariationalInit,
}

impl CaviConfig {
    pub fn new(max_sweeps: usize, abs_tol: f64, rel_tol: f64, seed: u64) -> Self {
        CaviConfig {
            max_sweeps,
            abs_tol,
            rel_tol,
            elbo_every: 1,
            seed,
            init: VariationalInit::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol >= 0.0 && self.rel_tol >= 0.0) {
            return Err(Error::InvalidParameter("tolerances must be nonnegative".into()));
        }
        if self.abs_tol == 0.0 && self.rel_tol == 0.0 {
            return Err(Error::InvalidParameter("at least one tolerance must be positive".into()));
        }
        if self.elbo_every == 0 {
            return Err(Error::InvalidParameter("elbo_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboPoint {
    pub sweep: usize,
    pub elbo: f64,
    /// Wall-clock seconds since the run started.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaviRun {
    pub state: VariationalState,
    pub trace: Vec<ElboPoint>,
    pub sweeps: usize,
    pub converged: bool,
    pub seed: u64,
}

impl CaviRun {
    pub fn final_elbo(&self) -> Option<f64> {
        self.trace.last().map(|p| p.elbo)
    }

    /// Wall-clock seconds at the last ELBO evaluation.
    pub fn elapsed(&self) -> f64 {
        self.trace.last().map_or(0.0, |p| p.elapsed)
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

/// Data laid out for the sweeps: unobserved entries are zero in `y` and
/// have weight zero in `w`.
struct Layout {
    y: DMatrix<f64>,
    w: DMatrix<f64>,
    /// `Σ_j observed y_ij²` per row.
    yy: Vec<f64>,
    n_obs: Vec<f64>,
    full: bool,
}

impl Layout {
    fn new(data: &Dataset) -> Self {
        let w = data.mask().map(|m| if m { 1.0 } else { 0.0 });
        let y = data.y().zip_map(&w, |y, w| if w > 0.0 { y } else { 0.0 });
        Layout {
            yy: y.row_iter().map(|r| r.norm_squared()).collect(),
            n_obs: (0..y.nrows()).map(|i| data.row_observed_count(i) as f64).collect(),
            full: data.is_fully_observed(),
            y,
            w,
        }
    }

    /// `W P`, where `W` is the observation weights (or their transpose).
    /// Without masked entries every row equals the column sums of `p`.
    fn weighted(&self, p: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
        let rows = if transpose { self.w.ncols() } else { self.w.nrows() };
        if self.full {
            let sums = p.row_sum();
            DMatrix::from_fn(rows, p.ncols(), |_, c| sums[c])
        } else if transpose {
            self.w.tr_mul(p)
        } else {
            &self.w * p
        }
    }
}

/// Column `a K + b` holds `x_a ∘ y_b` for the columns of `x` and `y`.
fn pairwise(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let k = x.ncols();
    DMatrix::from_fn(x.nrows(), k * k, |r, c| x[(r, c / k)] * y[(r, c % k)])
}

/// Moments of `q(F)` summed over each row's observed columns, as needed by
/// the loading updates and the residuals.
struct FStats {
    /// `Y E[F]ᵀ`, `G × K`.
    yf: DMatrix<f64>,
    /// Row `i`, column `a K + b`: `Σ_j observed E[f_aj] E[f_bj]`.
    gram: DMatrix<f64>,
    /// `Σ_j observed Var[f_kj]`, `G × K`.
    var: DMatrix<f64>,
}

impl FStats {
    fn new(v: &VariationalState, lay: &Layout) -> Self {
        let mf = v.mu_f.transpose();
        FStats {
            yf: &lay.y * &mf,
            gram: lay.weighted(&pairwise(&mf, &mf), false),
            var: lay.weighted(&v.var_f.transpose(), false),
        }
    }

    /// `Σ_j observed E[f_kj²]`.
    fn second(&self, i: usize, k: usize, n_factors: usize) -> f64 {
        self.gram[(i, k * n_factors + k)] + self.var[(i, k)]
    }
}

/// Moments of `q(L)` weighted by `E[τ]` and summed over each column's
/// observed rows, as needed by the activation updates.
struct LStats {
    /// `Yᵀ diag(E[τ]) E[L]`, `N × K`.
    ytm: DMatrix<f64>,
    /// Row `j`, column `a K + b`: `Σ_i observed E[τ_i] E[l_ia] E[l_ib]`.
    gram: DMatrix<f64>,
    /// `Σ_i observed E[τ_i] E[l_ik²]`, `N × K`.
    second: DMatrix<f64>,
}

impl LStats {
    fn new(v: &VariationalState, lay: &Layout, e_tau: &DVector<f64>) -> Self {
        let m = v.mean_l();
        let tm = DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| e_tau[i] * m[(i, k)]);
        let t_second = DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| {
            e_tau[i] * v.eta[(i, k)] * (v.mu_l[(i, k)].powi(2) + v.var_l[(i, k)])
        });
        LStats {
            ytm: lay.y.tr_mul(&tm),
            gram: lay.weighted(&pairwise(&tm, &m), true),
            second: lay.weighted(&t_second, true),
        }
    }
}

/// Loading update given `E[τ_i]`, `E[α_k]` and `E[ln α_k]`.
#[allow(clippy::too_many_arguments)]
fn lz_step(
    v: &mut VariationalState,
    hyper: &Hyperparameters,
    fs: &FStats,
    et: f64,
    ea: f64,
    eln_alpha: f64,
    i: usize,
    k: usize,
) -> f64 {
    let nk = v.n_factors();
    let mut r = fs.yf[(i, k)];
    for c in (0..nk).filter(|&c| c != k) {
        r -= v.eta[(i, c)] * v.mu_l[(i, c)] * fs.gram[(i, k * nk + c)];
    }
    let var = 1.0 / (et * fs.second(i, k, nk) + ea);
    let mu = et * var * r;
    let pi = hyper.pi[k];
    let log_odds = if pi >= 1.0 {
        f64::INFINITY
    } else {
        0.5 * (eln_alpha - LN_2PI) + 0.5 * mu * mu / var + 0.5 * (LN_2PI + var.ln()) + logit(pi)
    };
    v.var_l[(i, k)] = var;
    v.mu_l[(i, k)] = mu;
    v.eta[(i, k)] = if pi >= 1.0 { 1.0 } else { logistic(log_odds) };
    log_odds
}

fn f_step(v: &mut VariationalState, ls: &LStats, k: usize, j: usize) {
    let nk = v.n_factors();
    let mut r = ls.ytm[(j, k)];
    for c in (0..nk).filter(|&c| c != k) {
        r -= v.mu_f[(c, j)] * ls.gram[(j, k * nk + c)];
    }
    let var = 1.0 / (ls.second[(j, k)] + 1.0);
    v.var_f[(k, j)] = var;
    v.mu_f[(k, j)] = var * r;
}

/// `Σ_j observed E[(y_ij - l_i· · f_·j)²]` for every row, using
/// `E[(l·f)²] = Σ_{a≠b} E[l_a] E[l_b] E[f_a] E[f_b] + Σ_k E[l_k²] E[f_k²]`.
fn expected_rss(v: &VariationalState, lay: &Layout, fs: &FStats) -> Vec<f64> {
    let nk = v.n_factors();
    (0..v.n_features())
        .map(|i| {
            let m = |c: usize| v.eta[(i, c)] * v.mu_l[(i, c)];
            let mut rss = lay.yy[i];
            for a in 0..nk {
                rss -= 2.0 * m(a) * fs.yf[(i, a)];
                rss += v.eta[(i, a)] * (v.mu_l[(i, a)].powi(2) + v.var_l[(i, a)]) * fs.second(i, a, nk);
                for b in (0..nk).filter(|&b| b != a) {
                    rss += m(a) * m(b) * fs.gram[(i, a * nk + b)];
                }
            }
            rss
        })
        .collect()
}

fn tau_step(v: &mut VariationalState, lay: &Layout, hyper: &Hyperparameters, rss: &[f64], i: usize) {
    v.a_tau[i] = hyper.a_tau + 0.5 * lay.n_obs[i];
    v.b_tau[i] = hyper.b_tau + 0.5 * rss[i];
}

fn alpha_step(v: &mut VariationalState, hyper: &Hyperparameters, k: usize) {
    let mut eta_sum = 0.0;
    let mut second = 0.0;
    for i in 0..v.n_features() {
        let eta = v.eta[(i, k)];
        eta_sum += eta;
        second += eta * (v.var_l[(i, k)] + v.mu_l[(i, k)].powi(2));
    }
    v.a_alpha[k] = hyper.a_alpha + 0.5 * eta_sum;
    v.b_alpha[k] = hyper.b_alpha + 0.5 * second;
}

fn eln_alpha(v: &VariationalState, k: usize) -> f64 {
    digamma(v.a_alpha[k]) - v.b_alpha[k].ln()
}

/// Update `q(l_ik, z_ik)`; returns the log-odds that set `η_ik`.
pub fn update_lz(v: &mut VariationalState, data: &Dataset, hyper: &Hyperparameters, i: usize, k: usize) -> Result<f64> {
    v.check_against(data, hyper)?;
    let fs = FStats::new(v, &Layout::new(data));
    let (et, ea, ela) = (v.a_tau[i] / v.b_tau[i], v.a_alpha[k] / v.b_alpha[k], eln_alpha(v, k));
    Ok(lz_step(v, hyper, &fs, et, ea, ela, i, k))
}

pub fn update_f(v: &mut VariationalState, data: &Dataset, hyper: &Hyperparameters, k: usize, j: usize) -> Result<()> {
    v.check_against(data, hyper)?;
    let ls = LStats::new(v, &Layout::new(data), &v.mean_tau());
    f_step(v, &ls, k, j);
    Ok(())
}

pub fn update_tau(v: &mut VariationalState, data: &Dataset, hyper: &Hyperparameters, i: usize) -> Result<()> {
    v.check_against(data, hyper)?;
    let lay = Layout::new(data);
    let rss = expected_rss(v, &lay, &FStats::new(v, &lay));
    tau_step(v, &lay, hyper, &rss, i);
    Ok(())
}

pub fn update_alpha(v: &mut VariationalState, hyper: &Hyperparameters, k: usize) -> Result<()> {
    v.validate()?;
    alpha_step(v, hyper, k);
    Ok(())
}

/// `ψ(a)` and `ln Γ(a)`, reusing the last result when `a` repeats. Shapes
/// often coincide, e.g. every `q(τ_i)` has the same shape without masking.
/// Also holds the prior's normaliser `a0 ln b0 - ln Γ(a0)`.
struct GammaFns {
    last: Option<(f64, f64, f64)>,
    prior_norm: f64,
}

impl GammaFns {
    fn new(a0: f64, b0: f64) -> Self {
        GammaFns {
            last: None,
            prior_norm: a0 * b0.ln() - ln_gamma(a0),
        }
    }

    fn eval(&mut self, a: f64) -> (f64, f64) {
        match self.last {
            Some((x, d, l)) if x == a => (d, l),
            _ => {
                let (d, l) = (digamma(a), ln_gamma(a));
                self.last = Some((a, d, l));
                (d, l)
            }
        }
    }
}

/// `E_q[ln p(x)] + H[q]` for a gamma prior `(a0, b0)` and gamma `q` with
/// shape `a` and rate `b`. Also returns `E_q[ln x]`.
fn gamma_terms(a0: f64, b0: f64, a: f64, b: f64, fns: &mut GammaFns) -> (f64, f64) {
    let (dg, lg) = fns.eval(a);
    let ln_b = b.ln();
    let eln = dg - ln_b;
    let prior = fns.prior_norm + (a0 - 1.0) * eln - b0 * a / b;
    let entropy = a - ln_b + lg + (1.0 - a) * dg;
    (prior + entropy, eln)
}

fn elbo_with(v: &VariationalState, lay: &Layout, hyper: &Hyperparameters, rss: &[f64]) -> f64 {
    let (g, k, n) = (v.n_features(), v.n_factors(), v.n_samples());
    let mut total = 0.0;
    let mut fns = GammaFns::new(hyper.a_tau, hyper.b_tau);
    for i in 0..g {
        let (terms, eln_t) = gamma_terms(hyper.a_tau, hyper.b_tau, v.a_tau[i], v.b_tau[i], &mut fns);
        let et = v.a_tau[i] / v.b_tau[i];
        total += 0.5 * lay.n_obs[i] * (eln_t - LN_2PI) - 0.5 * et * rss[i] + terms;
    }
    let mut fns = GammaFns::new(hyper.a_alpha, hyper.b_alpha);
    for c in 0..k {
        let (terms, eln_a) = gamma_terms(hyper.a_alpha, hyper.b_alpha, v.a_alpha[c], v.b_alpha[c], &mut fns);
        total += terms;
        let ea = v.a_alpha[c] / v.b_alpha[c];
        let pi = hyper.pi[c];
        let (ln_pi, ln_not_pi) = (pi.ln(), (1.0 - pi).ln());
        for i in 0..g {
            let eta = v.eta[(i, c)];
            let var = v.var_l[(i, c)];
            let second = v.mu_l[(i, c)].powi(2) + var;
            total += 0.5 * eta * (eln_a - LN_2PI - ea * second);
            if eta > 0.0 {
                total += eta * ln_pi;
            }
            if eta < 1.0 {
                total += (1.0 - eta) * ln_not_pi;
            }
            total += 0.5 * eta * (LN_2PI + var.ln() + 1.0) - xlogx(eta) - xlogx(1.0 - eta);
        }
        let mut ln_var = (f64::NAN, 0.0);
        for j in 0..n {
            let vf = v.var_f[(c, j)];
            if vf != ln_var.0 {
                ln_var = (vf, vf.ln());
            }
            total += -0.5 * (v.mu_f[(c, j)].powi(2) + vf + LN_2PI) + 0.5 * (LN_2PI + ln_var.1 + 1.0);
        }
    }
    total
}

/// Evidence lower bound. The point-mass terms of the loading prior and of
/// `q(l, z)` cancel and are left out of both.
pub fn compute_elbo(v: &VariationalState, data: &Dataset, hyper: &Hyperparameters) -> Result<f64> {
    v.check_against(data, hyper)?;
    let lay = Layout::new(data);
    let rss = expected_rss(v, &lay, &FStats::new(v, &lay));
    Ok(elbo_with(v, &lay, hyper, &rss))
}

/// Variance of every `q(l_ik | z_ik = 1)` and `q(f_kj)` at initialisation.
pub const INIT_VARIANCE: f64 = 0.1;

/// Random starting point: `η ~ U(0.25, 0.75)` (exactly 1 on factors with
/// `π_k = 1`), standard normal means, variances [`INIT_VARIANCE`], and
/// `q(τ_i) = q(α_k) = Gamma(1, 1)`, which matches the unit scale of the
/// means whatever the prior.
pub fn random_init(data: &Dataset, hyper: &Hyperparameters, seed: u64) -> Result<VariationalState> {
    hyper.validate()?;
    let (g, k, n) = (data.n_features(), hyper.k(), data.n_samples());
    let mut rng = rng_from_seed(seed);
    let eta = DMatrix::from_fn(g, k, |_, c| {
        let u = rng.random_range(0.25..0.75);
        if hyper.pi[c] >= 1.0 {
            1.0
        } else {
            u
        }
    });
    let mu_l = DMatrix::from_fn(g, k, |_, _| standard_normal(&mut rng));
    let mu_f = DMatrix::from_fn(k, n, |_, _| standard_normal(&mut rng));
    Ok(VariationalState {
        eta,
        mu_l,
        var_l: DMatrix::from_element(g, k, INIT_VARIANCE),
        mu_f,
        var_f: DMatrix::from_element(k, n, INIT_VARIANCE),
        a_tau: DVector::from_element(g, 1.0),
        b_tau: DVector::from_element(g, 1.0),
        a_alpha: DVector::from_element(k, 1.0),
        b_alpha: DVector::from_element(k, 1.0),
    })
}

/// A CAVI run that can be advanced in stages.
pub struct CaviEngine<'a> {
    hyper: &'a Hyperparameters,
    layout: Layout,
    config: CaviConfig,
    state: VariationalState,
    /// Statistics of the current `q(F)`.
    fstats: FStats,
    trace: Vec<ElboPoint>,
    sweeps: usize,
    converged: bool,
    elapsed: f64,
}

impl<'a> CaviEngine<'a> {
    pub fn new(data: &'a Dataset, hyper: &'a Hyperparameters, config: &CaviConfig) -> Result<Self> {
        config.validate()?;
        hyper.validate()?;
        if hyper.k() == 0 {
            return Err(Error::InvalidParameter("at least one factor is required".into()));
        }
        let state = match &config.init {
            VariationalInit::Random => random_init(data, hyper, config.seed)?,
            VariationalInit::Supplied(v) => (**v).clone(),
        };
        state.check_against(data, hyper)?;
        let layout = Layout::new(data);
        let fstats = FStats::new(&state, &layout);
        Ok(CaviEngine {
            hyper,
            layout,
            config: config.clone(),
            state,
            fstats,
            trace: Vec::new(),
            sweeps: 0,
            converged: false,
            elapsed: 0.0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.converged || self.sweeps >= self.config.max_sweeps
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn trace(&self) -> &[ElboPoint] {
        &self.trace
    }

    pub fn latest_elbo(&self) -> Option<f64> {
        self.trace.last().map(|p| p.elbo)
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    /// Wall-clock seconds spent in sweeps so far.
    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    /// One sweep; returns the expected residual sums it ended with.
    fn sweep(&mut self) -> Vec<f64> {
        let (g, k, n) = (self.state.n_features(), self.state.n_factors(), self.state.n_samples());
        let (v, lay, hyper) = (&mut self.state, &self.layout, self.hyper);
        let e_tau = v.mean_tau();
        let e_alpha = v.mean_alpha();
        let eln: Vec<f64> = (0..k).map(|c| eln_alpha(v, c)).collect();
        for i in 0..g {
            for c in 0..k {
                lz_step(v, hyper, &self.fstats, e_tau[i], e_alpha[c], eln[c], i, c);
            }
        }
        // Columns of F are conditionally independent given L, so visiting
        // them column by column gives the same result as factor by factor.
        let ls = LStats::new(v, lay, &e_tau);
        for j in 0..n {
            for c in 0..k {
                f_step(v, &ls, c, j);
            }
        }
        self.fstats = FStats::new(v, lay);
        let rss = expected_rss(v, lay, &self.fstats);
        for i in 0..g {
            tau_step(v, lay, hyper, &rss, i);
        }
        for c in 0..k {
            alpha_step(v, hyper, c);
        }
        rss
    }

    /// Run sweeps until `limit` sweeps have been done in total, the run
    /// converges, or `max_sweeps` is reached.
    pub fn advance_to(&mut self, limit: usize) -> Result<()> {
        let start = Instant::now();
        let base = self.elapsed;
        let limit = limit.min(self.config.max_sweeps);
        while !self.converged && self.sweeps < limit {
            let rss = self.sweep();
            self.sweeps += 1;
            if !self.sweeps.is_multiple_of(self.config.elbo_every) && self.sweeps < self.config.max_sweeps {
                continue;
            }
            // L and F are unchanged since the residuals were taken.
            let elbo = elbo_with(&self.state, &self.layout, self.hyper, &rss);
            if !elbo.is_finite() {
                return Err(Error::NonFiniteElbo { sweep: self.sweeps });
            }
            if let Some(prev) = self.latest_elbo() {
                let delta = (elbo - prev).abs();
                if delta < self.config.abs_tol || delta / elbo.abs() < self.config.rel_tol {
                    self.converged = true;
                }
            }
            self.trace.push(ElboPoint {
                sweep: self.sweeps,
                elbo,
                elapsed: base + start.elapsed().as_secs_f64(),
            });
        }
        self.elapsed = base + start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn finish(mut self) -> Result<CaviRun> {
        self.advance_to(self.config.max_sweeps)?;
        Ok(self.into_run())
    }

    pub fn into_run(self) -> CaviRun {
        CaviRun {
            state: self.state,
            trace: self.trace,
            sweeps: self.sweeps,
            converged: self.converged,
            seed: self.config.seed,
        }
    }
}

pub fn run_cavi(data: &Dataset, hyper: &Hyperparameters, config: &CaviConfig) -> Result<CaviRun> {
    CaviEngine::new(data, hyper, config)?.finish()
}

/// Seeds for a multi-trial run: trial 0 uses the configured seed, later
/// trials use seeds split from it.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    (0..trials)
        .map(|t| if t == 0 { master } else { derive_seed(master, t as u64) })
        .collect()
}

/// Independent runs, one per seed, in parallel on the current rayon pool.
pub fn run_trials(data: &Dataset, hyper: &Hyperparameters, config: &CaviConfig, seeds: &[u64]) -> Result<Vec<CaviRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = CaviConfig { seed, ..config.clone() };
            run_cavi(data, hyper, &cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTrial {
    pub runs: Vec<CaviRun>,
    pub best: usize,
    /// Sweep budget after which non-leading trials were stopped, if any.
    pub early_stop: Option<usize>,
}

impl MultiTrial {
    pub fn best_run(&self) -> &CaviRun {
        &self.runs[self.best]
    }
}

/// Index of the largest final ELBO; the first index wins ties.
pub fn best_index(elbos: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (t, e) in elbos.enumerate() {
        if e > best.1 {
            best = (t, e);
        }
    }
    best.0
}

/// Run `trials` trials and keep the one with the largest final ELBO. With
/// `early_stop = Some(s)`, every trial runs at most `s` sweeps, then only the
/// leader continues to convergence.
pub fn run_multi_trial(
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &CaviConfig,
    trials: usize,
    early_stop: Option<usize>,
) -> Result<MultiTrial> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let seeds = trial_seeds(config.seed, trials);
    run_seeded_trials(data, hyper, config, &seeds, early_stop)
}

pub fn run_seeded_trials(
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &CaviConfig,
    seeds: &[u64],
    early_stop: Option<usize>,
) -> Result<MultiTrial> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let Some(budget) = early_stop else {
        let runs = run_trials(data, hyper, config, seeds)?;
        let best = best_index(runs.iter().map(|r| r.final_elbo().unwrap_or(f64::NEG_INFINITY)));
        return Ok(MultiTrial { runs, best, early_stop: None });
    };
    let mut engines: Vec<CaviEngine<'_>> = seeds
        .par_iter()
        .map(|&seed| -> Result<CaviEngine<'_>> {
            let mut e = CaviEngine::new(data, hyper, &CaviConfig { seed, ..config.clone() })?;
            e.advance_to(budget)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let best = best_index(engines.iter().map(|e| e.latest_elbo().unwrap_or(f64::NEG_INFINITY)));
    engines[best].advance_to(config.max_sweeps)?;
    Ok(MultiTrial {
        runs: engines.into_iter().map(CaviEngine::into_run).collect(),
        best,
        early_stop: Some(budget),
    })
}
