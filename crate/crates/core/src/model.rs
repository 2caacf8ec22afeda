//! Types of the sparse factor model and exact log-density evaluation.
//!
//! The data matrix `Y` (features × samples) is modelled as `L F + E` with
//! feature-specific Gaussian noise precision `τ_i`. Loadings follow a
//! spike-and-slab prior: `l_ik = 0` when `z_ik = 0`, and `l_ik ~ N(0, 1/α_k)`
//! when `z_ik = 1`, with `z_ik ~ Bernoulli(π_k)`. Activations have a standard
//! normal prior and both precision families have gamma priors.
//!
//! The Dirac point-mass terms `log δ₀(0)` of inactive loadings are left out of
//! [`log_joint`]. The variational entropy in [`crate::cavi`] leaves out the
//! matching terms, so the two conventions cancel consistently.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_gamma_pdf, ln_normal_pdf};

/// Observation matrix with a mask of observed entries (`true` = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl Dataset {
    /// Fully observed dataset.
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(y.nrows(), y.ncols(), true);
        Self::with_mask(y, mask)
    }

    /// Dataset with an explicit observation mask. Values stored at masked
    /// entries are never read by any likelihood computation.
    ///
    /// Only the shapes are checked here; use [`Dataset::check_coverage`] to
    /// reject datasets with an unobserved row or column.
    pub fn with_mask(y: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(Error::InvalidData("dataset must have at least one row and one column".into()));
        }
        if mask.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "mask is {}x{} but data is {}x{}",
                mask.nrows(),
                mask.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        for i in 0..y.nrows() {
            for j in 0..y.ncols() {
                if mask[(i, j)] && !y[(i, j)].is_finite() {
                    return Err(Error::InvalidData(format!("observed entry ({i}, {j}) is not finite")));
                }
            }
        }
        Ok(Dataset { y, mask })
    }

    /// Every row and every column must hold at least one observed entry.
    pub fn check_coverage(&self) -> Result<()> {
        for i in 0..self.n_features() {
            if self.row_observed_count(i) == 0 {
                return Err(Error::InvalidData(format!("feature {i} has no observed entries")));
            }
        }
        for j in 0..self.n_samples() {
            if !self.mask.column(j).iter().any(|&m| m) {
                return Err(Error::InvalidData(format!("sample {j} has no observed entries")));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn row_observed_count(&self, i: usize) -> usize {
        self.mask.row(i).iter().filter(|&&m| m).count()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// Prior hyperparameters: per-factor inclusion probabilities and the
/// shape-rate parameters of the two gamma priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub pi: Vec<f64>,
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
}

impl Hyperparameters {
    pub const VAGUE: f64 = 1e-3;

    pub fn new(pi: Vec<f64>, a_tau: f64, b_tau: f64, a_alpha: f64, b_alpha: f64) -> Result<Self> {
        let h = Hyperparameters {
            pi,
            a_tau,
            b_tau,
            a_alpha,
            b_alpha,
        };
        h.validate()?;
        Ok(h)
    }

    /// All gamma parameters set to `1e-3`.
    pub fn vague(pi: Vec<f64>) -> Result<Self> {
        Self::new(pi, Self::VAGUE, Self::VAGUE, Self::VAGUE, Self::VAGUE)
    }

    /// `π = 0.1` for each sparse factor followed by `π = 0.9` for each dense one.
    pub fn sparse_dense(sparse: usize, dense: usize) -> Vec<f64> {
        let mut pi = vec![0.1; sparse];
        pi.extend(std::iter::repeat_n(0.9, dense));
        pi
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.is_empty() {
            return Err(Error::InvalidParameter("pi must have at least one factor".into()));
        }
        for (k, &p) in self.pi.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParameter(format!("pi[{k}] = {p} is outside (0, 1]")));
            }
        }
        for (name, v) in [
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }
}

/// One joint configuration of all model parameters.
///
/// `l` and `z` are `G × K`, `f` is `K × N`, `tau` has length `G` and
/// `alpha` has length `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub l: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub z: DMatrix<bool>,
    pub tau: DVector<f64>,
    pub alpha: DVector<f64>,
}

impl ModelState {
    pub fn n_features(&self) -> usize {
        self.l.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.l.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.f.ncols()
    }

    /// Internal shape consistency plus positivity of the precisions.
    pub fn check_shapes(&self) -> Result<()> {
        let (g, k) = self.l.shape();
        if self.z.shape() != (g, k) {
            return Err(Error::Dimension(format!("z is {:?} but l is {:?}", self.z.shape(), (g, k))));
        }
        if self.f.nrows() != k {
            return Err(Error::Dimension(format!("f has {} rows but l has {k} columns", self.f.nrows())));
        }
        if self.tau.len() != g {
            return Err(Error::Dimension(format!("tau has length {} but there are {g} features", self.tau.len())));
        }
        if self.alpha.len() != k {
            return Err(Error::Dimension(format!("alpha has length {} but there are {k} factors", self.alpha.len())));
        }
        if let Some(i) = self.tau.iter().position(|&t| !(t > 0.0)) {
            return Err(Error::InvalidParameter(format!("tau[{i}] = {} is not positive", self.tau[i])));
        }
        if let Some(k) = self.alpha.iter().position(|&a| !(a > 0.0)) {
            return Err(Error::InvalidParameter(format!("alpha[{k}] = {} is not positive", self.alpha[k])));
        }
        Ok(())
    }

    /// `l[i,k] == 0` wherever `z[i,k]` is inactive.
    pub fn check_spike(&self) -> Result<()> {
        for k in 0..self.n_factors() {
            for i in 0..self.n_features() {
                if !self.z[(i, k)] && self.l[(i, k)] != 0.0 {
                    return Err(Error::SpikeViolation {
                        row: i,
                        factor: k,
                        value: self.l[(i, k)],
                    });
                }
            }
        }
        Ok(())
    }

    /// Full consistency check against a dataset and hyperparameters.
    pub fn check_against(&self, data: &Dataset, hyper: Option<&Hyperparameters>) -> Result<()> {
        self.check_shapes()?;
        if self.n_features() != data.n_features() || self.n_samples() != data.n_samples() {
            return Err(Error::Dimension(format!(
                "state is {}x{} but data is {}x{}",
                self.n_features(),
                self.n_samples(),
                data.n_features(),
                data.n_samples()
            )));
        }
        if let Some(h) = hyper {
            if h.k() != self.n_factors() {
                return Err(Error::Dimension(format!(
                    "hyperparameters have {} factors but state has {}",
                    h.k(),
                    self.n_factors()
                )));
            }
        }
        Ok(())
    }

    /// Entry `(i, j)` of `L F`.
    pub fn predict(&self, i: usize, j: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..self.n_factors() {
            s += self.l[(i, k)] * self.f[(k, j)];
        }
        s
    }
}

/// Gaussian log-likelihood of the observed entries.
pub fn log_likelihood(state: &ModelState, data: &Dataset) -> Result<f64> {
    state.check_against(data, None)?;
    let lf = &state.l * &state.f;
    let mut total = 0.0;
    for j in 0..data.n_samples() {
        for i in 0..data.n_features() {
            if data.is_observed(i, j) {
                total += ln_normal_pdf(data.y()[(i, j)], lf[(i, j)], 1.0 / state.tau[i]);
            }
        }
    }
    Ok(total)
}

/// Sum of the log prior densities of all parameters (Dirac terms excluded).
pub fn log_prior(state: &ModelState, hyper: &Hyperparameters) -> Result<f64> {
    state.check_shapes()?;
    state.check_spike()?;
    if hyper.k() != state.n_factors() {
        return Err(Error::Dimension(format!(
            "hyperparameters have {} factors but state has {}",
            hyper.k(),
            state.n_factors()
        )));
    }
    let mut total = 0.0;
    for k in 0..state.n_factors() {
        let alpha = state.alpha[k];
        let pi = hyper.pi[k];
        for i in 0..state.n_features() {
            if state.z[(i, k)] {
                total += pi.ln() + ln_normal_pdf(state.l[(i, k)], 0.0, 1.0 / alpha);
            } else {
                total += (1.0 - pi).ln();
            }
        }
        total += ln_gamma_pdf(alpha, hyper.a_alpha, hyper.b_alpha);
    }
    total += state.f.iter().map(|&f| ln_normal_pdf(f, 0.0, 1.0)).sum::<f64>();
    total += state.tau.iter().map(|&t| ln_gamma_pdf(t, hyper.a_tau, hyper.b_tau)).sum::<f64>();
    Ok(total)
}

/// Log joint density `log p(Y, L, F, Z, τ, α)` over the observed entries.
pub fn log_joint(state: &ModelState, data: &Dataset, hyper: &Hyperparameters) -> Result<f64> {
    state.check_against(data, Some(hyper))?;
    Ok(log_likelihood(state, data)? + log_prior(state, hyper)?)
}
