//! Synthetic datasets with a known ground truth and a controlled
//! signal-to-noise ratio.
//!
//! Active loadings and all activations are standard normal. The noise
//! precision of feature `i` is `snr / V_i`, where `V_i` is the sample variance
//! (denominator `N - 1`) of row `i` of `L F`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::standard_normal;
use crate::model::{Dataset, ModelState};
use crate::seed::rng_from_seed;

/// Rows whose signal variance comes out as zero are redrawn at most this often.
pub const MAX_ROW_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub g: usize,
    pub n: usize,
    pub k: usize,
    pub pi: Vec<f64>,
    pub snr: f64,
    pub seed: u64,
}

impl SimulationSpec {
    /// 800 features, 100 samples, five sparse factors of increasing density
    /// and one dense factor.
    pub fn reference(snr: f64, seed: u64) -> Self {
        SimulationSpec {
            g: 800,
            n: 100,
            k: 6,
            pi: vec![0.075, 0.15, 0.25, 0.375, 0.5, 1.0],
            snr,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.k == 0 {
            return Err(Error::InvalidParameter("g and k must be positive".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidParameter("n must be at least 2 to form a sample variance".into()));
        }
        if self.pi.len() != self.k {
            return Err(Error::Dimension(format!("pi has {} entries but k = {}", self.pi.len(), self.k)));
        }
        if let Some(p) = self.pi.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidParameter(format!("pi entry {p} is outside (0, 1]")));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::InvalidParameter(format!("snr = {} must be positive", self.snr)));
        }
        Ok(())
    }
}

pub fn sample_variance(xs: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Draw a dataset and the parameters that generated it. The returned truth
/// has `α = 1` for every factor.
pub fn simulate(spec: &SimulationSpec) -> Result<(Dataset, ModelState)> {
    spec.validate()?;
    let (g, n, k) = (spec.g, spec.n, spec.k);
    let mut rng = rng_from_seed(spec.seed);

    let f = DMatrix::from_fn(k, n, |_, _| standard_normal(&mut rng));
    let mut l = DMatrix::zeros(g, k);
    let mut z = DMatrix::from_element(g, k, false);
    let mut tau = DVector::zeros(g);
    let mut y = DMatrix::zeros(g, n);

    for i in 0..g {
        let mut attempts = 0;
        let variance = loop {
            attempts += 1;
            for c in 0..k {
                let active = rng.random_bool(spec.pi[c]);
                z[(i, c)] = active;
                l[(i, c)] = if active { standard_normal(&mut rng) } else { 0.0 };
            }
            let signal = l.row(i) * &f;
            let v = sample_variance(signal.iter().copied());
            if v > 0.0 && v.is_finite() {
                break v;
            }
            if attempts >= MAX_ROW_ATTEMPTS {
                return Err(Error::DegenerateSignal { row: i, attempts });
            }
        };
        tau[i] = spec.snr / variance;
        let sd = tau[i].sqrt().recip();
        for j in 0..n {
            let mean: f64 = (0..k).map(|c| l[(i, c)] * f[(c, j)]).sum();
            y[(i, j)] = mean + sd * standard_normal(&mut rng);
        }
    }

    let truth = ModelState {
        l,
        f,
        z,
        tau,
        alpha: DVector::from_element(k, 1.0),
    };
    Ok((Dataset::new(y)?, truth))
}
