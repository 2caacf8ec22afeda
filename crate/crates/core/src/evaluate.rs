//! Posterior summaries and accuracy metrics.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cavi::VariationalState;
use crate::error::{Error, Result};
use crate::gibbs::SampleChain;
use crate::model::{Dataset, ModelState};
use crate::relabel::{assign_sample, Action, Relabelling};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gibbs,
    Cavi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean_l: DMatrix<f64>,
    pub mean_z: DMatrix<f64>,
    pub mean_f: DMatrix<f64>,
    pub mean_lf: DMatrix<f64>,
    pub source: Source,
}

impl PosteriorSummary {
    /// Relabel the factor blocks. `mean_lf` is unaffected.
    pub fn relabel(&self, r: &Relabelling) -> PosteriorSummary {
        let z = &self.mean_z;
        PosteriorSummary {
            mean_l: r.apply_l(&self.mean_l),
            mean_z: DMatrix::from_fn(z.nrows(), z.ncols(), |i, k| z[(i, r.sigma[k])]),
            mean_f: r.apply_f(&self.mean_f),
            mean_lf: self.mean_lf.clone(),
            source: self.source,
        }
    }
}

/// Running sums of sampled states; the mean of `LF` is accumulated from the
/// per-sample products.
#[derive(Debug, Clone)]
pub struct RunningMean {
    sum_l: DMatrix<f64>,
    sum_z: DMatrix<f64>,
    sum_f: DMatrix<f64>,
    sum_lf: DMatrix<f64>,
    count: usize,
}

impl RunningMean {
    pub fn new(g: usize, k: usize, n: usize) -> Self {
        RunningMean {
            sum_l: DMatrix::zeros(g, k),
            sum_z: DMatrix::zeros(g, k),
            sum_f: DMatrix::zeros(k, n),
            sum_lf: DMatrix::zeros(g, n),
            count: 0,
        }
    }

    pub fn push(&mut self, s: &ModelState) {
        self.sum_l += &s.l;
        self.sum_z += s.z.map(|z| if z { 1.0 } else { 0.0 });
        self.sum_f += &s.f;
        self.sum_lf += &s.l * &s.f;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn summary(&self) -> Result<PosteriorSummary> {
        if self.count == 0 {
            return Err(Error::InvalidData("cannot summarise an empty chain".into()));
        }
        let t = self.count as f64;
        Ok(PosteriorSummary {
            mean_l: &self.sum_l / t,
            mean_z: &self.sum_z / t,
            mean_f: &self.sum_f / t,
            mean_lf: &self.sum_lf / t,
            source: Source::Gibbs,
        })
    }
}

/// Elementwise averages over the kept samples of one or more chains.
pub fn summarize_chains(chains: &[SampleChain]) -> Result<PosteriorSummary> {
    let first = chains
        .iter()
        .find_map(|c| c.samples.first())
        .ok_or_else(|| Error::InvalidData("cannot summarise an empty chain".into()))?;
    let mut acc = RunningMean::new(first.n_features(), first.n_factors(), first.n_samples());
    for s in chains.iter().flat_map(|c| &c.samples) {
        if s.l.shape() != first.l.shape() || s.f.shape() != first.f.shape() {
            return Err(Error::Dimension("chains disagree in shape".into()));
        }
        acc.push(s);
    }
    acc.summary()
}

pub fn summarize_chain(chain: &SampleChain) -> Result<PosteriorSummary> {
    summarize_chains(std::slice::from_ref(chain))
}

pub fn summarize_variational(v: &VariationalState) -> PosteriorSummary {
    PosteriorSummary {
        mean_l: v.mean_l(),
        mean_z: v.eta.clone(),
        mean_f: v.mu_f.clone(),
        mean_lf: v.mean_lf(),
        source: Source::Cavi,
    }
}

/// Permute and sign-flip the summary's factors to best match the truth's
/// activations, scored as in relabelling with the truth as a unit-variance
/// reference. No rescaling.
pub fn align_to_truth(summary: &PosteriorSummary, truth: &ModelState) -> Result<(PosteriorSummary, Relabelling)> {
    if summary.mean_f.shape() != truth.f.shape() || summary.mean_l.shape() != truth.l.shape() {
        return Err(Error::Dimension(format!(
            "summary has F {:?} and L {:?}, truth has F {:?} and L {:?}",
            summary.mean_f.shape(),
            summary.mean_l.shape(),
            truth.f.shape(),
            truth.l.shape()
        )));
    }
    let action = Action {
        m_f: truth.f.clone(),
        s2_f: DMatrix::from_element(truth.f.nrows(), truth.f.ncols(), 1.0),
    };
    let r = assign_sample(&action, &summary.mean_f)?;
    Ok((summary.relabel(&r), r))
}

/// Share of entries where the rounded posterior mean equals the truth.
/// A mean of exactly 0.5 rounds to 1.
pub fn z_accuracy(mean_z: &DMatrix<f64>, true_z: &DMatrix<bool>) -> Result<f64> {
    if mean_z.shape() != true_z.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", mean_z.shape(), true_z.shape())));
    }
    if mean_z.is_empty() {
        return Err(Error::InvalidData("empty connectivity matrix".into()));
    }
    let hits = mean_z.iter().zip(true_z.iter()).filter(|(&m, &t)| (m >= 0.5) == t).count();
    Ok(hits as f64 / mean_z.len() as f64)
}

/// `sqrt(Σ (est - truth)² / Σ truth²)`.
pub fn rrmse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", estimate.shape(), truth.shape())));
    }
    rrmse_pairs(estimate.iter().copied().zip(truth.iter().copied()))
}

fn rrmse_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (e, t) in pairs {
        num += (e - t) * (e - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::InvalidData("relative error against an all-zero truth is undefined".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub z_accuracy: f64,
    pub rrmse_l: f64,
    pub rrmse_f: f64,
    pub rrmse_lf: f64,
}

impl Metrics {
    pub fn rows(&self) -> Vec<(String, f64)> {
        vec![
            ("z_accuracy".into(), self.z_accuracy),
            ("rrmse_l".into(), self.rrmse_l),
            ("rrmse_f".into(), self.rrmse_f),
            ("rrmse_lf".into(), self.rrmse_lf),
        ]
    }
}

/// Align to the truth, then score every block.
pub fn evaluate_against_truth(summary: &PosteriorSummary, truth: &ModelState) -> Result<(Metrics, PosteriorSummary)> {
    let (aligned, _) = align_to_truth(summary, truth)?;
    let metrics = Metrics {
        z_accuracy: z_accuracy(&aligned.mean_z, &truth.z)?,
        rrmse_l: rrmse(&aligned.mean_l, &truth.l)?,
        rrmse_f: rrmse(&aligned.mean_f, &truth.f)?,
        rrmse_lf: rrmse(&aligned.mean_lf, &(&truth.l * &truth.f))?,
    };
    Ok((metrics, aligned))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillInSplit {
    pub masked: Dataset,
    /// Held-out `(row, column)` pairs in the order they were drawn.
    pub heldout: Vec<(usize, usize)>,
}

/// Hold out `round(fraction × observed)` observed entries chosen uniformly
/// at random, never leaving a row or column without an observed entry.
/// Entries whose removal would do so are skipped and the next candidate in
/// the shuffled order is taken.
pub fn make_fill_in_split(data: &Dataset, fraction: f64, seed: u64) -> Result<FillInSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("fill-in fraction {fraction} is outside (0, 1)")));
    }
    let (g, n) = (data.n_features(), data.n_samples());
    let mut candidates: Vec<(usize, usize)> = (0..g)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| data.is_observed(i, j))
        .collect();
    let target = (fraction * candidates.len() as f64).round() as usize;
    if target == 0 {
        return Err(Error::InvalidParameter(format!(
            "fraction {fraction} of {} observed entries holds out nothing",
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng_from_seed(seed));
    let mut row_left: Vec<usize> = (0..g).map(|i| data.row_observed_count(i)).collect();
    let mut col_left: Vec<usize> = (0..n).map(|j| (0..g).filter(|&i| data.is_observed(i, j)).count()).collect();
    let mut mask = data.mask().clone();
    let mut heldout = Vec::with_capacity(target);
    for (i, j) in candidates {
        if heldout.len() == target {
            break;
        }
        if row_left[i] > 1 && col_left[j] > 1 {
            row_left[i] -= 1;
            col_left[j] -= 1;
            mask[(i, j)] = false;
            heldout.push((i, j));
        }
    }
    if heldout.len() < target {
        return Err(Error::InvalidData(format!(
            "only {} of {target} entries can be held out while keeping every row and column observed",
            heldout.len()
        )));
    }
    Ok(FillInSplit {
        masked: Dataset::with_mask(data.y().clone(), mask)?,
        heldout,
    })
}

/// RRMSE of the predicted `LF` on the held-out entries.
pub fn fill_in_rrmse(summary: &PosteriorSummary, full: &Dataset, heldout: &[(usize, usize)]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::InvalidData("no held-out entries".into()));
    }
    if summary.mean_lf.shape() != full.y().shape() {
        return Err(Error::Dimension("summary and data disagree in shape".into()));
    }
    rrmse_pairs(heldout.iter().map(|&(i, j)| (summary.mean_lf[(i, j)], full.y()[(i, j)])))
}

/// `(row, column, observed, predicted, residual)` for each held-out entry.
pub fn residual_table(summary: &PosteriorSummary, full: &Dataset, heldout: &[(usize, usize)]) -> Vec<[f64; 5]> {
    heldout
        .iter()
        .map(|&(i, j)| {
            let y = full.y()[(i, j)];
            let p = summary.mean_lf[(i, j)];
            [i as f64, j as f64, y, p, y - p]
        })
        .collect()
}
