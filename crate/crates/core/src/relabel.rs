//! Relabelling of posterior samples.
//!
//! The model is invariant to permuting factors and to flipping the sign of a
//! factor's loadings and activations together, so samples from different
//! chains (or from one chain that switched modes) are not directly
//! comparable. Each sample gets a permutation `σ` and signs `ν`; relabelled
//! factor `k` is `ν_σ(k)` times original factor `σ(k)`.
//!
//! The relabellings minimise a Monte Carlo risk: the negative log-density of
//! each relabelled `F` under an independent normal "action" with per-entry
//! means and variances. The action and the relabellings are optimised
//! alternately. Given the relabellings the best action is the per-entry
//! sample mean and (1/T) variance; given the action each sample's best
//! relabelling is a linear assignment problem over a `K × K` cost matrix
//! whose cells already take the better of the two signs.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::SampleChain;
use crate::lap;
use crate::math::ln_normal_pdf;
use crate::model::ModelState;

/// Smallest variance the action may hold.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub const DEFAULT_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relabelling {
    pub sigma: Vec<usize>,
    pub nu: Vec<i8>,
}

impl Relabelling {
    pub fn identity(k: usize) -> Self {
        Relabelling {
            sigma: (0..k).collect(),
            nu: vec![1; k],
        }
    }

    pub fn new(sigma: Vec<usize>, nu: Vec<i8>) -> Result<Self> {
        let r = Relabelling { sigma, nu };
        r.validate()?;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(k, &s)| k == s) && self.nu.iter().all(|&n| n == 1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.sigma.len();
        if self.nu.len() != k {
            return Err(Error::Dimension(format!("sigma has {k} entries but nu has {}", self.nu.len())));
        }
        let mut seen = vec![false; k];
        for &s in &self.sigma {
            if s >= k || seen[s] {
                return Err(Error::InvalidParameter(format!("{:?} is not a permutation", self.sigma)));
            }
            seen[s] = true;
        }
        if self.nu.iter().any(|&n| n != 1 && n != -1) {
            return Err(Error::InvalidParameter("signs must be ±1".into()));
        }
        Ok(())
    }

    /// The relabelling that undoes this one.
    pub fn inverse(&self) -> Self {
        let k = self.len();
        let mut sigma = vec![0; k];
        for (k_new, &k_old) in self.sigma.iter().enumerate() {
            sigma[k_old] = k_new;
        }
        // Signs are indexed by source factor, which for the inverse is the
        // relabelled factor.
        let nu = (0..k).map(|m| self.nu[self.sigma[m]]).collect();
        Relabelling { sigma, nu }
    }

    fn sign(&self, k: usize) -> f64 {
        f64::from(self.nu[self.sigma[k]])
    }

    /// Relabel the rows of a `K × N` activation matrix.
    pub fn apply_f(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(f.nrows(), f.ncols(), |k, j| self.sign(k) * f[(self.sigma[k], j)])
    }

    /// Relabel the columns of a `G × K` loading matrix.
    pub fn apply_l(&self, l: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(l.nrows(), l.ncols(), |i, k| self.sign(k) * l[(i, self.sigma[k])])
    }

    pub fn apply_state(&self, s: &ModelState) -> ModelState {
        ModelState {
            l: self.apply_l(&s.l),
            f: self.apply_f(&s.f),
            z: DMatrix::from_fn(s.z.nrows(), s.z.ncols(), |i, k| s.z[(i, self.sigma[k])]),
            tau: s.tau.clone(),
            alpha: nalgebra::DVector::from_fn(s.alpha.len(), |k, _| s.alpha[self.sigma[k]]),
        }
    }
}

/// Reference distribution for relabelled activations: independent normals
/// with mean `m_f[k, j]` and variance `s2_f[k, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub m_f: DMatrix<f64>,
    pub s2_f: DMatrix<f64>,
}

fn cell_loss(action: &Action, k: usize, row: impl Iterator<Item = f64>) -> f64 {
    row.enumerate()
        .map(|(j, x)| -ln_normal_pdf(x, action.m_f[(k, j)], action.s2_f[(k, j)]))
        .sum()
}

/// `-Σ_k Σ_j log N(ν_σ(k) f_σ(k)j | m_kj, s²_kj)`.
pub fn loss(action: &Action, r: &Relabelling, f: &DMatrix<f64>) -> f64 {
    (0..f.nrows())
        .map(|k| {
            let s = r.sign(k);
            cell_loss(action, k, f.row(r.sigma[k]).iter().map(|x| s * x))
        })
        .sum()
}

/// Per-entry mean and (1/T) variance of the relabelled activations, with the
/// variance floored at [`VARIANCE_FLOOR`].
pub fn update_action(samples: &[DMatrix<f64>], relabellings: &[Relabelling]) -> Result<Action> {
    if samples.is_empty() {
        return Err(Error::InvalidData("cannot fit an action to zero samples".into()));
    }
    if samples.len() != relabellings.len() {
        return Err(Error::Dimension(format!(
            "{} samples but {} relabellings",
            samples.len(),
            relabellings.len()
        )));
    }
    let (k, n) = samples[0].shape();
    let t = samples.len() as f64;
    let mut sum = DMatrix::zeros(k, n);
    let mut sum_sq = DMatrix::zeros(k, n);
    let mut relabelled = Vec::with_capacity(samples.len());
    for (f, r) in samples.iter().zip(relabellings) {
        if f.shape() != (k, n) || r.len() != k {
            return Err(Error::Dimension("samples disagree in shape".into()));
        }
        let g = r.apply_f(f);
        sum += &g;
        relabelled.push(g);
    }
    let m_f = sum / t;
    for g in &relabelled {
        let d = g - &m_f;
        sum_sq += d.component_mul(&d);
    }
    let s2_f = (sum_sq / t).map(|v| v.max(VARIANCE_FLOOR));
    Ok(Action { m_f, s2_f })
}

/// Loss-minimising relabelling of one sample. Sign ties go to `+1` and a
/// tie between the identity permutation and the solver's optimum goes to
/// the identity.
pub fn assign_sample(action: &Action, f: &DMatrix<f64>) -> Result<Relabelling> {
    let k = f.nrows();
    if action.m_f.shape() != f.shape() {
        return Err(Error::Dimension(format!(
            "action is {:?} but sample is {:?}",
            action.m_f.shape(),
            f.shape()
        )));
    }
    let mut cost = DMatrix::zeros(k, k);
    let mut flip = DMatrix::from_element(k, k, false);
    for slot in 0..k {
        for src in 0..k {
            let pos = cell_loss(action, slot, f.row(src).iter().copied());
            let neg = cell_loss(action, slot, f.row(src).iter().map(|x| -x));
            if neg < pos {
                cost[(slot, src)] = neg;
                flip[(slot, src)] = true;
            } else {
                cost[(slot, src)] = pos;
            }
        }
    }
    let mut sigma = lap::solve(&cost)?;
    let best = lap::assignment_cost(&cost, &sigma);
    let identity: Vec<usize> = (0..k).collect();
    let at_identity = lap::assignment_cost(&cost, &identity);
    if at_identity <= best + 1e-12 * best.abs().max(1.0) {
        sigma = identity;
    }
    let mut nu = vec![1i8; k];
    for (slot, &src) in sigma.iter().enumerate() {
        if flip[(slot, src)] {
            nu[src] = -1;
        }
    }
    Ok(Relabelling { sigma, nu })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelabelOptions {
    /// Scale every row of each `F` to unit norm before aligning. Outputs
    /// are relabelled versions of the unscaled samples.
    pub normalize: bool,
    pub max_iterations: usize,
}

impl Default for RelabelOptions {
    fn default() -> Self {
        RelabelOptions {
            normalize: false,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub relabellings: Vec<Relabelling>,
    pub action: Action,
    /// Monte Carlo risk after each action update and each assignment pass.
    pub risk_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn unit_rows(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = f.clone();
    for k in 0..f.nrows() {
        let norm = f.row(k).norm();
        if norm > 0.0 {
            out.row_mut(k).unscale_mut(norm);
        }
    }
    out
}

fn risk(action: &Action, samples: &[DMatrix<f64>], rs: &[Relabelling]) -> f64 {
    samples.iter().zip(rs).map(|(f, r)| loss(action, r, f)).sum()
}

/// Align a set of activation samples. Relabellings start at the identity and
/// the first action is the first sample with unit variances.
pub fn align_samples(samples: &[DMatrix<f64>], options: RelabelOptions) -> Result<Alignment> {
    if samples.is_empty() {
        return Err(Error::InvalidData("nothing to relabel".into()));
    }
    let shape = samples[0].shape();
    if samples.iter().any(|f| f.shape() != shape) {
        return Err(Error::Dimension("samples disagree in shape".into()));
    }
    let scaled: Vec<DMatrix<f64>>;
    let work = if options.normalize {
        scaled = samples.iter().map(unit_rows).collect();
        &scaled
    } else {
        samples
    };
    let mut rs = vec![Relabelling::identity(shape.0); samples.len()];
    let mut trace = Vec::new();
    // The first pass aligns every sample to the first one. Starting from the
    // identity-labelled mean instead stalls when the labels are balanced,
    // e.g. half of the samples sign-flipped gives a zero mean.
    let mut action = Action {
        m_f: work[0].clone(),
        s2_f: DMatrix::from_element(shape.0, shape.1, 1.0),
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        if iterations > 1 {
            action = update_action(work, &rs)?;
        }
        trace.push(risk(&action, work, &rs));
        let next: Vec<Relabelling> = work.par_iter().map(|f| assign_sample(&action, f)).collect::<Result<_>>()?;
        trace.push(risk(&action, work, &next));
        let unchanged = next == rs;
        rs = next;
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(Alignment {
        relabellings: rs,
        action,
        risk_trace: trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabelledChains {
    /// Input chains with every sample relabelled. Log-joint values are
    /// carried over from the input.
    pub chains: Vec<SampleChain>,
    /// One relabelling per sample, grouped by chain.
    pub relabellings: Vec<Vec<Relabelling>>,
    pub alignment: Alignment,
}

/// Jointly align every sample of every chain.
pub fn relabel_chains(chains: &[SampleChain], options: RelabelOptions) -> Result<RelabelledChains> {
    let Some(k) = chains.iter().find_map(SampleChain::n_factors) else {
        return Err(Error::InvalidData("no samples to relabel".into()));
    };
    let mut fs = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        for s in &chain.samples {
            if s.n_factors() != k {
                return Err(Error::Dimension(format!("chain {c} has {} factors, expected {k}", s.n_factors())));
            }
            fs.push(s.f.clone());
        }
    }
    let alignment = align_samples(&fs, options)?;
    let mut flat = alignment.relabellings.iter();
    let mut out = Vec::with_capacity(chains.len());
    let mut per_chain = Vec::with_capacity(chains.len());
    for chain in chains {
        let rs: Vec<Relabelling> = flat.by_ref().take(chain.len()).cloned().collect();
        let samples = chain.samples.iter().zip(&rs).map(|(s, r)| r.apply_state(s)).collect();
        out.push(SampleChain {
            samples,
            ..chain.clone()
        });
        per_chain.push(rs);
    }
    Ok(RelabelledChains {
        chains: out,
        relabellings: per_chain,
        alignment,
    })
}

/// Every relabelling of `k` factors: all permutations times all sign
/// vectors. Exponential in `k`; meant for checking small cases.
pub fn all_relabellings(k: usize) -> Vec<Relabelling> {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
    let mut out = Vec::new();
    for sigma in perms(k) {
        for mask in 0..(1u32 << k) {
            let nu = (0..k).map(|b| if mask >> b & 1 == 1 { -1 } else { 1 }).collect();
            out.push(Relabelling { sigma: sigma.clone(), nu });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::LN_2PI;
    use crate::model::{log_joint, Dataset, Hyperparameters};
    use crate::seed::rng_from_seed;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_f(k: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(k, n, |_, _| rng.random_range(-2.0..2.0))
    }

    fn random_relabelling(k: usize, rng: &mut impl Rng) -> Relabelling {
        let mut sigma: Vec<usize> = (0..k).collect();
        sigma.shuffle(rng);
        let nu = (0..k).map(|_| if rng.random_bool(0.5) { -1 } else { 1 }).collect();
        Relabelling { sigma, nu }
    }

    #[test]
    fn loss_at_reference_is_normaliser() {
        let f = random_f(3, 4, 1);
        let action = Action {
            m_f: f.clone(),
            s2_f: DMatrix::from_element(3, 4, 1.0),
        };
        assert_relative_eq!(loss(&action, &Relabelling::identity(3), &f), 6.0 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn zero_sample_loss_ignores_signs() {
        let action = Action {
            m_f: random_f(2, 3, 2),
            s2_f: DMatrix::from_element(2, 3, 0.5),
        };
        let f = DMatrix::zeros(2, 3);
        let a = loss(&action, &Relabelling::new(vec![0, 1], vec![1, 1]).unwrap(), &f);
        let b = loss(&action, &Relabelling::new(vec![0, 1], vec![-1, 1]).unwrap(), &f);
        assert_eq!(a, b);
    }

    #[test]
    fn two_point_action() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let b = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let act = update_action(&[a, b], &[Relabelling::identity(1), Relabelling::identity(1)]).unwrap();
        assert_eq!(act.m_f, DMatrix::from_row_slice(1, 2, &[1.5, 1.0]));
        assert_eq!(act.s2_f, DMatrix::from_row_slice(1, 2, &[0.25, 4.0]));
        let one = update_action(&[random_f(2, 2, 3)], &[Relabelling::identity(2)]).unwrap();
        assert!(one.s2_f.iter().all(|&v| v == VARIANCE_FLOOR));
        assert!(update_action(&[], &[]).is_err());
    }

    #[test]
    fn action_update_minimises_risk() {
        let mut rng = rng_from_seed(4);
        let samples: Vec<_> = (0..6).map(|s| random_f(2, 3, 10 + s)).collect();
        let rs: Vec<_> = (0..6).map(|_| random_relabelling(2, &mut rng)).collect();
        let act = update_action(&samples, &rs).unwrap();
        let base = risk(&act, &samples, &rs);
        for k in 0..2 {
            for j in 0..3 {
                for step in [1e-4, -1e-4] {
                    let mut p = act.clone();
                    p.m_f[(k, j)] += step;
                    assert!(risk(&p, &samples, &rs) >= base);
                    let mut p = act.clone();
                    p.s2_f[(k, j)] *= 1.0 + step;
                    assert!(risk(&p, &samples, &rs) >= base);
                }
            }
        }
    }

    #[test]
    fn recovers_constructed_permutation_and_sign() {
        let m = random_f(3, 5, 5);
        let action = Action {
            m_f: m.clone(),
            s2_f: DMatrix::from_element(3, 5, 0.1),
        };
        assert!(assign_sample(&action, &m).unwrap().is_identity());
        let truth = Relabelling::new(vec![2, 0, 1], vec![1, -1, 1]).unwrap();
        // f is the sample such that relabelling it by `truth` gives m.
        let f = truth.inverse().apply_f(&m);
        assert_eq!(truth.apply_f(&f), m);
        assert_eq!(assign_sample(&action, &f).unwrap(), truth);
    }

    #[test]
    fn inverse_round_trips_state() {
        let mut rng = rng_from_seed(6);
        let state = ModelState {
            l: DMatrix::from_fn(4, 3, |i, k| if (i + k) % 2 == 0 { (i * 3 + k) as f64 - 2.5 } else { 0.0 }),
            f: random_f(3, 5, 7),
            z: DMatrix::from_fn(4, 3, |i, k| (i + k) % 2 == 0),
            tau: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            alpha: DVector::from_vec(vec![0.5, 1.5, 2.5]),
        };
        for _ in 0..20 {
            let r = random_relabelling(3, &mut rng);
            assert_eq!(r.inverse().apply_state(&r.apply_state(&state)), state);
            assert_eq!(r.apply_state(&r.inverse().apply_state(&state)), state);
            let moved = r.apply_state(&state);
            assert_relative_eq!(&moved.l * &moved.f, &state.l * &state.f, epsilon = 1e-12);
        }
    }

    #[test]
    fn relabelling_preserves_log_joint_under_equal_pi() {
        let mut rng = rng_from_seed(8);
        let state = ModelState {
            l: DMatrix::from_fn(4, 3, |i, k| if (i + k) % 3 != 0 { 0.3 * (i + 2 * k) as f64 - 1.0 } else { 0.0 }),
            f: random_f(3, 5, 9),
            z: DMatrix::from_fn(4, 3, |i, k| (i + k) % 3 != 0),
            tau: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            alpha: DVector::from_vec(vec![0.5, 1.5, 2.5]),
        };
        let data = Dataset::new(random_f(4, 5, 10)).unwrap();
        let hyper = Hyperparameters::new(vec![0.3; 3], 1.0, 1.0, 1.0, 1.0).unwrap();
        let base = log_joint(&state, &data, &hyper).unwrap();
        for _ in 0..10 {
            let r = random_relabelling(3, &mut rng);
            assert_relative_eq!(log_joint(&r.apply_state(&state), &data, &hyper).unwrap(), base, max_relative = 1e-12);
        }
    }

    #[test]
    fn aligned_input_is_a_fixed_point() {
        let f = random_f(3, 4, 11);
        let samples: Vec<_> = (0..5).map(|s| &f + random_f(3, 4, 20 + s) * 0.01).collect();
        let out = align_samples(&samples, RelabelOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert!(out.relabellings.iter().all(Relabelling::is_identity));
    }

    #[test]
    fn balanced_sign_flips_are_recovered() {
        let f = random_f(1, 6, 12);
        let samples: Vec<_> = (0..10).map(|t| if t % 2 == 0 { f.clone() } else { -&f }).collect();
        let out = align_samples(&samples, RelabelOptions::default()).unwrap();
        assert!(out.converged);
        for (s, r) in samples.iter().zip(&out.relabellings) {
            assert_eq!(r.apply_f(s), f);
        }
    }

    #[test]
    fn rejects_bad_relabellings() {
        assert!(Relabelling::new(vec![0, 0], vec![1, 1]).is_err());
        assert!(Relabelling::new(vec![0, 1], vec![1, 2]).is_err());
        assert!(Relabelling::new(vec![0, 1], vec![1]).is_err());
    }

    proptest! {
        #[test]
        fn assignment_matches_enumeration(k in 1usize..=4, n in 1usize..5, seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let action = Action {
                m_f: DMatrix::from_fn(k, n, |_, _| rng.random_range(-2.0..2.0)),
                s2_f: DMatrix::from_fn(k, n, |_, _| rng.random_range(0.1..2.0)),
            };
            let f = DMatrix::from_fn(k, n, |_, _| rng.random_range(-2.0..2.0));
            let got = assign_sample(&action, &f).unwrap();
            let best = all_relabellings(k).iter().map(|r| loss(&action, r, &f)).fold(f64::INFINITY, f64::min);
            prop_assert!((loss(&action, &got, &f) - best).abs() <= 1e-9 * best.abs().max(1.0));
        }

        #[test]
        fn risk_never_increases(t in 2usize..8, k in 1usize..=4, seed in any::<u64>(), normalize in any::<bool>()) {
            let mut rng = rng_from_seed(seed);
            let samples: Vec<_> = (0..t).map(|_| DMatrix::from_fn(k, 3, |_, _| rng.random_range(-2.0..2.0))).collect();
            let out = align_samples(&samples, RelabelOptions { normalize, max_iterations: 100 }).unwrap();
            for w in out.risk_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", out.risk_trace);
            }
        }
    }
}
