//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the library's inference code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use sparsefactor::cavi::VariationalState;
use sparsefactor::{Dataset, Hyperparameters, ModelState};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

pub fn ln_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - statrs::function::gamma::ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `log ∫ N(l | 0, diag(1/α_A)) Π_j N(y_j | l·f_j, 1/τ) dl` over the
/// active loadings `A`, by the trapezoid rule on a grid. Handles one or two
/// active factors.
pub fn quadrature_log_evidence(y: &[f64], f: &DMatrix<f64>, active: &[usize], tau: f64, alpha: &[f64]) -> f64 {
    let loglik = |l: &[f64]| -> f64 {
        y.iter()
            .enumerate()
            .map(|(j, &yj)| {
                let m: f64 = active.iter().zip(l).map(|(&k, lk)| lk * f[(k, j)]).sum();
                ln_normal(yj, m, 1.0 / tau)
            })
            .sum()
    };
    let prior = |l: &[f64]| -> f64 { active.iter().zip(l).map(|(&k, lk)| ln_normal(*lk, 0.0, 1.0 / alpha[k])).sum() };
    let half = 12.0;
    match active.len() {
        0 => loglik(&[]),
        1 => {
            let steps = 24_000;
            let h = 2.0 * half / steps as f64;
            let vals: Vec<f64> = (0..=steps)
                .map(|s| {
                    let l = [-half + s as f64 * h];
                    prior(&l) + loglik(&l)
                })
                .collect();
            log_trapezoid(&vals, h)
        }
        2 => {
            let steps = 1_600;
            let h = 2.0 * half / steps as f64;
            let rows: Vec<f64> = (0..=steps)
                .map(|a| {
                    let la = -half + a as f64 * h;
                    let inner: Vec<f64> = (0..=steps)
                        .map(|b| {
                            let l = [la, -half + b as f64 * h];
                            prior(&l) + loglik(&l)
                        })
                        .collect();
                    log_trapezoid(&inner, h)
                })
                .collect();
            log_trapezoid(&rows, h)
        }
        _ => panic!("quadrature supports at most two active factors"),
    }
}

fn log_trapezoid(log_vals: &[f64], h: f64) -> f64 {
    let m = log_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = log_vals.len() - 1;
    let s: f64 = log_vals
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == last { 0.5 } else { 1.0 } * (v - m).exp())
        .sum();
    m + (s * h).ln()
}

/// `log N(y | 0, Σ_{k∈A} f_k f_kᵀ / α_k + I/τ)` with an explicit covariance.
pub fn ln_marginal_row(y: &[f64], f: &DMatrix<f64>, active: &[usize], tau: f64, alpha: &[f64]) -> f64 {
    let n = y.len();
    let mut cov = DMatrix::identity(n, n) / tau;
    for &k in active {
        let fk = f.row(k).transpose();
        cov += &fk * fk.transpose() / alpha[k];
    }
    let yv = DVector::from_column_slice(y);
    let inv = cov.clone().try_inverse().expect("covariance is invertible");
    let quad = (yv.transpose() * inv * &yv)[(0, 0)];
    -0.5 * (n as f64 * LN_2PI + cov.determinant().ln() + quad)
}

/// Exact `p(Z | Y, F, τ, α)` for every connectivity matrix, keyed by the
/// bit pattern of `Z` read row-major.
pub fn exact_z_posterior(y: &DMatrix<f64>, f: &DMatrix<f64>, tau: &[f64], alpha: &[f64], pi: &[f64]) -> Vec<f64> {
    let (g, k) = (y.nrows(), f.nrows());
    let per_row: Vec<Vec<f64>> = (0..g)
        .map(|i| {
            let yi: Vec<f64> = y.row(i).iter().copied().collect();
            let logs: Vec<f64> = (0..1usize << k)
                .map(|bits| {
                    let active: Vec<usize> = (0..k).filter(|c| bits >> c & 1 == 1).collect();
                    let prior: f64 = (0..k)
                        .map(|c| if bits >> c & 1 == 1 { pi[c].ln() } else { (1.0 - pi[c]).ln() })
                        .sum();
                    prior + ln_marginal_row(&yi, f, &active, tau[i], alpha)
                })
                .collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            logs.iter().map(|l| (l - m).exp() / z).collect()
        })
        .collect();
    let total = 1usize << (g * k);
    (0..total)
        .map(|code| (0..g).map(|i| per_row[i][(code >> (i * k)) & ((1 << k) - 1)]).product())
        .collect()
}

/// Bit pattern of a connectivity matrix, matching [`exact_z_posterior`].
pub fn z_code(z: &DMatrix<bool>) -> usize {
    let k = z.ncols();
    let mut code = 0;
    for i in 0..z.nrows() {
        for c in 0..k {
            if z[(i, c)] {
                code |= 1 << (i * k + c);
            }
        }
    }
    code
}

/// One draw from `q` of `log p(Y, θ) - log q(θ)`, point masses left out of
/// both sides (they cancel).
pub fn elbo_draw(v: &VariationalState, data: &Dataset, hyper: &Hyperparameters, rng: &mut impl Rng) -> f64 {
    let (g, k, n) = (v.n_features(), v.n_factors(), v.n_samples());
    let mut out = 0.0;
    let mut tau = vec![0.0; g];
    for i in 0..g {
        tau[i] = Gamma::new(v.a_tau[i], 1.0 / v.b_tau[i]).unwrap().sample(rng);
        out += ln_gamma_density(tau[i], hyper.a_tau, hyper.b_tau) - ln_gamma_density(tau[i], v.a_tau[i], v.b_tau[i]);
    }
    let mut alpha = vec![0.0; k];
    for c in 0..k {
        alpha[c] = Gamma::new(v.a_alpha[c], 1.0 / v.b_alpha[c]).unwrap().sample(rng);
        out += ln_gamma_density(alpha[c], hyper.a_alpha, hyper.b_alpha) - ln_gamma_density(alpha[c], v.a_alpha[c], v.b_alpha[c]);
    }
    let mut f = DMatrix::zeros(k, n);
    for c in 0..k {
        for j in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            let x = v.mu_f[(c, j)] + v.var_f[(c, j)].sqrt() * e;
            f[(c, j)] = x;
            out += ln_normal(x, 0.0, 1.0) - ln_normal(x, v.mu_f[(c, j)], v.var_f[(c, j)]);
        }
    }
    let mut l = DMatrix::zeros(g, k);
    for i in 0..g {
        for c in 0..k {
            let eta = v.eta[(i, c)];
            let on = rng.random::<f64>() < eta;
            if on {
                let e: f64 = StandardNormal.sample(rng);
                let x = v.mu_l[(i, c)] + v.var_l[(i, c)].sqrt() * e;
                l[(i, c)] = x;
                out += hyper.pi[c].ln() + ln_normal(x, 0.0, 1.0 / alpha[c]) - eta.ln() - ln_normal(x, v.mu_l[(i, c)], v.var_l[(i, c)]);
            } else {
                out += (1.0 - hyper.pi[c]).ln() - (1.0 - eta).ln();
            }
        }
    }
    for i in 0..g {
        for j in 0..n {
            if data.is_observed(i, j) {
                let m: f64 = (0..k).map(|c| l[(i, c)] * f[(c, j)]).sum();
                out += ln_normal(data.y()[(i, j)], m, 1.0 / tau[i]);
            }
        }
    }
    out
}

/// Monte Carlo ELBO estimate and its standard error.
pub fn mc_elbo(v: &VariationalState, data: &Dataset, hyper: &Hyperparameters, draws: usize, rng: &mut impl Rng) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let x = elbo_draw(v, data, hyper, rng);
        sum += x;
        sum_sq += x * x;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Maximiser of a unimodal function on `[lo, hi]` by golden-section search.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Total variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn random_state(g: usize, n: usize, k: usize, rng: &mut impl Rng) -> ModelState {
    let z = DMatrix::from_fn(g, k, |_, _| rng.random_bool(0.6));
    ModelState {
        l: DMatrix::from_fn(g, k, |i, c| if z[(i, c)] { rng.random_range(-1.5..1.5) } else { 0.0 }),
        f: DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.5..1.5)),
        z,
        tau: DVector::from_fn(g, |_, _| rng.random_range(0.5..3.0)),
        alpha: DVector::from_fn(k, |_, _| rng.random_range(0.5..3.0)),
    }
}

pub fn random_data(g: usize, n: usize, rng: &mut impl Rng) -> Dataset {
    Dataset::new(DMatrix::from_fn(g, n, |_, _| rng.random_range(-2.0..2.0))).unwrap()
}

pub fn random_hyper(k: usize, rng: &mut impl Rng) -> Hyperparameters {
    let pi = (0..k).map(|_| rng.random_range(0.15..0.85)).collect();
    Hyperparameters::new(
        pi,
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
    )
    .unwrap()
}

/// A variational state with every parameter drawn at random (not fitted).
pub fn random_variational(g: usize, n: usize, k: usize, rng: &mut impl Rng) -> VariationalState {
    VariationalState {
        eta: DMatrix::from_fn(g, k, |_, _| rng.random_range(0.05..0.95)),
        mu_l: DMatrix::from_fn(g, k, |_, _| rng.random_range(-1.0..1.0)),
        var_l: DMatrix::from_fn(g, k, |_, _| rng.random_range(0.1..1.0)),
        mu_f: DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0)),
        var_f: DMatrix::from_fn(k, n, |_, _| rng.random_range(0.1..1.0)),
        a_tau: DVector::from_fn(g, |_, _| rng.random_range(2.0..8.0)),
        b_tau: DVector::from_fn(g, |_, _| rng.random_range(1.0..4.0)),
        a_alpha: DVector::from_fn(k, |_, _| rng.random_range(2.0..8.0)),
        b_alpha: DVector::from_fn(k, |_, _| rng.random_range(1.0..4.0)),
    }
}
