//! Scalar densities and small dense linear-algebra helpers shared by the
//! samplers and the variational updates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of `N(x | mean, var)`.
pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log-density of a gamma distribution in shape-rate parametrisation.
pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `x ln x` with the continuous extension `0 ln 0 = 0`.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `x ln y` with `0 ln y = 0` for any `y`, including `y = 0`.
pub fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Numerically stable logistic function; saturates to exactly 0 or 1.
pub fn logistic(t: f64) -> f64 {
    if t == f64::INFINITY {
        1.0
    } else if t == f64::NEG_INFINITY {
        0.0
    } else if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Draw from `Gamma(shape, rate)`. Draws that underflow to zero are floored
/// at the smallest positive normal number so precisions stay strictly positive.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("gamma parameters must be positive and finite");
    g.sample(rng).max(f64::MIN_POSITIVE)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Lower Cholesky factor of a symmetric positive definite matrix, or `None`
/// if the matrix is not numerically positive definite.
pub fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = a.clone().cholesky()?.unpack();
    l.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()).then_some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("triangular factor has a nonzero diagonal")
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn backward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has a nonzero diagonal")
}

/// Draw from `N(P⁻¹ b, P⁻¹)` given the precision matrix `P` and the
/// information vector `b`. Returns `None` if `P` is not positive definite.
pub fn sample_gaussian_canonical<R: Rng + ?Sized>(
    rng: &mut R,
    precision: &DMatrix<f64>,
    info: &DVector<f64>,
) -> Option<DVector<f64>> {
    let chol = cholesky(precision)?;
    let w = forward_solve(&chol, info);
    let mean = backward_solve(&chol, &w);
    let eps = DVector::from_fn(info.len(), |_, _| standard_normal(rng));
    Some(mean + backward_solve(&chol, &eps))
}
