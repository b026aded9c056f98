//! Monte Carlo check that the ensemble self-influence estimates the
//! curvature-weighted influence in expectation, on quadratic losses where each
//! perturbed solve is exact.
//!
//! With `r = 1` the member displacement is `Δθ = H⁻¹ (1/n) Σ_j (2ξ_j - 1) g_j`,
//! so `Var(g_iᵀ Δθ) = Var(2ξ - 1) · (1/n) g_iᵀ H⁻¹ F H⁻¹ g_i` with
//! `Var(2ξ - 1) = 1/3`. The first-order estimate is the sample variance of
//! `g_iᵀ Δθᵏ`; the exact-loss estimate uses `L_i(θᵏ)` and also carries the
//! second-order term of the loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvature::SecondOrderKind;
use crate::data::{Dataset, Target};
use crate::ensemble::{exact_quadratic_minimizer, sample_perturbations, AccessMode, AnchorState};
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::{member_seed, stream, Purpose};

/// `Var(2ξ - 1)` for `ξ ~ U[0, 1)`.
pub const XI_SIGN_VARIANCE: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub index: usize,
    pub k_mc: usize,
    pub target: f64,
    /// Sample variance of `g_iᵀ Δθᵏ`.
    pub first_order: f64,
    /// Standard error of `first_order`.
    pub first_order_std_error: f64,
    pub relative_error: f64,
    /// Sample variance of `L_i(θᵏ)`.
    pub exact_loss: f64,
    pub exact_loss_relative_error: f64,
}

/// Least-squares anchor `θ₀ = (Σ x xᵀ)⁻¹ Σ x y`.
pub fn least_squares_anchor(train: &Dataset) -> Result<ParamVector> {
    let d = train.dim();
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for ex in train.examples() {
        let Target::Real(y) = ex.y else { return Err(Error::input("least squares needs real labels")) };
        let x = DVector::from_column_slice(ex.x);
        xtx.ger(1.0, &x, &x, 1.0);
        xty += &x * y;
    }
    let theta = xtx.cholesky().ok_or_else(|| Error::numeric("design matrix is rank deficient"))?.solve(&xty);
    Ok(ParamVector(theta.iter().copied().collect()))
}

/// `Var(2ξ-1) · (1/n) g_iᵀ H⁻¹ F H⁻¹ g_i` at the least-squares anchor.
pub fn unbiasedness_target(train: &Dataset, theta: &ParamVector, index: usize) -> Result<f64> {
    let spec = ModelSpec::LinearRegression { input_dim: train.dim() };
    let n = train.len() as f64;
    let d = train.dim();
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut f = DMatrix::<f64>::zeros(d, d);
    let mut gi = DVector::<f64>::zeros(d);
    for (j, ex) in train.examples().enumerate() {
        let x = DVector::from_column_slice(ex.x);
        let g = DVector::from_vec(model::per_example_grad(&spec, theta, ex)?);
        h.ger(1.0 / n, &x, &x, 1.0);
        f.ger(1.0 / n, &g, &g, 1.0);
        if j == index {
            gi = g;
        }
    }
    let chol = h.cholesky().ok_or_else(|| Error::numeric("hessian is singular"))?;
    let w = chol.solve(&gi);
    Ok(XI_SIGN_VARIANCE * (w.transpose() * &f * &w)[(0, 0)] / n)
}

fn sample_variance(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / (k - 1.0);
    let m = sq.iter().sum::<f64>() / k;
    let spread = sq.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (k - 1.0);
    (var, (spread / k).sqrt())
}

fn relative(estimate: f64, target: f64) -> f64 {
    if target == 0.0 {
        estimate.abs()
    } else {
        (estimate - target).abs() / target.abs()
    }
}

/// Runs `k_mc` exact perturbed solves (`r = 1`, white-box hessian row) and
/// compares the self-influence estimates for `index` against the target.
pub fn unbiasedness_check(spec: &ModelSpec, train: &Dataset, index: usize, k_mc: usize, seed: u64) -> Result<UnbiasednessReport> {
    let ModelSpec::LinearRegression { .. } = spec else {
        return Err(Error::unsupported("the unbiasedness check needs a quadratic (linear-regression) loss"));
    };
    crate::train::check_compatible(train, spec)?;
    if index >= train.len() {
        return Err(Error::input(format!("index {index} out of range")));
    }
    if k_mc < 2 {
        return Err(Error::input("need at least 2 Monte Carlo members"));
    }
    let theta = least_squares_anchor(train)?;
    let target = unbiasedness_target(train, &theta, index)?;
    let anchor = AnchorState::build(spec, &theta, train, SecondOrderKind::Hessian, AccessMode::WhiteBox, false)?;
    let gi = anchor.signal_grad(index).expect("white-box anchor has gradients").to_vec();
    let rows: Vec<usize> = (0..train.len()).collect();
    let ex = train.example(index);
    let mut linear = Vec::with_capacity(k_mc);
    let mut exact = Vec::with_capacity(k_mc);
    for k in 1..=k_mc {
        let draw = sample_perturbations(k, train.ids(), &mut stream(member_seed(seed, k), Purpose::Perturb, 0))?;
        let theta_k = exact_quadratic_minimizer(spec, train, &anchor, &rows, &draw.xi, 0.0)?;
        linear.push(gi.iter().zip(theta_k.0.iter().zip(&theta.0)).map(|(g, (a, b))| g * (a - b)).sum::<f64>());
        exact.push(model::per_example_loss(spec, &theta_k, ex)?);
    }
    let (first_order, first_order_std_error) = sample_variance(&linear);
    let (exact_loss, _) = sample_variance(&exact);
    Ok(UnbiasednessReport {
        index,
        k_mc,
        target,
        first_order,
        first_order_std_error,
        relative_error: relative(first_order, target),
        exact_loss,
        exact_loss_relative_error: relative(exact_loss, target),
    })
}
