//! Least-squares fit of `y = a·e^(-bx) + c`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STARTS: [f64; 4] = [0.01, 0.05, 0.1, 0.5];
const MAX_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Sum of squared residuals.
    pub residual: f64,
    /// Standard errors of `(a, b, c)` from `s² (JᵀJ)⁻¹`, when defined.
    pub std_errors: Option<[f64; 3]>,
    /// False when `a = 0`, which leaves `b` undetermined.
    pub b_identified: bool,
}

impl ScalingFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * (-self.b * x).exp() + self.c
    }
}

fn sse(xs: &[f64], ys: &[f64], p: &Vector3<f64>) -> f64 {
    xs.iter().zip(ys).map(|(x, y)| (p[0] * (-p[1] * x).exp() + p[2] - y).powi(2)).sum()
}

fn normal_equations(xs: &[f64], ys: &[f64], p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (x, y) in xs.iter().zip(ys) {
        let e = (-p[1] * x).exp();
        let j = Vector3::new(e, -p[0] * x * e, 1.0);
        let r = p[0] * e + p[2] - y;
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (jtj, jtr)
}

/// Best `(a, c)` for a fixed `b` by linear least squares.
fn linear_start(xs: &[f64], ys: &[f64], b: f64) -> Option<Vector3<f64>> {
    let (mut see, mut se, mut sey, mut sy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let e = (-b * x).exp();
        see += e * e;
        se += e;
        sey += e * y;
        sy += y;
    }
    let n = xs.len() as f64;
    let det = see * n - se * se;
    (det.abs() > 1e-300).then(|| Vector3::new((sey * n - se * sy) / det, b, (see * sy - se * sey) / det))
}

/// Levenberg-Marquardt from one start. At the iteration cap the last (lowest
/// cost) iterate is returned; `None` only if the start itself is not finite.
fn refine(xs: &[f64], ys: &[f64], mut p: Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
    let mut cost = sse(xs, ys, &p);
    let mut lambda = 1e-3;
    let scale = ys.iter().map(|y| y * y).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_ITERS {
        let (jtj, jtr) = normal_equations(xs, ys, &p);
        if jtr.norm() <= 1e-14 * scale.sqrt() * (1.0 + jtj.diagonal().max().sqrt()) || cost <= 1e-28 * scale {
            return Some((p, cost));
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + step;
            trial[1] = trial[1].max(0.0);
            let trial_cost = sse(xs, ys, &trial);
            if trial_cost.is_finite() && trial_cost <= cost {
                let settled = (cost - trial_cost) <= 1e-15 * cost && step.norm() <= 1e-12 * (1.0 + p.norm());
                p = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if settled {
                    return Some((p, cost));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left at any damping: a local minimum
            return Some((p, cost));
        }
    }
    log::debug!("exponential fit stopped at the iteration cap from b = {:.3}", p[1]);
    cost.is_finite().then_some((p, cost))
}

/// Fits `y = a·e^(-bx) + c` by damped Gauss-Newton from several starting rates
/// and keeps the smallest residual. Points are unweighted.
pub fn fit_exponential(xs: &[f64], ys: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ys.len() {
        return Err(Error::input("xs and ys differ in length"));
    }
    if xs.len() < 4 {
        return Err(Error::input("an exponential fit needs at least 4 points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::input("fit inputs must be finite"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::input("fit needs distinct x values"));
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let spread = ys.iter().map(|y| (y - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * mean.abs().max(1.0) {
        let residual = ys.iter().map(|y| (y - mean).powi(2)).sum();
        return Ok(ScalingFit { a: 0.0, b: 0.0, c: mean, residual, std_errors: None, b_identified: false });
    }

    let best = STARTS
        .iter()
        .filter_map(|&b| linear_start(xs, ys, b))
        .filter_map(|start| refine(xs, ys, start))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Fit("no starting rate converged".into()))?;
    let (p, residual) = best;
    let (jtj, _) = normal_equations(xs, ys, &p);
    let dof = n - 3.0;
    let std_errors = jtj
        .try_inverse()
        .map(|inv| {
            let s2 = residual / dof;
            [inv[(0, 0)], inv[(1, 1)], inv[(2, 2)]].map(|v| (s2 * v).max(0.0).sqrt())
        })
        .filter(|se| se.iter().all(|v| v.is_finite()));
    Ok(ScalingFit { a: p[0], b: p[1], c: p[2], residual, std_errors, b_identified: p[0] != 0.0 })
}
