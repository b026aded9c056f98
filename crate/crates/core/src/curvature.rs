//! Dense second-order matrices and closed-form influence scores.
//!
//! Three matrices are supported, all averaged over the training set:
//!
//! - `hessian`: `(1/n) Σ ∂²L_i` (analytic for the linear models, finite
//!   differences of the analytic gradient for the mlp);
//! - `empirical-fim`: `(1/n) Σ ∇L_i ∇L_iᵀ`;
//! - `trak`: `(1/n) Σ ∇f_i ∇f_iᵀ` with `f` the margin.
//!
//! The influence of training example `i` on example `j` is
//! `(1/n) a_iᵀ (M + λI)⁻¹ a_j`, where `a` is the loss gradient (margin gradient
//! for `trak`, whose score also carries a `(1 - p_i)` factor).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Target};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_artifact, write_atomic, ByteReader};
use crate::model::{self, ModelSpec, ParamVector};

/// Largest parameter count for which a dense `P x P` matrix is assembled.
pub const MAX_DENSE_PARAMS: usize = 5000;

/// Finite-difference step for mlp Hessian columns.
pub const HESSIAN_FD_STEP: f64 = 1e-4;

const MAGIC: &[u8; 8] = b"DAUNCURV";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondOrderKind {
    Hessian,
    EmpiricalFim,
    Trak,
}

impl SecondOrderKind {
    pub fn tag(self) -> u32 {
        match self {
            SecondOrderKind::Hessian => 0,
            SecondOrderKind::EmpiricalFim => 1,
            SecondOrderKind::Trak => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(SecondOrderKind::Hessian),
            1 => Ok(SecondOrderKind::EmpiricalFim),
            2 => Ok(SecondOrderKind::Trak),
            t => Err(Error::Format(format!("unknown second-order kind tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SecondOrderKind::Hessian => "hessian",
            SecondOrderKind::EmpiricalFim => "empirical-fim",
            SecondOrderKind::Trak => "trak",
        }
    }

    /// Whether the attribution signal is the margin rather than the loss.
    pub fn uses_margin(self) -> bool {
        self == SecondOrderKind::Trak
    }
}

/// Diagonal damping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    /// `λ = factor · trace(M) / P`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative(1e-6)
    }
}

impl Damping {
    fn resolve(self, matrix: &DMatrix<f64>) -> Result<f64> {
        let lambda = match self {
            Damping::Relative(f) => f * matrix.trace() / matrix.nrows() as f64,
            Damping::Absolute(l) => l,
        };
        if lambda >= 0.0 && lambda.is_finite() {
            Ok(lambda)
        } else {
            Err(Error::input(format!("damping must be non-negative, got {lambda}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureMatrix {
    pub kind: SecondOrderKind,
    /// Undamped `M`.
    pub matrix: DMatrix<f64>,
    pub damping: f64,
}

/// Attribution signal gradient: loss gradient, or margin gradient for `trak`.
pub fn signal_grad(kind: SecondOrderKind, spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<Vec<f64>> {
    if kind.uses_margin() {
        model::margin_grad(spec, params, ex)
    } else {
        model::per_example_grad(spec, params, ex)
    }
}

/// Per-example loss Hessian.
pub fn example_hessian(spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<DMatrix<f64>> {
    let p = spec.num_params();
    match spec {
        ModelSpec::LinearRegression { .. } => {
            spec.check(params)?;
            let x = DVector::from_column_slice(ex.x);
            if ex.x.len() != p {
                return Err(Error::input("feature dimension does not match the model"));
            }
            Ok(&x * x.transpose())
        }
        ModelSpec::SoftmaxRegression { input_dim, num_classes } => {
            let g = model::predict(spec, params, ex.x)?;
            let Target::Class(_) = ex.y else {
                return Err(Error::input("softmax regression needs a class label"));
            };
            let prob = model::softmax(&g);
            let stride = input_dim + 1;
            let mut xt = ex.x.to_vec();
            xt.push(1.0);
            let mut h = DMatrix::zeros(p, p);
            for c in 0..*num_classes {
                for c2 in 0..*num_classes {
                    let w = if c == c2 { prob[c] * (1.0 - prob[c]) } else { -prob[c] * prob[c2] };
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..stride {
                        for b in 0..stride {
                            h[(c * stride + a, c2 * stride + b)] = w * xt[a] * xt[b];
                        }
                    }
                }
            }
            Ok(h)
        }
        ModelSpec::Mlp { .. } => {
            let mut h = DMatrix::zeros(p, p);
            let mut shifted = params.clone();
            for k in 0..p {
                let orig = shifted.0[k];
                shifted.0[k] = orig + HESSIAN_FD_STEP;
                let up = model::per_example_grad(spec, &shifted, ex)?;
                shifted.0[k] = orig - HESSIAN_FD_STEP;
                let down = model::per_example_grad(spec, &shifted, ex)?;
                shifted.0[k] = orig;
                for r in 0..p {
                    h[(r, k)] = (up[r] - down[r]) / (2.0 * HESSIAN_FD_STEP);
                }
            }
            Ok((&h + h.transpose()) * 0.5)
        }
    }
}

fn check_capacity(spec: &ModelSpec) -> Result<()> {
    let p = spec.num_params();
    if p > MAX_DENSE_PARAMS {
        Err(Error::Capacity { parameters: p, limit: MAX_DENSE_PARAMS })
    } else {
        Ok(())
    }
}

/// Assembles the undamped matrix averaged over `data`, then resolves the damping.
pub fn assemble_curvature(
    kind: SecondOrderKind,
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    damping: Damping,
) -> Result<CurvatureMatrix> {
    check_capacity(spec)?;
    crate::train::check_compatible(data, spec)?;
    if kind.uses_margin() && !spec.is_classification() {
        return Err(Error::unsupported("trak curvature needs a classification model"));
    }
    let p = spec.num_params();
    let mut m = DMatrix::zeros(p, p);
    for ex in data.examples() {
        match kind {
            SecondOrderKind::Hessian => m += example_hessian(spec, params, ex)?,
            _ => {
                let g = DVector::from_vec(signal_grad(kind, spec, params, ex)?);
                m.ger(1.0, &g, &g, 1.0);
            }
        }
    }
    m /= data.len() as f64;
    let damping = damping.resolve(&m)?;
    Ok(CurvatureMatrix { kind, matrix: m, damping })
}

/// Factorization of `M + λI`.
pub struct DampedSolver {
    chol: Cholesky<f64, Dyn>,
    damped: DMatrix<f64>,
}

impl CurvatureMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn damped(&self) -> DMatrix<f64> {
        let mut d = self.matrix.clone();
        for k in 0..d.nrows() {
            d[(k, k)] += self.damping;
        }
        d
    }

    pub fn factor(&self) -> Result<DampedSolver> {
        let damped = self.damped();
        let chol = Cholesky::new(damped.clone()).ok_or_else(|| {
            Error::numeric(format!(
                "{} matrix is not positive definite after damping {:.3e}",
                self.kind.name(),
                self.damping
            ))
        })?;
        // Reject factors whose pivots collapse relative to the scale.
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
        if !(min > max * 1e-12) {
            return Err(Error::numeric("damped matrix is singular within tolerance"));
        }
        Ok(DampedSolver { chol, damped })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.dim();
        let mut out = Vec::with_capacity(28 + 8 * p * p);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.kind.tag().to_le_bytes());
        out.extend_from_slice(&(p as u64).to_le_bytes());
        out.extend_from_slice(&self.damping.to_le_bytes());
        for r in 0..p {
            for c in 0..p {
                out.extend_from_slice(&self.matrix[(r, c)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(8)? != MAGIC {
            return Err(Error::Format("not a curvature file".into()));
        }
        let kind = SecondOrderKind::from_tag(rd.u32()?)?;
        let p = rd.u64()? as usize;
        let damping = rd.f64()?;
        let mut values = Vec::with_capacity(p * p);
        for _ in 0..p * p {
            values.push(rd.f64()?);
        }
        rd.finish()?;
        Ok(Self { kind, matrix: DMatrix::from_row_slice(p, p, &values), damping })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_artifact(path)?)
    }

    /// Debug export: one row per matrix row, `row,c0,c1,...`.
    pub fn to_csv_string(&self) -> String {
        let p = self.dim();
        let mut out = String::from("row");
        for c in 0..p {
            let _ = write!(out, ",c{c}");
        }
        out.push('\n');
        for r in 0..p {
            let _ = write!(out, "{r}");
            for c in 0..p {
                out.push(',');
                out.push_str(&fmt_f64(self.matrix[(r, c)]));
            }
            out.push('\n');
        }
        out
    }
}

impl DampedSolver {
    /// `(M + λI)⁻¹ v` with one step of iterative refinement; fails when the
    /// residual exceeds `1e-8 ‖v‖`.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(v);
        if rhs.nrows() != self.damped.nrows() {
            return Err(Error::input(format!(
                "vector has length {}, matrix is {}x{}",
                rhs.nrows(),
                self.damped.nrows(),
                self.damped.nrows()
            )));
        }
        let mut u = self.chol.solve(&rhs);
        let r = &rhs - &self.damped * &u;
        u += self.chol.solve(&r);
        let resid = (&self.damped * &u - &rhs).norm();
        if !(resid <= 1e-8 * rhs.norm()) && resid > 0.0 {
            return Err(Error::numeric(format!("damped solve residual {resid:.3e} too large")));
        }
        Ok(u.iter().copied().collect())
    }
}

/// `(M + λI)⁻¹ v`.
pub fn solve_damped(curv: &CurvatureMatrix, v: &[f64]) -> Result<Vec<f64>> {
    curv.factor()?.solve(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything needed to score many pairs against one factorized matrix.
pub struct InfluenceOracle<'a> {
    pub kind: SecondOrderKind,
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    n: usize,
    solver: DampedSolver,
    pub curvature: CurvatureMatrix,
}

impl<'a> InfluenceOracle<'a> {
    pub fn new(
        kind: SecondOrderKind,
        spec: &'a ModelSpec,
        params: &'a ParamVector,
        train: &Dataset,
        damping: Damping,
    ) -> Result<Self> {
        let curvature = assemble_curvature(kind, spec, params, train, damping)?;
        let solver = curvature.factor()?;
        Ok(Self { kind, spec, params, n: train.len(), solver, curvature })
    }

    pub fn signal(&self, ex: Example<'_>) -> Result<Vec<f64>> {
        signal_grad(self.kind, self.spec, self.params, ex)
    }

    /// `(1 - p_i)` for `trak`, otherwise 1.
    pub fn left_factor(&self, ex: Example<'_>) -> Result<f64> {
        if self.kind.uses_margin() {
            Ok(1.0 - model::correct_class_prob(self.spec, self.params, ex)?)
        } else {
            Ok(1.0)
        }
    }

    pub fn whiten(&self, grad: &[f64]) -> Result<Vec<f64>> {
        self.solver.solve(grad)
    }

    /// Influence of training example `train_ex` on `query`.
    pub fn influence(&self, train_ex: Example<'_>, query: Example<'_>) -> Result<f64> {
        let a = self.signal(train_ex)?;
        let b = self.whiten(&self.signal(query)?)?;
        Ok(self.left_factor(train_ex)? * dot(&a, &b) / self.n as f64)
    }

    /// Full `n_train x n_query` influence matrix, row-major.
    pub fn matrix(&self, train: &Dataset, queries: &Dataset) -> Result<Vec<Vec<f64>>> {
        let whitened: Vec<Vec<f64>> = queries
            .examples()
            .map(|q| self.signal(q).and_then(|g| self.whiten(&g)))
            .collect::<Result<_>>()?;
        train
            .examples()
            .map(|ex| {
                let a = self.signal(ex)?;
                let f = self.left_factor(ex)? / self.n as f64;
                Ok(whitened.iter().map(|w| f * dot(&a, w)).collect())
            })
            .collect()
    }

    /// Whitened cosine `a_iᵀ M⁻¹ a_j / sqrt(a_iᵀ M⁻¹ a_i · a_jᵀ M⁻¹ a_j)`.
    pub fn normalized(&self, a: Example<'_>, b: Example<'_>, index_a: usize, index_b: usize) -> Result<f64> {
        let ga = self.signal(a)?;
        let gb = self.signal(b)?;
        let wa = self.whiten(&ga)?;
        let wb = self.whiten(&gb)?;
        let saa = dot(&ga, &wa);
        let sbb = dot(&gb, &wb);
        if !(saa > 0.0) {
            return Err(Error::DegenerateExample { index: index_a });
        }
        if !(sbb > 0.0) {
            return Err(Error::DegenerateExample { index: index_b });
        }
        let value = dot(&ga, &wb) / (saa * sbb).sqrt();
        if value.abs() > 1.0 + 1e-9 {
            return Err(Error::numeric(format!("normalized influence {value} outside [-1, 1]")));
        }
        Ok(value.clamp(-1.0, 1.0))
    }
}

/// Influence of training example `i` on `query`.
pub fn exact_influence(
    kind: SecondOrderKind,
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    i: usize,
    query: Example<'_>,
    damping: Damping,
) -> Result<f64> {
    if i >= train.len() {
        return Err(Error::input(format!("training index {i} out of range")));
    }
    InfluenceOracle::new(kind, spec, params, train, damping)?.influence(train.example(i), query)
}

/// Unit-normalized whitened influence between training example `i` and `query`.
///
/// For `trak` the `(1 - p)` factors are left out so the value stays a cosine.
pub fn normalized_influence(
    kind: SecondOrderKind,
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    i: usize,
    query: Example<'_>,
    damping: Damping,
) -> Result<f64> {
    if i >= train.len() {
        return Err(Error::input(format!("training index {i} out of range")));
    }
    InfluenceOracle::new(kind, spec, params, train, damping)?.normalized(train.example(i), query, i, usize::MAX)
}

/// Closed form for linear regression: `(1/n) ε_i ε_j x_iᵀ (Σ_n + λI)⁻¹ x_j`.
pub fn linear_regression_influence(
    train: &Dataset,
    params: &ParamVector,
    i: usize,
    query: Example<'_>,
    damping: f64,
) -> Result<f64> {
    let d = train.dim();
    let spec = ModelSpec::LinearRegression { input_dim: d };
    crate::train::check_compatible(train, &spec)?;
    spec.check(params)?;
    if i >= train.len() {
        return Err(Error::input(format!("training index {i} out of range")));
    }
    if query.x.len() != d {
        return Err(Error::input("query dimension does not match"));
    }
    let n = train.len() as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for ex in train.examples() {
        let x = DVector::from_column_slice(ex.x);
        sigma.ger(1.0 / n, &x, &x, 1.0);
    }
    let curv = CurvatureMatrix { kind: SecondOrderKind::Hessian, matrix: sigma, damping };
    let residual = |ex: Example<'_>| -> Result<f64> {
        let Target::Real(y) = ex.y else { return Err(Error::input("regression needs real labels")) };
        Ok(y - dot(params.as_slice(), ex.x))
    };
    let eps_i = residual(train.example(i))?;
    let eps_j = residual(query)?;
    if eps_i == 0.0 || eps_j == 0.0 {
        return Ok(0.0);
    }
    let w = solve_damped(&curv, query.x)?;
    Ok(eps_i * eps_j * dot(train.row(i), &w) / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn hand_instance() -> (Dataset, ParamVector) {
        let ds = Dataset::from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            Labels::Real(vec![1.0, 1.0, 0.0]),
            1,
        )
        .unwrap();
        (ds, vec![0.0, 0.0].into())
    }

    #[test]
    fn linear_hessian_is_sample_second_moment() {
        let (ds, theta) = hand_instance();
        let spec = ModelSpec::LinearRegression { input_dim: 2 };
        let c = assemble_curvature(SecondOrderKind::Hessian, &spec, &theta, &ds, Damping::Absolute(0.0)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]) / 3.0;
        assert!((c.matrix - expect).abs().max() < 1e-15);
    }

    #[test]
    fn fim_at_interpolation_is_only_damping() {
        let ds = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]], Labels::Real(vec![3.0, 2.0]), 0).unwrap();
        let spec = ModelSpec::LinearRegression { input_dim: 2 };
        let c = assemble_curvature(SecondOrderKind::EmpiricalFim, &spec, &vec![1.0, 1.0].into(), &ds, Damping::Absolute(0.5))
            .unwrap();
        assert_eq!(c.matrix, DMatrix::zeros(2, 2));
        assert_eq!(c.damped(), DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn solve_examples() {
        let id = CurvatureMatrix { kind: SecondOrderKind::Hessian, matrix: DMatrix::identity(3, 3), damping: 0.0 };
        assert_eq!(solve_damped(&id, &[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);

        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]) / 3.0;
        let c = CurvatureMatrix { kind: SecondOrderKind::Hessian, matrix: m.clone(), damping: 0.0 };
        let u = solve_damped(&c, &[0.0, 1.0]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-14 && (u[1] - 2.0).abs() < 1e-14);

        let big = CurvatureMatrix { kind: SecondOrderKind::Hessian, matrix: m, damping: 1e8 };
        let u = solve_damped(&big, &[3.0, -5.0]).unwrap();
        assert!((u[0] - 3e-8).abs() < 1e-15 && (u[1] + 5e-8).abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_is_numeric_error() {
        let c = CurvatureMatrix { kind: SecondOrderKind::Hessian, matrix: DMatrix::zeros(2, 2), damping: 0.0 };
        assert!(matches!(solve_damped(&c, &[1.0, 1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn hand_instance_closed_form() {
        let (ds, theta) = hand_instance();
        let i12 = linear_regression_influence(&ds, &theta, 0, ds.example(1), 0.0).unwrap();
        let i11 = linear_regression_influence(&ds, &theta, 0, ds.example(0), 0.0).unwrap();
        assert!((i12 + 1.0 / 3.0).abs() < 1e-15);
        assert!((i11 - 2.0 / 3.0).abs() < 1e-15);
        // residual zero on example 3
        assert_eq!(linear_regression_influence(&ds, &theta, 2, ds.example(0), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn normalized_hand_instance() {
        let (ds, theta) = hand_instance();
        let spec = ModelSpec::LinearRegression { input_dim: 2 };
        let d = Damping::Absolute(0.0);
        let v = normalized_influence(SecondOrderKind::Hessian, &spec, &theta, &ds, 0, ds.example(1), d).unwrap();
        assert!((v + 0.5).abs() < 1e-14);
        let one = normalized_influence(SecondOrderKind::Hessian, &spec, &theta, &ds, 1, ds.example(1), d).unwrap();
        assert_eq!(one, 1.0);
        let err = normalized_influence(SecondOrderKind::Hessian, &spec, &theta, &ds, 2, ds.example(0), d);
        assert!(matches!(err, Err(Error::DegenerateExample { index: 2 })));
    }

    #[test]
    fn antipodal_gradients_have_normalized_influence_minus_one() {
        // residuals +1 and -1 at the same x give opposite gradients
        let ds = Dataset::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.5, -1.0]], Labels::Real(vec![1.0, -1.0, 0.3]), 0)
            .unwrap();
        let spec = ModelSpec::LinearRegression { input_dim: 2 };
        let v = normalized_influence(SecondOrderKind::Hessian, &spec, &vec![0.0, 0.0].into(), &ds, 0, ds.example(1), Damping::default())
            .unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_guard() {
        let spec = ModelSpec::LinearRegression { input_dim: MAX_DENSE_PARAMS + 1 };
        let ds = Dataset::new(vec![0.0; MAX_DENSE_PARAMS + 1], MAX_DENSE_PARAMS + 1, Labels::Real(vec![0.0]), vec![0]).unwrap();
        let theta = ParamVector(vec![0.0; MAX_DENSE_PARAMS + 1]);
        let err = assemble_curvature(SecondOrderKind::Hessian, &spec, &theta, &ds, Damping::default()).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn trak_on_regression_is_unsupported() {
        let (ds, theta) = hand_instance();
        let spec = ModelSpec::LinearRegression { input_dim: 2 };
        let err = assemble_curvature(SecondOrderKind::Trak, &spec, &theta, &ds, Damping::default()).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn binary_and_csv_export() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]) / 3.0;
        let c = CurvatureMatrix { kind: SecondOrderKind::EmpiricalFim, matrix: m, damping: 1e-3 };
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"DAUNCURV");
        assert_eq!(bytes.len(), 8 + 4 + 8 + 8 + 4 * 8);
        assert_eq!(CurvatureMatrix::from_bytes(&bytes).unwrap(), c);
        assert!(CurvatureMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let csv = c.to_csv_string();
        assert!(csv.starts_with("row,c0,c1\n0,6.6666666666666663e-1,"));
    }

    #[test]
    fn default_damping_is_relative_to_trace() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 2.0]);
        assert!((Damping::default().resolve(&m).unwrap() - 3e-6).abs() < 1e-18);
    }
}
