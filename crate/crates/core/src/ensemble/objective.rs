//! Anchor caches and the perturbed training objectives.
//!
//! White-box rows (mean over the member's subset, `a_i` the anchor gradient of
//! the signal, `s_i = 2ξ_i - 1`):
//!
//! | kind          | term                                                   |
//! |---------------|--------------------------------------------------------|
//! | hessian       | `L_i(θ) - L_i(θ₀) - 2ξ_i a_iᵀ(θ - θ₀)`                  |
//! | empirical-fim | `½(L_i(θ) - L_i(θ₀))² - s_i a_iᵀ(θ - θ₀)`               |
//! | trak          | `½(f_i(θ) - f_i(θ₀))² - s_i ∇f_i(θ₀)ᵀ(θ - θ₀)`          |
//!
//! Black-box rows drop every anchor term: `L_i(θ)`, `½L_i(θ)²`, `½f_i(θ)²`.
//!
//! In logits form the linear term `a_iᵀ(θ - θ₀)` becomes
//! `∇_g s(g₀)ᵀ(g(θ, x_i) - g(θ₀, x_i))` where `s` is the signal as a function of
//! the model output.

use serde::{Deserialize, Serialize};

use crate::curvature::SecondOrderKind;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::train::BatchObjective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessMode {
    WhiteBox,
    BlackBox,
}

/// Quantities at `θ₀` that the white-box objectives need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    pub kind: SecondOrderKind,
    pub access: AccessMode,
    pub use_logits_form: bool,
    pub params: ParamVector,
    /// `L_i(θ₀)` for every training example.
    pub ref_losses: Vec<f64>,
    /// `f_i(θ₀)`, trak kind only.
    pub ref_margins: Option<Vec<f64>>,
    /// `∇L_i(θ₀)` (white-box hessian / empirical-fim, parameter form).
    pub ref_grads: Option<Vec<Vec<f64>>>,
    /// `∇f_i(θ₀)` (white-box trak, parameter form).
    pub margin_grads: Option<Vec<Vec<f64>>>,
    /// `g(θ₀, x_i)` (logits form).
    pub ref_logits: Option<Vec<Vec<f64>>>,
    /// `∇_g L` or `∇_g f` at `g(θ₀, x_i)` (logits form).
    pub ref_output_grads: Option<Vec<Vec<f64>>>,
}

impl AnchorState {
    pub fn build(
        spec: &ModelSpec,
        params: &ParamVector,
        train: &Dataset,
        kind: SecondOrderKind,
        access: AccessMode,
        use_logits_form: bool,
    ) -> Result<Self> {
        crate::train::check_compatible(train, spec)?;
        spec.check(params)?;
        if kind.uses_margin() && !spec.is_classification() {
            return Err(Error::unsupported("trak objectives need a classification model"));
        }
        let mut state = AnchorState {
            kind,
            access,
            use_logits_form,
            params: params.clone(),
            ref_losses: Vec::with_capacity(train.len()),
            ref_margins: None,
            ref_grads: None,
            margin_grads: None,
            ref_logits: None,
            ref_output_grads: None,
        };
        for ex in train.examples() {
            state.ref_losses.push(model::per_example_loss(spec, params, ex)?);
        }
        if access == AccessMode::BlackBox {
            return Ok(state);
        }
        if kind.uses_margin() {
            let margins = train.examples().map(|ex| model::margin(spec, params, ex)).collect::<Result<_>>()?;
            state.ref_margins = Some(margins);
        }
        if use_logits_form {
            let mut logits = Vec::with_capacity(train.len());
            let mut grads = Vec::with_capacity(train.len());
            for ex in train.examples() {
                let g = model::predict(spec, params, ex.x)?;
                let (_, d) = if kind.uses_margin() {
                    model::margin_from_output(&g, ex.y)?
                } else {
                    model::loss_from_output(&g, ex.y)?
                };
                logits.push(g);
                grads.push(d);
            }
            state.ref_logits = Some(logits);
            state.ref_output_grads = Some(grads);
        } else if kind.uses_margin() {
            let g = train.examples().map(|ex| model::margin_grad(spec, params, ex)).collect::<Result<_>>()?;
            state.margin_grads = Some(g);
        } else {
            let g = train.examples().map(|ex| model::per_example_grad(spec, params, ex)).collect::<Result<_>>()?;
            state.ref_grads = Some(g);
        }
        Ok(state)
    }

    /// Anchor gradient of the attribution signal for training row `i`.
    pub fn signal_grad(&self, i: usize) -> Option<&[f64]> {
        let grads = if self.kind.uses_margin() { &self.margin_grads } else { &self.ref_grads };
        grads.as_ref().map(|g| g[i].as_slice())
    }

    /// Recomputes the caches for the listed rows and compares them.
    pub fn spot_check(&self, spec: &ModelSpec, train: &Dataset, rows: &[usize]) -> Result<()> {
        let fresh_state = Self::build(
            spec,
            &self.params,
            &train.select(rows)?,
            self.kind,
            self.access,
            self.use_logits_form,
        )?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        for (pos, &i) in rows.iter().enumerate() {
            let ok = close(self.ref_losses[i], fresh_state.ref_losses[pos])
                && pairs(&self.ref_margins, &fresh_state.ref_margins, i, pos).all(|(a, b)| close(a, b))
                && nested(&self.ref_grads, &fresh_state.ref_grads, i, pos).all(|(a, b)| close(a, b))
                && nested(&self.margin_grads, &fresh_state.margin_grads, i, pos).all(|(a, b)| close(a, b))
                && nested(&self.ref_logits, &fresh_state.ref_logits, i, pos).all(|(a, b)| close(a, b))
                && nested(&self.ref_output_grads, &fresh_state.ref_output_grads, i, pos).all(|(a, b)| close(a, b));
            if !ok {
                return Err(Error::Format(format!("anchor cache for training row {i} does not match θ₀")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_for(&self, kind: SecondOrderKind, access: AccessMode, use_logits_form: bool, n: usize) -> Result<()> {
        if self.ref_losses.len() != n {
            return Err(Error::input(format!("anchor covers {} examples, training set has {n}", self.ref_losses.len())));
        }
        let mismatch = self.access != AccessMode::WhiteBox || self.kind != kind || self.use_logits_form != use_logits_form;
        if access == AccessMode::WhiteBox && mismatch {
            return Err(Error::input(format!(
                "anchor caches were built for {:?}/{:?}/logits={}, ensemble needs {:?}/{:?}/logits={}",
                self.kind, self.access, self.use_logits_form, kind, access, use_logits_form
            )));
        }
        Ok(())
    }
}

fn pairs<'a>(a: &'a Option<Vec<f64>>, b: &'a Option<Vec<f64>>, i: usize, pos: usize) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.iter().zip(b.iter()).map(move |(x, y)| (x[i], y[pos]))
}

fn nested<'a>(
    a: &'a Option<Vec<Vec<f64>>>,
    b: &'a Option<Vec<Vec<f64>>>,
    i: usize,
    pos: usize,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.iter().zip(b.iter()).flat_map(move |(x, y)| x[i].iter().copied().zip(y[pos].iter().copied()))
}

/// One member's perturbed objective; its terms are positions in `subset`.
pub struct PerturbedObjective<'a> {
    pub kind: SecondOrderKind,
    pub access: AccessMode,
    pub use_logits_form: bool,
    pub spec: &'a ModelSpec,
    pub train: &'a Dataset,
    pub anchor: &'a AnchorState,
    /// Training rows of the member's subset.
    pub subset: &'a [usize],
    /// `ξ` per subset position.
    pub xi: &'a [f64],
}

impl<'a> PerturbedObjective<'a> {
    pub fn new(
        kind: SecondOrderKind,
        access: AccessMode,
        use_logits_form: bool,
        spec: &'a ModelSpec,
        train: &'a Dataset,
        anchor: &'a AnchorState,
        subset: &'a [usize],
        xi: &'a [f64],
    ) -> Result<Self> {
        if kind.uses_margin() && !spec.is_classification() {
            return Err(Error::unsupported("trak objectives need a classification model"));
        }
        if subset.len() != xi.len() {
            return Err(Error::input("one ξ per subset example is required"));
        }
        if subset.iter().any(|&i| i >= train.len()) {
            return Err(Error::input("subset row out of range"));
        }
        anchor.check_for(kind, access, use_logits_form, train.len())?;
        if access == AccessMode::WhiteBox {
            let cached = if use_logits_form {
                anchor.ref_output_grads.is_some() && anchor.ref_logits.is_some()
            } else {
                anchor.signal_grad(0).is_some()
            };
            if !cached || (kind.uses_margin() && anchor.ref_margins.is_none()) {
                return Err(Error::input("white-box objective needs anchor gradient caches"));
            }
        }
        Ok(Self { kind, access, use_logits_form, spec, train, anchor, subset, xi })
    }

    /// Coefficient on the first-order term for `ξ`.
    fn first_order_coef(&self, xi: f64) -> f64 {
        match self.kind {
            SecondOrderKind::Hessian => 2.0 * xi,
            SecondOrderKind::EmpiricalFim | SecondOrderKind::Trak => 2.0 * xi - 1.0,
        }
    }

    /// Value of one term and its contributions to the gradient: the output
    /// cotangent and (parameter form) the coefficient on the cached anchor
    /// gradient.
    fn term(&self, params: &[f64], pos: usize, grad: &mut [f64]) -> Result<f64> {
        let i = self.subset[pos];
        let ex = self.train.example(i);
        let trace = model::forward(self.spec, params, ex.x);
        let g = trace.output();
        let (signal, dsignal) = if self.kind.uses_margin() {
            model::margin_from_output(g, ex.y)?
        } else {
            model::loss_from_output(g, ex.y)?
        };
        if self.access == AccessMode::BlackBox {
            let (value, cot): (f64, Vec<f64>) = match self.kind {
                SecondOrderKind::Hessian => (signal, dsignal),
                _ => (0.5 * signal * signal, dsignal.iter().map(|d| signal * d).collect()),
            };
            model::vjp_into(self.spec, params, ex.x, &trace, &cot, grad);
            return Ok(value);
        }

        let reference = match self.kind {
            SecondOrderKind::Trak => self.anchor.ref_margins.as_ref().expect("checked in new")[i],
            _ => self.anchor.ref_losses[i],
        };
        let diff = signal - reference;
        let (base_value, mut cot): (f64, Vec<f64>) = match self.kind {
            SecondOrderKind::Hessian => (diff, dsignal),
            _ => (0.5 * diff * diff, dsignal.iter().map(|d| diff * d).collect()),
        };
        let coef = self.first_order_coef(self.xi[pos]);
        let linear = if self.use_logits_form {
            let g0 = &self.anchor.ref_logits.as_ref().expect("checked in new")[i];
            let c0 = &self.anchor.ref_output_grads.as_ref().expect("checked in new")[i];
            for (c, d) in cot.iter_mut().zip(c0) {
                *c -= coef * d;
            }
            c0.iter().zip(g.iter().zip(g0)).map(|(c, (a, b))| c * (a - b)).sum::<f64>()
        } else {
            let a = self.anchor.signal_grad(i).expect("checked in new");
            let theta0 = self.anchor.params.as_slice();
            for (gk, ak) in grad.iter_mut().zip(a) {
                *gk -= coef * ak;
            }
            a.iter().zip(params.iter().zip(theta0)).map(|(ak, (t, t0))| ak * (t - t0)).sum::<f64>()
        };
        model::vjp_into(self.spec, params, ex.x, &trace, &cot, grad);
        Ok(base_value - coef * linear)
    }

    /// Gradient norms of the data term and of the first-order term alone over
    /// `terms` (white-box only; the first-order norm is 0 in black-box mode).
    pub fn gradient_split(&self, params: &[f64], terms: &[usize]) -> Result<(f64, f64)> {
        let p = params.len();
        let mut full = vec![0.0; p];
        for &t in terms {
            self.term(params, t, &mut full)?;
        }
        let neutral = match self.kind {
            SecondOrderKind::Hessian => 0.0,
            _ => 0.5,
        };
        let neutral_xi = vec![neutral; self.xi.len()];
        let data_only = PerturbedObjective { xi: &neutral_xi, ..*self };
        let mut data = vec![0.0; p];
        for &t in terms {
            data_only.term(params, t, &mut data)?;
        }
        let scale = 1.0 / terms.len().max(1) as f64;
        let norm = |v: &[f64]| v.iter().map(|x| (x * scale).powi(2)).sum::<f64>().sqrt();
        let first: Vec<f64> = full.iter().zip(&data).map(|(a, b)| a - b).collect();
        Ok((norm(&data), norm(&first)))
    }
}

impl BatchObjective for PerturbedObjective<'_> {
    fn num_terms(&self) -> usize {
        self.subset.len()
    }

    fn value_and_grad(&self, params: &[f64], terms: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let mut value = 0.0;
        for &t in terms {
            value += self.term(params, t, &mut grad)?;
        }
        let scale = 1.0 / terms.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((value * scale, grad))
    }
}

/// Mean perturbed objective over the whole subset at `params`.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_objective(
    kind: SecondOrderKind,
    access: AccessMode,
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    anchor: &AnchorState,
    subset: &[usize],
    xi: &[f64],
    use_logits_form: bool,
) -> Result<(f64, Vec<f64>)> {
    spec.check(params)?;
    let obj = PerturbedObjective::new(kind, access, use_logits_form, spec, train, anchor, subset, xi)?;
    let all: Vec<usize> = (0..subset.len()).collect();
    obj.value_and_grad(params.as_slice(), &all)
}
