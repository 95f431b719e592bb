//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from one tape-based backward pass; the
//! numerical one from `(f(θ + h) − f(θ − h)) / 2h`, evaluated element by
//! element through forward passes only.

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Step and tolerance for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(parameter index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Analytic gradients of `f` at `params`, one tensor per parameter.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.is_tracked(out) {
        // f does not depend on any parameter
        return Ok(params.iter().map(|p| Tensor::zeros(p.shape())).collect());
    }
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Compare analytic gradients of a scalar function against central
/// differences for every element of every parameter.
///
/// `f` builds the scalar on a fresh tape from the parameter handles. It is
/// evaluated twice at the unperturbed point; if the two values differ the
/// function is not deterministic and the check is refused.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if cfg.h <= 0.0 {
        return Err(TensorError::Invalid(format!("step h = {} must be positive", cfg.h)));
    }
    let f0 = eval(&f, params)?;
    let f1 = eval(&f, params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(TensorError::Invalid(format!(
            "function is not deterministic: {f0} vs {f1}"
        )));
    }
    let analytic = analytic_gradients(&f, params)?;
    check_against(&f, params, &analytic, cfg)
}

/// Same as [`finite_diff_check`] but with caller-supplied analytic
/// gradients, e.g. to confirm the harness catches a corrupted gradient.
pub fn check_against<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + cfg.h;
            let plus = eval(f, &work)?;
            work[pi].data_mut()[ei] = orig - cfg.h;
            let minus = eval(f, &work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[pi].data()[ei];
            let rel = relative_error(a, numeric, cfg.floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((pi, ei));
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err < cfg.tol;
    Ok(report)
}
