//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub frozen: bool,
    pub analytic: Tensor,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked_elements: usize,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(tape: &mut Tape, f: &impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
    let v = f(tape)?;
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(Error::Input(format!(
            "grad_check needs a scalar function, got {:?}",
            value.shape()
        )));
    }
    let x = value.item();
    if !x.is_finite() {
        return Err(Error::NumericInstability(format!("function value {x}")));
    }
    Ok(x)
}

/// Compares tape gradients of `f` with respect to `inputs` against central
/// differences at [`FD_STEP`]. `f` must read every input through
/// [`Tape::param`] and be deterministic.
///
/// Frozen inputs are reported with a zero gradient and excluded from the
/// maximum.
pub fn grad_check(inputs: &[&Parameter], f: impl Fn(&mut Tape) -> Result<Var>) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NumericInstability("non-finite loss".into()));
    }
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked_elements: 0,
        params: Vec::with_capacity(inputs.len()),
    };
    for p in inputs {
        if p.is_frozen() {
            report.params.push(ParamCheck {
                name: p.name().to_string(),
                frozen: true,
                analytic: Tensor::zeros(p.value.shape()),
                max_rel_error: 0.0,
            });
            continue;
        }
        let analytic = tape.param_grad(p).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        if !analytic.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite gradient for {}",
                p.name()
            )));
        }
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.data().iter().enumerate() {
            let plus = eval(&mut Tape::with_perturbation(p.id(), i, FD_STEP), &f)?;
            let minus = eval(&mut Tape::with_perturbation(p.id(), i, -FD_STEP), &f)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
        report.checked_elements += analytic.numel();
        report.max_relative_error = report.max_relative_error.max(worst);
        report.params.push(ParamCheck {
            name: p.name().to_string(),
            frozen: false,
            analytic,
            max_rel_error: worst,
        });
    }
    Ok(report)
}
