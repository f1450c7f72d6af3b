//! Central finite-difference comparison against tape gradients.

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::Result;
use crate::model::{Model, Pass};
use crate::tensor::Tensor;
use crate::units::Regime;

/// Gradients smaller than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Evaluates `build` once with tape gradients and `2·n` more times with
/// perturbed inputs. Returns the largest relative error per input.
///
/// `build` receives the input leaves in order and must return a scalar.
pub fn check_inputs<B>(inputs: &[Tensor<f64>], step: f64, build: B) -> Result<Vec<f64>>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.values(loss)[0])
    };

    let mut worst = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for e in 0..input.len() {
            let orig = input.values()[e];
            work[i].values_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[i].values_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[i].values_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[i].values()[e], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

/// Worst finite-difference disagreement for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

/// Teacher-forced NLL of `model` on one batch, without dropout.
fn model_loss(model: &Model<f64>, batch: &Batch, fault: Option<(&'static str, f64)>, grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut pass = Pass::with_regime(model, Regime::inference(), grads, 0);
    if let Some((op, scale)) = fault {
        pass.tape.inject_fault(op, scale);
    }
    let mem = pass.encode(&batch.src)?;
    let logits = pass.decode_train(&batch.tgt_in, &mem)?;
    let loss = pass.nll(logits, &batch.tgt_gold)?;
    let value = pass.tape.values(loss)[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    pass.backward(loss)?;
    Ok((value, pass.param_grads()))
}

/// Compares tape gradients of the model loss with central differences for
/// every parameter element. `fault` corrupts one op's backward rule and is
/// only meant for negative-control tests.
pub fn check_model(model: &Model<f64>, batch: &Batch, step: f64, fault: Option<(&'static str, f64)>) -> Result<Vec<ParamReport>> {
    let (_, analytic) = model_loss(model, batch, fault, true)?;
    let mut work = model.clone();
    let mut reports = Vec::with_capacity(analytic.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for e in 0..grad.len() {
            let orig = work.params().tensors()[pi].values()[e];
            work.params_mut().tensors_mut()[pi].values_mut()[e] = orig + step;
            let (up, _) = model_loss(&work, batch, None, false)?;
            work.params_mut().tensors_mut()[pi].values_mut()[e] = orig - step;
            let (down, _) = model_loss(&work, batch, None, false)?;
            work.params_mut().tensors_mut()[pi].values_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(relative_error(grad.values()[e], numeric));
        }
        let name = model.params().iter().nth(pi).map(|(n, _)| n.to_string()).unwrap_or_default();
        reports.push(ParamReport { name, elements: grad.len(), max_rel_error: max_err });
    }
    Ok(reports)
}
