//! Central finite-difference verification of `backward`.

use crate::error::{NnError, Result};
use crate::exec::{backward, crosses_kink, forward, forward_from};
use crate::loss::loss_softmax_ce;
use crate::model::Model;
use crate::tensor::Tensor;

/// Largest parameter count accepted by the checker.
pub const MAX_CHECK_PARAMS: usize = 10_000;

/// Gradients smaller than this in magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(layer, flat parameter index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// Parameters compared against a finite difference.
    pub checked: usize,
    /// Parameters whose ±epsilon probe crossed a ReLU or max-pool switch point.
    /// A central difference is meaningless there, so they are left out of the maximum.
    pub kinks: usize,
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `backward` against central differences of `loss` over every
/// parameter. The whole check runs in f64 on a widened copy of the model.
pub fn grad_check<L>(model: &Model, batch: &Tensor, loss: L, epsilon: f64) -> Result<GradCheckReport>
where
    L: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(NnError::Invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    if model.param_count() > MAX_CHECK_PARAMS {
        return Err(NnError::Invalid(format!(
            "{} parameters exceeds the grad-check limit of {MAX_CHECK_PARAMS}",
            model.param_count()
        )));
    }
    let mut wide: Model<f64> = model.cast();
    let x: Tensor<f64> = batch.cast();
    let acts = forward(&wide, &x)?;
    let (_, out_grad) = loss(acts.output())?;
    let analytic = backward(&wide, &acts, &out_grad)?;

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0, kinks: 0 };
    for layer in 0..wide.layers().len() {
        let Some(count) = wide.params()[layer].as_ref().map(|p| p.len()) else { continue };
        let grad = analytic.per_layer[layer].as_ref().expect("gradient slot for parametric layer");
        for idx in 0..count {
            let original = wide.params()[layer].as_ref().expect("param").value(idx);
            *wide.params_mut()[layer].as_mut().expect("param").value_mut(idx) = original + epsilon;
            let plus = forward_from(&wide, &acts, layer)?;
            *wide.params_mut()[layer].as_mut().expect("param").value_mut(idx) = original - epsilon;
            let minus = forward_from(&wide, &acts, layer)?;
            *wide.params_mut()[layer].as_mut().expect("param").value_mut(idx) = original;

            if crosses_kink(&wide, &plus, &acts, layer) || crosses_kink(&wide, &minus, &acts, layer) {
                report.kinks += 1;
                continue;
            }
            let numeric = (loss(plus.output())?.0 - loss(minus.output())?.0) / (2.0 * epsilon);
            let err = relative_error(grad.value(idx), numeric);
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = err;
                report.worst = Some((layer, idx));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Grad check under mean softmax cross-entropy.
pub fn grad_check_softmax(model: &Model, batch: &Tensor, labels: &[usize], epsilon: f64) -> Result<GradCheckReport> {
    grad_check(model, batch, |out| loss_softmax_ce(out, labels), epsilon)
}
