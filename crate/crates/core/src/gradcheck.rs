//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward function, so it stays
//! independent of the adjoint code it is used to verify.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Elements whose analytic and numerical magnitudes are both below this
/// floor are compared on an absolute scale of `floor * tolerance`.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numerical: f64) -> f64 {
    let scale = analytic.abs().max(numerical.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numerical).abs() / scale
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element
/// of every input tensor.
pub fn central_differences<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst element found by [`compare`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numerical_at_worst: f64,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares analytic gradients against numerical ones element by element.
pub fn compare(analytic: &[Tensor], numerical: &[Tensor]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numerical_at_worst: 0.0,
        elements: 0,
    };
    for (t, (a, n)) in analytic.iter().zip(numerical).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shapes differ for input {t}");
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.elements += 1;
            let err = relative_error(av, nv);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((t, i));
                report.analytic_at_worst = av;
                report.numerical_at_worst = nv;
            }
        }
    }
    report
}

/// Checks the gradient of a model's full batch objective with respect to
/// every parameter.
#[allow(clippy::too_many_arguments)]
pub fn check_objective(
    model: &Model,
    images: &Tensor,
    concepts: &Tensor,
    labels: &[usize],
    lambda_c: f64,
    lambda_g: Option<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let obj = model.objective(&bound, &mut tape, images, concepts, labels, lambda_c, lambda_g)?;
    let grads = tape.backward(obj.total)?;
    let params = model.parameters();
    let analytic = bound
        .vars()
        .into_iter()
        .zip(&params)
        .map(|(v, p)| grads.wrt(v).reshape(p.shape().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let numerical = central_differences(
        |params| {
            let m = model.with_parameters(params)?;
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, false);
            let obj = m.objective(&bound, &mut tape, images, concepts, labels, lambda_c, lambda_g)?;
            tape.value(obj.total).item()
        },
        &params,
        h,
    )?;
    Ok(compare(&analytic, &numerical))
}
