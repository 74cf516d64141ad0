//! Central finite-difference gradient checking.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    /// Set when the function or its gradient produced NaN/Inf; names the
    /// offending (input, coordinate).
    pub non_finite: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one tensor at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    grad_check_many(|tape, ids| f(tape, ids[0]), std::slice::from_ref(point), eps)
}

/// Checks the gradient of a scalar function of several tensors, all of which
/// are recorded as parameters.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.param(v.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        non_finite: None,
    };
    let mut probe: Vec<Tensor> = points.to_vec();
    for (input, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        for coord in 0..points[input].numel() {
            let original = points[input].data()[coord];
            probe[input].data_mut()[coord] = original + eps;
            let up = eval(&probe)?;
            probe[input].data_mut()[coord] = original - eps;
            let down = eval(&probe)?;
            probe[input].data_mut()[coord] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[coord];
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = Some((input, coord));
                report.max_rel_error = f64::INFINITY;
                report.worst = (input, coord);
                return Ok(report);
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (input, coord);
            }
        }
    }
    Ok(report)
}
