//! Central finite-difference verification of analytic gradients.
//!
//! The harness rebuilds the forward pass from scratch for every perturbed
//! element, so it works for any closure that maps leaves to a scalar loss.
//! All checks run in f64.

use super::graph::{Graph, VarId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: disagreements below this absolute scale are noise.
pub const REL_FLOOR: f64 = 1e-8;

/// Absolute agreement threshold. Central differences carry ~|loss|*1e-11 of
/// cancellation noise, so a structurally zero gradient shows up as a tiny
/// nonzero numeric estimate; differences under this bound count as exact.
pub const FD_ATOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all inputs and elements.
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` for the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    if (a - n).abs() < FD_ATOL {
        return 0.0;
    }
    let denom = a.abs().max(n.abs()).max(REL_FLOOR);
    (a - n).abs() / denom
}

fn eval_loss<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let mut graph = Graph::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone(), false))
        .collect::<Result<_>>()?;
    let loss = build(&mut graph, &ids)?;
    graph.value(loss).item()
}

/// Compare caller-supplied gradients (one `Vec` per input, or `None` to skip
/// that input) against central finite differences of the rebuilt loss.
pub fn compare_with_fd<F>(
    inputs: &[Tensor<f64>],
    analytic: &[Option<Vec<f64>>],
    build: &F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    if analytic.len() != inputs.len() {
        return Err(Error::contract(
            "one analytic gradient slot required per input",
        ));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        elements_checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        if grad.len() != inputs[ti].numel() {
            return Err(Error::contract(format!(
                "analytic gradient length {} does not match input {} with {} elements",
                grad.len(),
                ti,
                inputs[ti].numel()
            )));
        }
        for ei in 0..grad.len() {
            let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
            let orig = perturbed[ti].data()[ei];
            perturbed[ti].data_mut()[ei] = orig + step;
            let up = eval_loss(&perturbed, build)?;
            perturbed[ti].data_mut()[ei] = orig - step;
            let down = eval_loss(&perturbed, build)?;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(grad[ei], numeric);
            report.elements_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei, grad[ei], numeric));
            }
        }
    }
    Ok(report)
}

/// Run `build` once with every input marked differentiable, backpropagate,
/// and verify each leaf gradient against central finite differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let mut graph = Graph::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut graph, &ids)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::contract("gradient check requires a scalar loss"));
    }
    graph.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = ids
        .iter()
        .map(|&id| Some(graph.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| {
            // loss independent of this leaf: gradient is identically zero
            vec![0.0; graph.value(id).numel()]
        })))
        .collect();
    compare_with_fd(inputs, &analytic, &build, step)
}
