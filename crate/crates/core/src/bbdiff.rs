//! Blackbox differentiation of the shortest-path solver.
//!
//! The forward pass solves the plan and keeps the inputs. The backward pass
//! perturbs the costs along the incoming loss gradient, solves once more and
//! returns the scaled difference of the two plans. It costs exactly one extra
//! solver call.

use crate::error::{Error, Result};
use crate::tdsp::{solve_tdsp, CostGradient, CostTensor, GridGraph, PathMatrix};

/// Forward-pass state needed by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverContext {
    pub costs: CostTensor,
    pub start: usize,
    pub goal: usize,
    pub path: PathMatrix,
}

pub fn forward(
    graph: &GridGraph,
    costs: &CostTensor,
    start: usize,
    goal: usize,
) -> Result<(PathMatrix, SolverContext)> {
    let path = solve_tdsp(graph, costs, start, goal)?;
    let ctx = SolverContext {
        costs: costs.clone(),
        start,
        goal,
        path: path.clone(),
    };
    Ok((path, ctx))
}

/// Gradient of the interpolated loss with respect to the costs:
/// `(Y_λ - Y) / λ` where `Y_λ` solves the costs `C + λ ∇L(Y)`.
pub fn backward(
    graph: &GridGraph,
    ctx: &SolverContext,
    grad_of_loss_wrt_path: &CostGradient,
    lambda: f64,
) -> Result<CostGradient> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "interpolation strength must be positive, got {lambda}"
        )));
    }
    let perturbed = ctx.costs.add_scaled(grad_of_loss_wrt_path, lambda)?;
    let path_lambda = solve_tdsp(graph, &perturbed, ctx.start, ctx.goal)?;
    let n = ctx.path.num_vertices();
    CostTensor::from_fn(ctx.path.horizon(), n, |t, v| {
        let diff = i8::from(path_lambda.get(t, v)) - i8::from(ctx.path.get(t, v));
        f64::from(diff) / lambda
    })
}

fn check_same_shape(a: &PathMatrix, b: &PathMatrix) -> Result<()> {
    if a.horizon() != b.horizon() || a.num_vertices() != b.num_vertices() {
        return Err(Error::InvalidArgument(format!(
            "path shapes differ: {}x{} vs {}x{}",
            a.horizon(),
            a.num_vertices(),
            b.horizon(),
            b.num_vertices()
        )));
    }
    Ok(())
}

/// Number of entries where the two indicator matrices differ.
pub fn hamming_loss(y: &PathMatrix, y_star: &PathMatrix) -> Result<f64> {
    check_same_shape(y, y_star)?;
    let diff = y
        .cells()
        .iter()
        .zip(y_star.cells())
        .filter(|(a, b)| a != b)
        .count();
    Ok(diff as f64)
}

/// Gradient of the Hamming loss in `Y`, which is affine on binary matrices:
/// `d(Y, Y*) = <Y, 1 - 2Y*> + |Y*|`.
pub fn hamming_grad(y_star: &PathMatrix) -> CostGradient {
    let t = y_star.to_tensor();
    let values = t.values().iter().map(|y| 1.0 - 2.0 * y).collect();
    CostTensor::new(y_star.horizon(), y_star.num_vertices(), values)
        .expect("shape taken from a valid path")
}

/// Raises the costs on the expert path by `alpha / 2` and lowers all others by
/// the same amount.
pub fn apply_margin(costs: &CostTensor, y_star: &PathMatrix, alpha: f64) -> Result<CostTensor> {
    if !costs.same_shape(y_star.horizon(), y_star.num_vertices()) {
        return Err(Error::InvalidArgument(format!(
            "cost tensor is {}x{}, expert path is {}x{}",
            costs.horizon(),
            costs.num_vertices(),
            y_star.horizon(),
            y_star.num_vertices()
        )));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "margin must be nonnegative, got {alpha}"
        )));
    }
    let half = alpha / 2.0;
    let values = costs
        .values()
        .iter()
        .zip(y_star.cells())
        .map(|(&c, &y)| if y == 1 { c + half } else { c - half })
        .collect();
    CostTensor::new(costs.horizon(), costs.num_vertices(), values)
}
