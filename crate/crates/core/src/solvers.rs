//! Measurement-consistency updates: IST, GAP, accelerated GAP and the ADMM x/w/v steps.

use crate::error::{check_len, Error, Result};
use crate::patches::{PatchGrid, PatchSet};
use crate::sensing::SensingOperator;

/// Iterates carried across outer iterations of a reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    /// Accumulated measurement vector of accelerated GAP.
    pub y_running: Vec<f64>,
    pub iteration: usize,
    pub objective_trace: Vec<f64>,
}

impl SolverState {
    /// `x = w = x0`, `v = 0`, `y_running = y`.
    pub fn new(x0: Vec<f64>, y: &[f64]) -> Self {
        let n = x0.len();
        Self {
            w: x0.clone(),
            x: x0,
            v: vec![0.0; n],
            y_running: y.to_vec(),
            iteration: 0,
            objective_trace: Vec::new(),
        }
    }
}

fn residual(op: &SensingOperator, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len("measurement length", op.num_rows(), y.len())?;
    let ax = op.apply(x)?;
    Ok(y.iter().zip(&ax).map(|(a, b)| a - b).collect())
}

/// `‖y − A x‖₂`.
pub fn data_residual(op: &SensingOperator, y: &[f64], x: &[f64]) -> Result<f64> {
    Ok(residual(op, y, x)?.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `x + Aᵀ(y − A x)/ζ`.
pub fn ist_step(op: &SensingOperator, y: &[f64], x: &[f64], zeta: f64) -> Result<Vec<f64>> {
    if !(zeta > 0.0) {
        return Err(Error::invalid(format!("zeta {zeta} must be positive")));
    }
    let back = op.adjoint(&residual(op, y, x)?)?;
    Ok(x.iter().zip(&back).map(|(a, b)| a + b / zeta).collect())
}

/// Euclidean projection onto `{x : A x = y}`; with orthonormal rows this is `x + Aᵀ(y − A x)`.
pub fn gap_step(op: &SensingOperator, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    ist_step(op, y, x, 1.0)
}

/// `y_run ← y_run + (y − A x)`, then `x ← x + Aᵀ(y_run − A x)`, both evaluated at the incoming `x`.
pub fn acc_gap_step(op: &SensingOperator, y: &[f64], state: &mut SolverState) -> Result<()> {
    check_len("running measurement length", op.num_rows(), state.y_running.len())?;
    check_len("measurement length", op.num_rows(), y.len())?;
    let ax = op.apply(&state.x)?;
    for ((yr, &yi), &a) in state.y_running.iter_mut().zip(y).zip(&ax) {
        *yr += yi - a;
    }
    let r: Vec<f64> = state.y_running.iter().zip(&ax).map(|(a, b)| a - b).collect();
    let back = op.adjoint(&r)?;
    for (xi, b) in state.x.iter_mut().zip(&back) {
        *xi += b;
    }
    state.iteration += 1;
    Ok(())
}

/// `(w − v) + Aᵀ(y − A(w − v))/(β + 1)`, the minimizer of `½‖y − Ax‖² + β/2‖x − w + v‖²`
/// when `A Aᵀ = I`.
pub fn admm_x_step(op: &SensingOperator, y: &[f64], w: &[f64], v: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta {beta} must be positive")));
    }
    check_len("ADMM v length", w.len(), v.len())?;
    let base: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - b).collect();
    let back = op.adjoint(&residual(op, y, &base)?)?;
    Ok(base
        .iter()
        .zip(&back)
        .map(|(a, b)| a + b / (beta + 1.0))
        .collect())
}

/// Elementwise `[β(x + v) + η Σ R_iᵀ t_i]_n / (η r_n + β)`, the minimizer of
/// `η/2 Σ ‖R_i w − t_i‖² + β/2 ‖x − w + v‖²`.
pub fn admm_w_step(
    grid: &PatchGrid,
    x: &[f64],
    v: &[f64],
    targets: &PatchSet,
    beta: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    if beta < 0.0 || eta < 0.0 || (beta == 0.0 && eta == 0.0) || beta.is_nan() || eta.is_nan() {
        return Err(Error::invalid(format!(
            "beta {beta} and eta {eta} must be nonnegative and not both zero"
        )));
    }
    check_len("ADMM x length", grid.num_pixels(), x.len())?;
    check_len("ADMM v length", grid.num_pixels(), v.len())?;
    let agg = grid.aggregate(targets)?;
    Ok(x.iter()
        .zip(v)
        .zip(&agg)
        .zip(grid.overlap_counts())
        .map(|(((&xi, &vi), &a), &r)| (beta * (xi + vi) + eta * a) / (eta * r as f64 + beta))
        .collect())
}

/// `v + (x − w)`.
pub fn admm_v_step(v: &[f64], x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_len("ADMM x length", v.len(), x.len())?;
    check_len("ADMM w length", v.len(), w.len())?;
    Ok(v.iter().zip(x).zip(w).map(|((a, b), c)| a + b - c).collect())
}
