//! Coefficient functions: maps from the scheduling variable to the stacked
//! model coefficients [a_0 .. a_{n_a−1}, b_1 .. b_{n_b−1}].

mod basis;
mod net;
mod scaled;

pub use basis::CoefficientBasisMap;
pub use net::{
    forward_eval_count, reset_forward_eval_count, Activation, ForwardCache,
    LayerSensitivities, SchedulingNet,
};
pub use scaled::{magnitude_scale, ScaledNet};

use nalgebra::{DMatrix, DVector};

use crate::delta::{CoefficientTrajectories, ModelOrders};
use crate::error::{Error, Result};

/// A parameterized map from a scheduling point to the stacked coefficient
/// vector. Implementations are interchangeable everywhere downstream: the
/// predictor and the optimizers only see this interface.
pub trait CoefficientMap: Clone {
    /// Dimension of the scheduling variable the map accepts.
    fn scheduling_dim(&self) -> usize;

    /// Length of the coefficient vector the map produces.
    fn output_width(&self) -> usize;

    fn param_count(&self) -> usize;

    /// Current parameters in flattening order.
    fn params(&self) -> DVector<f64>;

    /// Replaces the parameters; the vector must match `param_count`.
    fn set_params(&mut self, values: &DVector<f64>) -> Result<()>;

    fn eval(&self, rho: &[f64]) -> Result<DVector<f64>>;

    /// Value plus the Jacobian of the output with respect to the parameters,
    /// evaluated from a single forward pass.
    fn eval_with_param_jacobian(&self, rho: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

fn check_scheduling(map: &impl CoefficientMap, rho: &DMatrix<f64>) -> Result<()> {
    if rho.ncols() != map.scheduling_dim() {
        return Err(Error::DimensionMismatch(format!(
            "scheduling signal has {} columns but the coefficient map expects {}",
            rho.ncols(),
            map.scheduling_dim()
        )));
    }
    Ok(())
}

/// Evaluates the map along a scheduling trajectory (row k of `rho` is the
/// scheduling point at sample k) and splits the outputs into coefficient
/// trajectories.
pub fn evaluate_trajectories(
    map: &impl CoefficientMap,
    rho: &DMatrix<f64>,
    orders: ModelOrders,
) -> Result<CoefficientTrajectories> {
    if map.output_width() != orders.coefficient_width() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient map produces {} values but orders need {}",
            map.output_width(),
            orders.coefficient_width()
        )));
    }
    check_scheduling(map, rho)?;
    let n = rho.nrows();
    let n_a = orders.n_a();
    let mut a = DMatrix::zeros(n, n_a);
    let mut b = DMatrix::zeros(n, orders.n_b() - 1);
    let mut point = vec![0.0; rho.ncols()];
    for k in 0..n {
        for (c, slot) in point.iter_mut().enumerate() {
            *slot = rho[(k, c)];
        }
        let out = map.eval(&point)?;
        for i in 0..n_a {
            a[(k, i)] = out[i];
        }
        for i in 0..b.ncols() {
            b[(k, i)] = out[n_a + i];
        }
    }
    CoefficientTrajectories::new(a, b, orders)
}

/// Trajectories together with the per-sample parameter Jacobians of the
/// coefficient vector, sharing one forward pass per sample.
pub fn evaluate_trajectories_with_jacobians(
    map: &impl CoefficientMap,
    rho: &DMatrix<f64>,
    orders: ModelOrders,
) -> Result<(CoefficientTrajectories, Vec<DMatrix<f64>>)> {
    if map.output_width() != orders.coefficient_width() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient map produces {} values but orders need {}",
            map.output_width(),
            orders.coefficient_width()
        )));
    }
    check_scheduling(map, rho)?;
    let n = rho.nrows();
    let n_a = orders.n_a();
    let mut a = DMatrix::zeros(n, n_a);
    let mut b = DMatrix::zeros(n, orders.n_b() - 1);
    let mut jacobians = Vec::with_capacity(n);
    let mut point = vec![0.0; rho.ncols()];
    for k in 0..n {
        for (c, slot) in point.iter_mut().enumerate() {
            *slot = rho[(k, c)];
        }
        let (out, jac) = map.eval_with_param_jacobian(&point)?;
        for i in 0..n_a {
            a[(k, i)] = out[i];
        }
        for i in 0..b.ncols() {
            b[(k, i)] = out[n_a + i];
        }
        jacobians.push(jac);
    }
    Ok((CoefficientTrajectories::new(a, b, orders)?, jacobians))
}
