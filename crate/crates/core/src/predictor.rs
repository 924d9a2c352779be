//! One-step output-error predictor for the inverse model: the predicted
//! input is û = B†(A y) with both polynomials scheduled along ρ, and the
//! residual is ε = ũ − û.

use nalgebra::{DMatrix, DVector};

use crate::coeffs::{
    evaluate_trajectories, evaluate_trajectories_with_jacobians, CoefficientMap,
};
use crate::delta::{
    apply_a_polynomial, delta_signal, inverse_monic_filter, inverse_monic_filter_multi,
    CoefficientTrajectories, DeltaContext, ModelOrders,
};
use crate::error::{Error, Result};

/// One identification record: measured input, output and scheduling signal on
/// a shared uniform time grid. Row k of `rho` is the scheduling point at
/// sample k.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u_meas: DVector<f64>,
    pub y: DVector<f64>,
    pub rho: DMatrix<f64>,
    pub ctx: DeltaContext,
}

impl Dataset {
    pub fn new(
        u_meas: DVector<f64>,
        y: DVector<f64>,
        rho: DMatrix<f64>,
        ctx: DeltaContext,
    ) -> Result<Self> {
        let n = u_meas.len();
        if y.len() != n || rho.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "signals disagree on length: u has {}, y has {}, rho has {} rows",
                n,
                y.len(),
                rho.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        for (name, v) in [("u_meas", &u_meas), ("y", &y)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} contains a non-finite sample")));
            }
        }
        if rho.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("rho contains a non-finite sample".into()));
        }
        Ok(Self { u_meas, y, rho, ctx })
    }

    pub fn len(&self) -> usize {
        self.u_meas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub u_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
}

fn predict_from_trajectories(
    data: &Dataset,
    coeffs: &CoefficientTrajectories,
) -> Result<PredictionResult> {
    let s_a = apply_a_polynomial(&data.y, coeffs, &data.ctx)?;
    let u_hat = inverse_monic_filter(&s_a, coeffs, &data.ctx)?;
    let residuals = &data.u_meas - &u_hat;
    let cost = residuals.norm_squared();
    Ok(PredictionResult {
        u_hat,
        residuals,
        cost,
    })
}

/// Runs the predictor over the record.
pub fn predict(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
) -> Result<PredictionResult> {
    let coeffs = evaluate_trajectories(map, &data.rho, orders)?;
    predict_from_trajectories(data, &coeffs)
}

/// Residual Jacobian J with J[(k, j)] = dε(k)/dφ_j.
///
/// Differentiating B û = A y in φ and solving for dû/dφ gives
///   dû/dφ_j = B†[ Σ_i (da_i/dφ_j) δ^i y − Σ_i (db_i/dφ_j) δ^i û ],
/// so the lag signals δ^i y and δ^i û are shared across all parameters and
/// the whole Jacobian needs exactly two inverse-filter passes: one for û
/// itself and one multi-column pass over the combined lag terms.
pub fn predict_with_jacobian(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
) -> Result<(PredictionResult, DMatrix<f64>)> {
    let (coeffs, jacobians) =
        evaluate_trajectories_with_jacobians(map, &data.rho, orders)?;
    let prediction = predict_from_trajectories(data, &coeffs)?;

    let n = data.len();
    let n_a = orders.n_a();
    let n_b = orders.n_b();
    let n_params = map.param_count();

    let y_lags: Vec<DVector<f64>> = (0..n_a)
        .map(|i| delta_signal(&data.y, i, &data.ctx))
        .collect();
    let s_lags: Vec<DVector<f64>> = (1..n_b)
        .map(|i| delta_signal(&prediction.u_hat, i, &data.ctx))
        .collect();

    let mut terms = DMatrix::zeros(n, n_params);
    for k in 0..n {
        let g = &jacobians[k];
        for (i, lag) in y_lags.iter().enumerate() {
            let w = lag[k];
            if w == 0.0 {
                continue;
            }
            for j in 0..n_params {
                terms[(k, j)] += w * g[(i, j)];
            }
        }
        for (i, lag) in s_lags.iter().enumerate() {
            let w = lag[k];
            if w == 0.0 {
                continue;
            }
            let row = n_a + i;
            for j in 0..n_params {
                terms[(k, j)] -= w * g[(row, j)];
            }
        }
    }

    let jac = -inverse_monic_filter_multi(&terms, &coeffs, &data.ctx)?;
    Ok((prediction, jac))
}

/// Residual Jacobian alone; see [`predict_with_jacobian`].
pub fn residual_jacobian(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
) -> Result<DMatrix<f64>> {
    Ok(predict_with_jacobian(map, data, orders)?.1)
}

/// Gradient of the squared-residual cost: 2 Jᵀ ε.
pub fn cost_gradient(jacobian: &DMatrix<f64>, residuals: &DVector<f64>) -> DVector<f64> {
    2.0 * jacobian.tr_mul(residuals)
}
