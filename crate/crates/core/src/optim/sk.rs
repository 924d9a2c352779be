//! Iteratively reweighted equation-error scheme. Outer iteration q minimizes
//!
//!   V_SK = Σ ( B†_{q−1} (B_φ ũ − A_φ y) )²
//!
//! where B†_{q−1} is the inverse filter frozen at the previous iterate
//! (identity at q = 1). The frozen filter makes the surrogate residuals
//! affine in the coefficient values, and one multi-column inverse pass per
//! evaluation covers both the residuals and every gradient column. The true
//! output-error cost is tracked alongside; the scheme carries no convergence
//! guarantee, so a sustained rise in the true cost is flagged rather than
//! treated as an error.

use nalgebra::{DMatrix, DVector};

use super::{lm_minimize, LeastSquaresProblem, LmConfig, OptimizerReport, Termination};
use crate::coeffs::{
    evaluate_trajectories, evaluate_trajectories_with_jacobians, CoefficientMap,
};
use crate::delta::{
    apply_a_polynomial, apply_b_polynomial, delta_signal, inverse_monic_sweep_raw,
    CoefficientTrajectories, ModelOrders,
};
use crate::error::{Error, Result};
use crate::predictor::{predict, Dataset};

/// Frozen-filter state of the reweighting scheme.
#[derive(Debug, Clone)]
pub struct SkState {
    iteration: usize,
    frozen_b: DMatrix<f64>,
    inner: LmConfig,
    burn_in: usize,
}

impl SkState {
    /// State for the first iteration: the frozen filter is the identity,
    /// represented by all-zero input-side coefficients.
    pub fn initial(samples: usize, orders: ModelOrders, inner: LmConfig) -> Self {
        Self {
            iteration: 1,
            frozen_b: DMatrix::zeros(samples, orders.n_b() - 1),
            inner,
            burn_in: 0,
        }
    }

    /// Excludes this many rows at each end of the record from the residuals,
    /// for callers whose data carries window transients (the filtered warm
    /// start). Zero by default.
    pub fn with_burn_in(mut self, rows: usize) -> Self {
        self.burn_in = rows;
        self
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn frozen_b(&self) -> &DMatrix<f64> {
        &self.frozen_b
    }

    pub fn inner_config(&self) -> &LmConfig {
        &self.inner
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    /// Freezes the input-side trajectories of the current iterate for the
    /// next outer iteration.
    pub fn refreeze(&mut self, coeffs: &CoefficientTrajectories) {
        self.frozen_b.copy_from(coeffs.b());
        self.iteration += 1;
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SkConfig {
    pub outer_iters: usize,
    /// Outer loop stops once the surrogate cost changes by less than this
    /// relative amount between consecutive iterations.
    pub rel_tol: f64,
    /// Consecutive true-cost increases before flagging divergence.
    pub divergence_run: usize,
    pub inner: LmConfig,
}

impl Default for SkConfig {
    fn default() -> Self {
        Self {
            outer_iters: 30,
            rel_tol: 1e-6,
            divergence_run: 3,
            inner: LmConfig {
                param_tol: 1e-6,
                ..LmConfig::default()
            },
        }
    }
}

struct SkEvaluation {
    residuals: DVector<f64>,
    jacobian: Option<DMatrix<f64>>,
}

/// Shared evaluation path. The raw equation error B ũ − A y is built with the
/// same forward polynomials the rest of the crate uses; the frozen inverse
/// pass then filters the residual column and, when requested, every gradient
/// column in the same sweep.
fn sk_evaluate(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
    state: &SkState,
    with_jacobian: bool,
) -> Result<SkEvaluation> {
    if state.frozen_b.nrows() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "frozen filter has {} rows but the record has {} samples",
            state.frozen_b.nrows(),
            data.len()
        )));
    }
    let n = data.len();
    let n_a = orders.n_a();
    let n_b = orders.n_b();

    if !with_jacobian {
        let coeffs = evaluate_trajectories(map, &data.rho, orders)?;
        let raw = apply_b_polynomial(&data.u_meas, &coeffs, &data.ctx)?
            - apply_a_polynomial(&data.y, &coeffs, &data.ctx)?;
        let raw_mat = DMatrix::from_column_slice(n, 1, raw.as_slice());
        let mut filtered = inverse_monic_sweep_raw(&raw_mat, &state.frozen_b, &data.ctx)?;
        zero_burned_rows(&mut filtered, state.burn_in);
        return Ok(SkEvaluation {
            residuals: filtered.column(0).into_owned(),
            jacobian: None,
        });
    }

    let (coeffs, jacobians) =
        evaluate_trajectories_with_jacobians(map, &data.rho, orders)?;
    let raw = apply_b_polynomial(&data.u_meas, &coeffs, &data.ctx)?
        - apply_a_polynomial(&data.y, &coeffs, &data.ctx)?;

    let y_lags: Vec<DVector<f64>> = (0..n_a)
        .map(|i| delta_signal(&data.y, i, &data.ctx))
        .collect();
    let u_lags: Vec<DVector<f64>> = (1..n_b)
        .map(|i| delta_signal(&data.u_meas, i, &data.ctx))
        .collect();

    let n_params = map.param_count();
    // Column 0 carries the raw residuals; the rest carry d(raw)/dφ_j.
    let mut stacked = DMatrix::zeros(n, 1 + n_params);
    stacked.set_column(0, &raw);
    for k in 0..n {
        let g = &jacobians[k];
        for (i, lag) in y_lags.iter().enumerate() {
            let w = lag[k];
            if w == 0.0 {
                continue;
            }
            for j in 0..n_params {
                stacked[(k, 1 + j)] -= w * g[(i, j)];
            }
        }
        for (i, lag) in u_lags.iter().enumerate() {
            let w = lag[k];
            if w == 0.0 {
                continue;
            }
            let row = n_a + i;
            for j in 0..n_params {
                stacked[(k, 1 + j)] += w * g[(row, j)];
            }
        }
    }

    let mut filtered = inverse_monic_sweep_raw(&stacked, &state.frozen_b, &data.ctx)?;
    zero_burned_rows(&mut filtered, state.burn_in);
    Ok(SkEvaluation {
        residuals: filtered.column(0).into_owned(),
        jacobian: Some(filtered.columns(1, n_params).into_owned()),
    })
}

/// Drops the first and last `burn_in` rows from the least-squares problem by
/// zeroing them, residual and gradient columns alike.
fn zero_burned_rows(filtered: &mut DMatrix<f64>, burn_in: usize) {
    if burn_in == 0 {
        return;
    }
    let n = filtered.nrows();
    let burn = burn_in.min(n / 2);
    for k in (0..burn).chain(n - burn..n) {
        filtered.row_mut(k).fill(0.0);
    }
}

/// Surrogate cost, its parameter gradient and the filtered residuals at the
/// map's current parameters. Performs exactly one inverse-filter pass.
pub fn sk_cost_and_gradient(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
    state: &SkState,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let eval = sk_evaluate(map, data, orders, state, true)?;
    let jac = eval.jacobian.expect("jacobian requested");
    let cost = eval.residuals.norm_squared();
    let grad = 2.0 * jac.tr_mul(&eval.residuals);
    Ok((cost, grad, eval.residuals))
}

pub(crate) struct SkProblem<'a, C: CoefficientMap> {
    template: C,
    data: &'a Dataset,
    orders: ModelOrders,
    state: &'a SkState,
}

/// Frozen-filter surrogate as a least-squares problem, shared with the
/// equation-error warm start (which is the q = 1 case on filtered data).
pub(crate) fn sk_problem_at<'a, C: CoefficientMap>(
    template: C,
    data: &'a Dataset,
    orders: ModelOrders,
    state: &'a SkState,
) -> SkProblem<'a, C> {
    SkProblem {
        template,
        data,
        orders,
        state,
    }
}

impl<C: CoefficientMap> LeastSquaresProblem for SkProblem<'_, C> {
    fn param_count(&self) -> usize {
        self.template.param_count()
    }

    fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        let mut m = self.template.clone();
        m.set_params(params)?;
        Ok(sk_evaluate(&m, self.data, self.orders, self.state, false)?.residuals)
    }

    fn residuals_and_jacobian(
        &self,
        params: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut m = self.template.clone();
        m.set_params(params)?;
        let eval = sk_evaluate(&m, self.data, self.orders, self.state, true)?;
        Ok((eval.residuals, eval.jacobian.expect("jacobian requested")))
    }
}

/// Runs the outer reweighting loop. Each outer iteration minimizes the
/// frozen-filter surrogate with the damped Gauss-Newton engine, then
/// refreezes the filter at the new iterate.
pub fn sk_optimize<C: CoefficientMap>(
    map: &C,
    data: &Dataset,
    orders: ModelOrders,
    cfg: &SkConfig,
) -> Result<(C, OptimizerReport)> {
    let mut state = SkState::initial(data.len(), orders, cfg.inner.clone());
    let mut phi = map.params();
    let mut fitted = map.clone();
    let mut report = OptimizerReport::new(Termination::MaxIters, phi.clone());

    let initial_true_cost = match predict(map, data, orders) {
        Ok(p) => p.cost,
        Err(Error::SingularLeadingCoefficient { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let mut tracker = DivergenceTracker::new(initial_true_cost, cfg.divergence_run);

    for q in 1..=cfg.outer_iters {
        let problem = SkProblem {
            template: fitted.clone(),
            data,
            orders,
            state: &state,
        };
        let (new_phi, inner) = lm_minimize(&problem, phi.clone(), &cfg.inner)?;
        report.inner_rejections_total += inner.inner_rejections_total;
        if inner.termination == Termination::SingularFilter && inner.cost_history.is_empty() {
            // The frozen filter itself is unusable; keep the last iterate.
            report.termination = Termination::SingularFilter;
            break;
        }
        phi = new_phi;
        fitted.set_params(&phi)?;
        report.iterations = q;

        let sk_cost = inner
            .cost_history
            .last()
            .copied()
            .unwrap_or(f64::INFINITY);
        let true_cost = match predict(&fitted, data, orders) {
            Ok(p) => p.cost,
            Err(Error::SingularLeadingCoefficient { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        report.sk_cost_history.push(sk_cost);
        report.cost_history.push(true_cost);

        if tracker.observe(true_cost) {
            report.diverged = true;
            report.termination = Termination::Stalled;
            break;
        }

        if q >= 2 {
            let prev_sk = report.sk_cost_history[q - 2];
            if (sk_cost - prev_sk).abs() <= cfg.rel_tol * prev_sk.abs().max(1.0) {
                report.termination = Termination::Converged;
                break;
            }
        }
        if q == cfg.outer_iters {
            report.termination = Termination::MaxIters;
            break;
        }

        let coeffs = evaluate_trajectories(&fitted, &data.rho, orders)?;
        state.refreeze(&coeffs);
    }

    report.final_params = phi;
    Ok((fitted, report))
}

/// Flags a run of consecutive increases in the tracked cost. The scheme has
/// no descent guarantee, so this is the only brake on a diverging outer loop.
#[derive(Debug, Clone)]
pub struct DivergenceTracker {
    prev: f64,
    streak: usize,
    run: usize,
}

impl DivergenceTracker {
    pub fn new(initial: f64, run: usize) -> Self {
        Self {
            prev: initial,
            streak: 0,
            run,
        }
    }

    /// Records one cost sample; returns true once `run` consecutive strict
    /// increases have been seen.
    pub fn observe(&mut self, cost: f64) -> bool {
        if cost > self.prev {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.prev = cost;
        self.streak >= self.run
    }
}
