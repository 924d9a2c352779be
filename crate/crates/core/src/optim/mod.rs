//! Iterative parameter estimation on top of the predictor: a damped
//! Gauss-Newton solver, a plain gradient-descent baseline, the iterative
//! reweighting scheme with a frozen inverse filter, and its warm start.

mod gd;
mod lm;
mod sk;
mod train;
mod warm_start;

pub use gd::{gradient_descent_optimize, GdConfig};
pub use lm::{lm_minimize, lm_optimize, LeastSquaresProblem, OeProblem};
pub use sk::{sk_cost_and_gradient, sk_optimize, DivergenceTracker, SkConfig, SkState};
pub use train::{
    restarted_training, validated_training, RestartConfig, RestartOutcome, SegmentRecord,
    StartRecord, TrainingOutcome, TrainingStop, ValidationConfig,
};
pub use warm_start::{arx_warm_start, zero_phase_lowpass, WarmStartConfig};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Damping and termination settings for the damped Gauss-Newton loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub lambda_init: f64,
    /// Damping growth/shrink factor on rejection/acceptance.
    pub mu: f64,
    /// Terminate once the accepted step's infinity norm drops below this.
    pub param_tol: f64,
    pub max_iters: usize,
    /// Consecutive rejected steps tolerated before declaring a stall.
    pub max_inner_rejections: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda_init: 1e-2,
            mu: 10.0,
            param_tol: 1e-8,
            max_iters: 500,
            max_inner_rejections: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Accepted step shrank below the parameter tolerance.
    ParamTol,
    MaxIters,
    /// The inverse filter hit a singular leading coefficient; the report
    /// carries the last parameters that evaluated cleanly.
    SingularFilter,
    /// No acceptable step could be found (or the iteration blew up).
    Stalled,
    /// Outer-loop cost stabilized (reweighting scheme only).
    Converged,
}

/// What an optimizer did: accepted-cost trace, damping trace, and where it
/// stopped. `cost_history` starts with the initial cost; for the reweighting
/// scheme it holds the true output-error cost per outer iteration and
/// `sk_cost_history` holds the surrogate cost alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub cost_history: Vec<f64>,
    pub lambda_history: Vec<f64>,
    pub termination: Termination,
    #[serde(skip)]
    pub final_params: DVector<f64>,
    pub iterations: usize,
    pub inner_rejections_total: usize,
    pub sk_cost_history: Vec<f64>,
    /// Set when the outer-loop cost rose three times in a row.
    pub diverged: bool,
}

impl OptimizerReport {
    pub fn final_cost(&self) -> Option<f64> {
        self.cost_history.last().copied()
    }

    pub(crate) fn new(termination: Termination, final_params: DVector<f64>) -> Self {
        Self {
            cost_history: Vec::new(),
            lambda_history: Vec::new(),
            termination,
            final_params,
            iterations: 0,
            inner_rejections_total: 0,
            sk_cost_history: Vec::new(),
            diverged: false,
        }
    }
}
