//! Damped Gauss-Newton iteration with multiplicative damping control.
//!
//! Each outer iteration linearizes the residuals once, then searches for an
//! acceptable step by solving (JᵀJ + λI) Δ = Jᵀε and testing φ − Δ. A step
//! that does not increase the cost is accepted and relaxes the damping by
//! 1/μ; a worse step is rejected, inflates the damping by μ and re-solves
//! with the same linearization.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector};

use super::{LmConfig, OptimizerReport, Termination};
use crate::coeffs::CoefficientMap;
use crate::error::{Error, Result};
use crate::predictor::{predict, predict_with_jacobian, Dataset};
use crate::delta::ModelOrders;

/// Residual provider for the damped Gauss-Newton engine. The Jacobian is
/// d(residual)/d(params) with the sign convention residual = measured − model.
pub trait LeastSquaresProblem {
    fn param_count(&self) -> usize;

    fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>>;

    fn residuals_and_jacobian(&self, params: &DVector<f64>)
        -> Result<(DVector<f64>, DMatrix<f64>)>;
}

enum Eval {
    Value(DVector<f64>),
    /// The inverse filter could not be evaluated at the candidate.
    Singular,
}

fn eval_residuals<P: LeastSquaresProblem>(problem: &P, params: &DVector<f64>) -> Result<Eval> {
    match problem.residuals(params) {
        Ok(r) => Ok(Eval::Value(r)),
        Err(Error::SingularLeadingCoefficient { .. }) => Ok(Eval::Singular),
        // Non-finite coefficient trajectories behave like a non-finite cost:
        // the step is rejectable rather than fatal.
        Err(Error::NonFinite(_)) => Ok(Eval::Value(DVector::from_element(1, f64::NAN))),
        Err(e) => Err(e),
    }
}

/// Minimizes Σ residual² from `initial`. Returns the best parameters found
/// together with the iteration report; hard errors (dimension mismatches)
/// propagate, numerical failures end up in the report's termination.
pub fn lm_minimize<P: LeastSquaresProblem>(
    problem: &P,
    initial: DVector<f64>,
    cfg: &LmConfig,
) -> Result<(DVector<f64>, OptimizerReport)> {
    let n_params = problem.param_count();
    if initial.len() != n_params {
        return Err(Error::DimensionMismatch(format!(
            "initial parameters have {} entries, problem has {}",
            initial.len(),
            n_params
        )));
    }

    let mut phi = initial;
    let mut report = OptimizerReport::new(Termination::MaxIters, phi.clone());

    let (mut eps, mut jac) = match problem.residuals_and_jacobian(&phi) {
        Ok(v) => v,
        Err(Error::SingularLeadingCoefficient { .. }) => {
            report.termination = Termination::SingularFilter;
            report.final_params = phi.clone();
            return Ok((phi, report));
        }
        Err(e) => return Err(e),
    };
    let mut cost = eps.norm_squared();
    if !cost.is_finite() {
        report.termination = Termination::Stalled;
        return Ok((phi, report));
    }
    report.cost_history.push(cost);

    if n_params == 0 {
        report.termination = Termination::ParamTol;
        report.final_params = phi.clone();
        return Ok((phi, report));
    }

    let mut lambda = cfg.lambda_init;
    'outer: for q in 1..=cfg.max_iters {
        let jtj = jac.tr_mul(&jac);
        let jte = jac.tr_mul(&eps);

        let mut consecutive_rejections = 0usize;
        let (candidate, cand_cost, used_lambda, step_norm) = loop {
            let mut damped = jtj.clone();
            for i in 0..n_params {
                damped[(i, i)] += lambda;
            }
            let solved = Cholesky::new(damped).map(|ch| ch.solve(&jte));
            let step = match solved {
                Some(s) => s,
                None => {
                    // Factorization failure counts as a rejected step.
                    lambda *= cfg.mu;
                    consecutive_rejections += 1;
                    report.inner_rejections_total += 1;
                    if consecutive_rejections >= cfg.max_inner_rejections {
                        report.termination = Termination::Stalled;
                        break 'outer;
                    }
                    continue;
                }
            };
            let candidate = &phi - &step;
            match eval_residuals(problem, &candidate)? {
                Eval::Singular => {
                    report.termination = Termination::SingularFilter;
                    break 'outer;
                }
                Eval::Value(ce) => {
                    let cc = ce.norm_squared();
                    if cc.is_finite() && cc <= cost {
                        break (candidate, cc, lambda, step.amax());
                    }
                    lambda *= cfg.mu;
                    consecutive_rejections += 1;
                    report.inner_rejections_total += 1;
                    if consecutive_rejections >= cfg.max_inner_rejections {
                        report.termination = Termination::Stalled;
                        break 'outer;
                    }
                }
            }
        };

        report.lambda_history.push(used_lambda);
        lambda = used_lambda / cfg.mu;
        report.iterations = q;
        report.cost_history.push(cand_cost);
        phi = candidate;
        cost = cand_cost;

        if step_norm < cfg.param_tol {
            report.termination = Termination::ParamTol;
            break;
        }
        if q == cfg.max_iters {
            report.termination = Termination::MaxIters;
            break;
        }

        match problem.residuals_and_jacobian(&phi) {
            Ok((e, j)) => {
                eps = e;
                jac = j;
            }
            Err(Error::SingularLeadingCoefficient { .. }) => {
                report.termination = Termination::SingularFilter;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    report.final_params = phi.clone();
    Ok((phi, report))
}

/// Output-error problem: residuals and Jacobian come straight from the
/// predictor with the parameters written into a working copy of the map.
pub struct OeProblem<'a, C: CoefficientMap> {
    pub template: C,
    pub data: &'a Dataset,
    pub orders: ModelOrders,
}

impl<'a, C: CoefficientMap> OeProblem<'a, C> {
    pub fn new(template: C, data: &'a Dataset, orders: ModelOrders) -> Self {
        Self {
            template,
            data,
            orders,
        }
    }

    fn with_params(&self, params: &DVector<f64>) -> Result<C> {
        let mut m = self.template.clone();
        m.set_params(params)?;
        Ok(m)
    }
}

impl<C: CoefficientMap> LeastSquaresProblem for OeProblem<'_, C> {
    fn param_count(&self) -> usize {
        self.template.param_count()
    }

    fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        let map = self.with_params(params)?;
        Ok(predict(&map, self.data, self.orders)?.residuals)
    }

    fn residuals_and_jacobian(
        &self,
        params: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let map = self.with_params(params)?;
        let (pred, jac) = predict_with_jacobian(&map, self.data, self.orders)?;
        Ok((pred.residuals, jac))
    }
}

/// Fits the coefficient map to the record by output-error minimization.
pub fn lm_optimize<C: CoefficientMap>(
    map: &C,
    data: &Dataset,
    orders: ModelOrders,
    cfg: &LmConfig,
) -> Result<(C, OptimizerReport)> {
    let problem = OeProblem::new(map.clone(), data, orders);
    let (phi, report) = lm_minimize(&problem, map.params(), cfg)?;
    let mut fitted = map.clone();
    fitted.set_params(&phi)?;
    Ok((fitted, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Linear residuals r = X θ − t with a constant Jacobian.
    struct LinearProblem {
        x: DMatrix<f64>,
        t: DVector<f64>,
    }

    impl LeastSquaresProblem for LinearProblem {
        fn param_count(&self) -> usize {
            self.x.ncols()
        }

        fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.x * params - &self.t)
        }

        fn residuals_and_jacobian(
            &self,
            params: &DVector<f64>,
        ) -> Result<(DVector<f64>, DMatrix<f64>)> {
            Ok((self.residuals(params)?, self.x.clone()))
        }
    }

    fn well_conditioned_problem() -> (LinearProblem, DVector<f64>) {
        let n = 40;
        let p = 4;
        let x = DMatrix::from_fn(n, p, |k, j| {
            ((k * (j + 1)) as f64 * 0.37).sin() + if k % (j + 2) == 0 { 0.5 } else { 0.0 }
        });
        let truth = DVector::from_vec(vec![1.5, -0.75, 0.25, 2.0]);
        let t = &x * &truth;
        // Normal-equation solution (the target has an exact preimage here).
        (LinearProblem { x, t }, truth)
    }

    #[test]
    fn linear_problem_reaches_normal_equation_solution() {
        // Three accepted damped steps suffice on an affine problem.
        let (problem, truth) = well_conditioned_problem();
        let cfg = LmConfig {
            max_iters: 3,
            ..LmConfig::default()
        };
        let (phi, report) =
            lm_minimize(&problem, DVector::zeros(problem.param_count()), &cfg).unwrap();
        assert!(report.iterations <= 3);
        let rel = (&phi - &truth).amax() / truth.amax();
        assert!(rel <= 1e-8, "relative error {rel}");
    }

    #[test]
    fn tiny_damping_reproduces_least_squares_in_one_step() {
        let (problem, truth) = well_conditioned_problem();
        let cfg = LmConfig {
            lambda_init: 1e-12,
            ..LmConfig::default()
        };
        let (phi, _) = lm_minimize(&problem, DVector::zeros(4), &cfg).unwrap();
        let rel = (&phi - &truth).amax() / truth.amax();
        assert!(rel <= 1e-8, "relative error {rel}");
    }

    #[test]
    fn zero_residuals_terminate_immediately() {
        let x = DMatrix::identity(3, 3);
        let t = DVector::zeros(3);
        let problem = LinearProblem { x, t };
        let (phi, report) =
            lm_minimize(&problem, DVector::zeros(3), &LmConfig::default()).unwrap();
        assert_eq!(phi, DVector::zeros(3));
        assert_eq!(report.iterations, 1);
        assert_eq!(report.termination, Termination::ParamTol);
    }

    /// Returns scripted residual norms in call order, with a unit Jacobian.
    struct ScriptedProblem {
        values: RefCell<Vec<f64>>,
    }

    impl ScriptedProblem {
        fn new(values: &[f64]) -> Self {
            let mut v = values.to_vec();
            v.reverse();
            Self {
                values: RefCell::new(v),
            }
        }

        fn next(&self) -> f64 {
            self.values.borrow_mut().pop().expect("script exhausted")
        }
    }

    impl LeastSquaresProblem for ScriptedProblem {
        fn param_count(&self) -> usize {
            1
        }

        fn residuals(&self, _params: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_element(1, self.next()))
        }

        fn residuals_and_jacobian(
            &self,
            params: &DVector<f64>,
        ) -> Result<(DVector<f64>, DMatrix<f64>)> {
            Ok((self.residuals(params)?, DMatrix::identity(1, 1)))
        }
    }

    #[test]
    fn damping_trace_follows_accept_reject_rules() {
        // Call order: initial eval 10, candidate 15 (reject), candidate 9
        // (accept), re-eval 9, candidate 5 (accept at max_iters).
        let problem = ScriptedProblem::new(&[10.0, 15.0, 9.0, 9.0, 5.0]);
        let cfg = LmConfig {
            lambda_init: 1e-2,
            mu: 10.0,
            param_tol: 1e-12,
            max_iters: 2,
            max_inner_rejections: 25,
        };
        let (_, report) = lm_minimize(&problem, DVector::zeros(1), &cfg).unwrap();

        let l0 = cfg.lambda_init;
        let after_reject = l0 * cfg.mu;
        let after_accept = after_reject / cfg.mu;
        assert_eq!(report.lambda_history, vec![after_reject, after_accept]);
        assert_eq!(
            report.cost_history,
            vec![100.0, 81.0, 25.0],
            "squared scripted norms, accepted entries only"
        );
        assert_eq!(report.inner_rejections_total, 1);
        assert_eq!(report.termination, Termination::MaxIters);
        assert_eq!(report.iterations, 2);
    }

    #[test]
    fn endless_rejections_stall() {
        // Initial 1, then every candidate is worse.
        let mut script = vec![1.0];
        script.extend(std::iter::repeat(2.0).take(30));
        let problem = ScriptedProblem::new(&script);
        let cfg = LmConfig {
            max_inner_rejections: 5,
            ..LmConfig::default()
        };
        let (phi, report) = lm_minimize(&problem, DVector::zeros(1), &cfg).unwrap();
        assert_eq!(report.termination, Termination::Stalled);
        assert_eq!(report.inner_rejections_total, 5);
        assert_eq!(phi, DVector::zeros(1), "keeps the last good parameters");
    }
}
