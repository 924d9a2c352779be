//! Plain gradient descent on the output-error cost, as an iteration-count
//! baseline for the damped Gauss-Newton solver. Uses the same analytic
//! Jacobian machinery, so the comparison isolates the update rule.

use nalgebra::DVector;

use super::{OptimizerReport, Termination};
use crate::coeffs::CoefficientMap;
use crate::delta::ModelOrders;
use crate::error::{Error, Result};
use crate::predictor::{cost_gradient, predict, predict_with_jacobian, Dataset};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GdConfig {
    /// Base step length. With backtracking this is the length tried first
    /// each iteration (grown fourfold from the last accepted length, capped
    /// at the base).
    pub step: f64,
    pub backtracking: bool,
    pub max_iters: usize,
    pub param_tol: f64,
    /// Fixed-step runs abort once the cost exceeds this multiple of the
    /// initial cost.
    pub divergence_factor: f64,
    pub max_backtracks: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            backtracking: true,
            max_iters: 2000,
            param_tol: 1e-10,
            divergence_factor: 1e12,
            max_backtracks: 60,
        }
    }
}

pub fn gradient_descent_optimize<C: CoefficientMap>(
    map: &C,
    data: &Dataset,
    orders: ModelOrders,
    cfg: &GdConfig,
) -> Result<(C, OptimizerReport)> {
    let mut work = map.clone();
    let mut phi = map.params();
    let mut report = OptimizerReport::new(Termination::MaxIters, phi.clone());

    let eval_cost = |work: &mut C, p: &DVector<f64>| -> Result<Option<f64>> {
        work.set_params(p)?;
        match predict(work, data, orders) {
            Ok(pred) => Ok(Some(pred.cost)),
            Err(Error::SingularLeadingCoefficient { .. }) => Ok(None),
            Err(Error::NonFinite(_)) => Ok(Some(f64::NAN)),
            Err(e) => Err(e),
        }
    };

    let (pred, mut jac) = match predict_with_jacobian(&{
        work.set_params(&phi)?;
        work.clone()
    }, data, orders)
    {
        Ok(v) => v,
        Err(Error::SingularLeadingCoefficient { .. }) => {
            report.termination = Termination::SingularFilter;
            return Ok((work, report));
        }
        Err(e) => return Err(e),
    };
    let mut residuals = pred.residuals;
    let mut cost = pred.cost;
    let initial_cost = cost;
    report.cost_history.push(cost);

    let mut alpha = cfg.step;
    for q in 1..=cfg.max_iters {
        let grad = cost_gradient(&jac, &residuals);
        if grad.amax() == 0.0 {
            report.termination = Termination::ParamTol;
            break;
        }

        let (next_phi, next_cost) = if cfg.backtracking {
            // Try the last scale grown fourfold, then halve until the cost
            // stops increasing.
            alpha = (alpha * 4.0).min(cfg.step);
            let mut tries = 0usize;
            loop {
                let cand = &phi - alpha * &grad;
                match eval_cost(&mut work, &cand)? {
                    Some(c) if c.is_finite() && c <= cost => break (cand, c),
                    _ => {
                        alpha *= 0.5;
                        tries += 1;
                        report.inner_rejections_total += 1;
                        if tries > cfg.max_backtracks {
                            report.termination = Termination::Stalled;
                            report.final_params = phi.clone();
                            return Ok((restore(work, &phi)?, report));
                        }
                    }
                }
            }
        } else {
            let cand = &phi - alpha * &grad;
            match eval_cost(&mut work, &cand)? {
                Some(c) => (cand, c),
                None => {
                    report.termination = Termination::SingularFilter;
                    report.final_params = phi.clone();
                    return Ok((restore(work, &phi)?, report));
                }
            }
        };

        let moved = (&next_phi - &phi).amax();
        phi = next_phi;
        cost = next_cost;
        report.cost_history.push(cost);
        report.iterations = q;

        if !cost.is_finite() || cost >= cfg.divergence_factor * initial_cost.max(f64::MIN_POSITIVE)
        {
            report.termination = Termination::Stalled;
            break;
        }
        if moved < cfg.param_tol {
            report.termination = Termination::ParamTol;
            break;
        }
        if q == cfg.max_iters {
            report.termination = Termination::MaxIters;
            break;
        }

        work.set_params(&phi)?;
        match predict_with_jacobian(&work, data, orders) {
            Ok((p, j)) => {
                residuals = p.residuals;
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
    Ok((restore(work, &phi)?, report))
}

fn restore<C: CoefficientMap>(mut work: C, phi: &DVector<f64>) -> Result<C> {
    work.set_params(phi)?;
    Ok(work)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{evaluate_trajectories, CoefficientBasisMap};
    use crate::delta::{apply_a_polynomial, inverse_monic_filter, DeltaContext};
    use crate::optim::{lm_optimize, LmConfig};
    use nalgebra::DMatrix;

    // Noise-free record from a degree-one basis truth with a mildly varying
    // input polynomial, plus a perturbed copy of the truth to start from.
    fn fixture() -> (Dataset, ModelOrders, CoefficientBasisMap, CoefficientBasisMap) {
        let orders = ModelOrders::new(2, 2).unwrap();
        let ctx = DeltaContext::new(1.0).unwrap();
        let n = 80;
        let y = DVector::from_fn(n, |k, _| {
            (0.09 * k as f64).sin() + 0.4 * (0.031 * k as f64).cos()
        });
        let rho = DMatrix::from_fn(n, 1, |k, _| 2.0 * k as f64 / (n as f64 - 1.0) - 1.0);

        let mut truth = CoefficientBasisMap::uniform(orders.coefficient_width(), 1, 1).unwrap();
        truth
            .set_params(&DVector::from_vec(vec![0.8, 0.3, -0.5, 0.2, 0.1, 0.05]))
            .unwrap();
        let coeffs = evaluate_trajectories(&truth, &rho, orders).unwrap();
        let w = apply_a_polynomial(&y, &coeffs, &ctx).unwrap();
        let u = inverse_monic_filter(&w, &coeffs, &ctx).unwrap();
        let data = Dataset::new(u, y, rho, ctx).unwrap();

        let mut start = truth.clone();
        start
            .set_params(&DVector::from_vec(vec![0.6, 0.45, -0.3, 0.05, 0.2, -0.05]))
            .unwrap();
        (data, orders, truth, start)
    }

    #[test]
    fn backtracking_keeps_the_accepted_costs_monotone() {
        let (data, orders, _, start) = fixture();
        let cfg = GdConfig {
            max_iters: 300,
            ..GdConfig::default()
        };
        let (_, report) = gradient_descent_optimize(&start, &data, orders, &cfg).unwrap();

        let h = &report.cost_history;
        assert!(h.len() >= 2);
        for w in h.windows(2) {
            assert!(w[1] <= w[0], "cost rose from {} to {}", w[0], w[1]);
        }
        assert!(h.last().unwrap() < &(0.5 * h[0]), "barely moved: {h:?}");
    }

    #[test]
    fn oversized_fixed_step_is_flagged_as_stalled() {
        let (data, orders, _, start) = fixture();
        let cfg = GdConfig {
            step: 1e8,
            backtracking: false,
            divergence_factor: 1e6,
            max_iters: 50,
            ..GdConfig::default()
        };
        let (_, report) = gradient_descent_optimize(&start, &data, orders, &cfg).unwrap();
        assert_eq!(report.termination, Termination::Stalled);
    }

    #[test]
    fn needs_far_more_iterations_than_the_damped_solver() {
        let (data, orders, _, start) = fixture();

        let lm_cfg = LmConfig {
            max_iters: 15,
            param_tol: 0.0,
            ..LmConfig::default()
        };
        let (_, lm_report) = lm_optimize(&start, &data, orders, &lm_cfg).unwrap();

        let gd_cfg = GdConfig {
            max_iters: 15,
            param_tol: 0.0,
            ..GdConfig::default()
        };
        let (_, gd_report) = gradient_descent_optimize(&start, &data, orders, &gd_cfg).unwrap();

        let lm_final = lm_report.final_cost().unwrap();
        let gd_final = gd_report.final_cost().unwrap();
        assert!(
            lm_final < 1e-2 * gd_final,
            "after equal iteration budgets: damped {lm_final} vs descent {gd_final}"
        );
    }
}
