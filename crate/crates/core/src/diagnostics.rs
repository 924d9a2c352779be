//! Finite-difference oracles for every analytic derivative path, plus the
//! self-check harness behind the gradcheck command. The harness builds a
//! small deterministic instance, compares each analytic Jacobian against
//! central differences, and reports the worst relative error per path.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::{Activation, CoefficientMap, SchedulingNet};
use crate::delta::{DeltaContext, ModelOrders};
use crate::error::Result;
use crate::predictor::{predict, residual_jacobian, Dataset};

/// Largest entry difference scaled by the larger of one and the reference's
/// largest entry, so tiny references do not inflate the error.
pub fn max_relative_error(got: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax().max(1.0);
    (got - reference).amax() / scale
}

/// Central-difference Jacobian of the prediction residuals with respect to
/// the map parameters.
pub fn fd_residual_jacobian(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
    step: f64,
) -> Result<DMatrix<f64>> {
    let phi = map.params();
    let mut jac = DMatrix::zeros(data.len(), map.param_count());
    let mut probe = map.clone();
    for j in 0..map.param_count() {
        let mut p = phi.clone();
        p[j] += step;
        probe.set_params(&p)?;
        let plus = predict(&probe, data, orders)?.residuals;
        p[j] -= 2.0 * step;
        probe.set_params(&p)?;
        let minus = predict(&probe, data, orders)?.residuals;
        jac.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}

/// Central-difference Jacobian of the map output with respect to its
/// parameters at a single scheduling point.
pub fn fd_param_jacobian(
    map: &impl CoefficientMap,
    rho: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    let phi = map.params();
    let mut jac = DMatrix::zeros(map.output_width(), map.param_count());
    let mut probe = map.clone();
    for j in 0..map.param_count() {
        let mut p = phi.clone();
        p[j] += step;
        probe.set_params(&p)?;
        let plus = probe.eval(rho)?;
        p[j] -= 2.0 * step;
        probe.set_params(&p)?;
        let minus = probe.eval(rho)?;
        jac.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}

/// Central-difference sensitivity of the network output with respect to one
/// hidden layer's pre-activation.
pub fn fd_layer_sensitivity(
    net: &SchedulingNet,
    x: &[f64],
    hidden_layer: usize,
    step: f64,
) -> Result<DMatrix<f64>> {
    let (out, cache) = net.forward(x)?;
    let z = cache.pre_activation(hidden_layer).clone();
    let mut jac = DMatrix::zeros(out.len(), z.len());
    for j in 0..z.len() {
        let mut zp = z.clone();
        zp[j] += step;
        let plus = net.forward_from_pre_activation(hidden_layer, &zp);
        zp[j] -= 2.0 * step;
        let minus = net.forward_from_pre_activation(hidden_layer, &zp);
        jac.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub fd_step: f64,
    /// Test hook: negates the analytic residual Jacobian so the check must
    /// fail. Proves the harness can catch a sign bug.
    pub flip_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            n_a: 3,
            n_b: 2,
            hidden: vec![3, 3],
            activation: Activation::Tanh,
            seeds: vec![0, 1, 2, 3, 4],
            tolerance: 1e-6,
            fd_step: 1e-6,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// Worst relative error of the residual Jacobian against differences.
    pub residual_jacobian_error: f64,
    /// Worst relative error of the coefficient-map parameter Jacobian.
    pub coefficient_jacobian_error: f64,
    /// Worst relative error of the layer sensitivities.
    pub sensitivity_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.residual_jacobian_error <= self.tolerance
            && self.coefficient_jacobian_error <= self.tolerance
            && self.sensitivity_error <= self.tolerance
    }
}

/// Runs every derivative check on a deterministic small instance, one fresh
/// random network per seed.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let ctx = DeltaContext::new(1.0)?;
    let orders = ModelOrders::new(cfg.n_a, cfg.n_b)?;
    let n = cfg.samples;
    let y = DVector::from_fn(n, |k, _| {
        (0.31 * k as f64).sin() + 0.4 * (0.07 * k as f64).cos()
    });
    let u = DVector::from_fn(n, |k, _| {
        (0.23 * k as f64).cos() - 0.1 * (0.011 * k as f64).sin()
    });
    let rho = DMatrix::from_fn(n, 1, |k, _| 2.0 * k as f64 / (n as f64 - 1.0) - 1.0);
    let data = Dataset::new(u, y, rho, ctx)?;

    let mut sizes = vec![1];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(orders.coefficient_width());

    let mut report = GradcheckReport {
        residual_jacobian_error: 0.0,
        coefficient_jacobian_error: 0.0,
        sensitivity_error: 0.0,
        tolerance: cfg.tolerance,
    };

    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SchedulingNet::random(&sizes, cfg.activation, &mut rng)?;

        let mut analytic = residual_jacobian(&net, &data, orders)?;
        if cfg.flip_sign {
            analytic = -analytic;
        }
        let fd = fd_residual_jacobian(&net, &data, orders, cfg.fd_step)?;
        report.residual_jacobian_error = report
            .residual_jacobian_error
            .max(max_relative_error(&analytic, &fd));

        for rho_point in [-0.8, -0.2, 0.5] {
            let (_, jac) = net.eval_with_param_jacobian(&[rho_point])?;
            let fd = fd_param_jacobian(&net, &[rho_point], cfg.fd_step)?;
            report.coefficient_jacobian_error = report
                .coefficient_jacobian_error
                .max(max_relative_error(&jac, &fd));

            let (_, cache) = net.forward(&[rho_point])?;
            let sens = net.layer_sensitivities(cache);
            for l in 0..net.hidden_layers() {
                let fd = fd_layer_sensitivity(&net, &[rho_point], l, cfg.fd_step)?;
                report.sensitivity_error = report
                    .sensitivity_error
                    .max(max_relative_error(sens.delta(l), &fd));
            }
        }
    }
    Ok(report)
}
