//! Equation-error warm start. Output-error cost surfaces are riddled with
//! poor local minima when the coefficient maps start from random weights, so
//! the usual first move is an equation-error fit on low-pass filtered data:
//! the residuals stay affine in the coefficient values, the optimization is
//! cheap, and the filter keeps the δ^i terms from amplifying measurement
//! noise at high frequencies.

use nalgebra::{DMatrix, DVector};

use super::sk::{sk_problem_at, SkState};
use super::{lm_minimize, LeastSquaresProblem, LmConfig, OptimizerReport};
use crate::coeffs::CoefficientMap;
use crate::delta::ModelOrders;
use crate::error::{Error, Result};
use crate::predictor::Dataset;

/// Smoothing gain of the first-order pass, or None when the cutoff is at or
/// above Nyquist and filtering degenerates to the identity.
fn smoothing_gain(cutoff_hz: f64, ctx: &crate::delta::DeltaContext) -> Result<Option<f64>> {
    if !(cutoff_hz > 0.0) || !cutoff_hz.is_finite() {
        return Err(Error::InvalidInput(format!(
            "cutoff must be a positive frequency, got {cutoff_hz}"
        )));
    }
    if cutoff_hz >= ctx.nyquist_hz() {
        return Ok(None);
    }
    Ok(Some(
        1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz * ctx.sample_time()).exp(),
    ))
}

/// Zero-phase first-order low pass: one forward exponential-smoothing pass
/// followed by the same pass backward in time, which squares the magnitude
/// response and cancels the phase. Each pass starts from the boundary sample
/// rather than from zero, so a signal at rest outside the window produces no
/// edge transient. `cutoff_hz` at or above Nyquist returns the signal
/// unchanged.
pub fn zero_phase_lowpass(
    x: &DVector<f64>,
    cutoff_hz: f64,
    ctx: &crate::delta::DeltaContext,
) -> Result<DVector<f64>> {
    let alpha = match smoothing_gain(cutoff_hz, ctx)? {
        Some(a) => a,
        None => return Ok(x.clone()),
    };
    let n = x.len();
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    let mut s = out[0];
    for k in 0..n {
        s += alpha * (out[k] - s);
        out[k] = s;
    }
    let mut s = out[n - 1];
    for k in (0..n).rev() {
        s += alpha * (out[k] - s);
        out[k] = s;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WarmStartConfig {
    /// Low-pass cutoff applied to both measured signals. The scheduling
    /// signal is left untouched.
    pub cutoff_hz: f64,
    pub inner: LmConfig,
    /// Tikhonov weight pulling the parameters toward zero. A single smooth
    /// record leaves the equation-error problem nearly rank deficient, and
    /// the unpinned directions otherwise drift to coefficient values whose
    /// inverse filter is useless as a starting point. Zero disables it.
    pub ridge: f64,
}

impl WarmStartConfig {
    /// Default cutoff at a tenth of Nyquist.
    pub fn for_context(ctx: &crate::delta::DeltaContext) -> Self {
        Self {
            cutoff_hz: 0.1 * ctx.nyquist_hz(),
            inner: LmConfig {
                max_iters: 150,
                param_tol: 1e-9,
                ..LmConfig::default()
            },
            ridge: 1e-4,
        }
    }
}

/// Least-squares problem with `sqrt_ridge · φ` appended to the residuals,
/// which adds `ridge · ‖φ‖²` to the cost.
struct RidgedProblem<P> {
    inner: P,
    sqrt_ridge: f64,
}

impl<P: LeastSquaresProblem> LeastSquaresProblem for RidgedProblem<P> {
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.inner.residuals(params)?;
        Ok(self.augment(r, params))
    }

    fn residuals_and_jacobian(
        &self,
        params: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, jac) = self.inner.residuals_and_jacobian(params)?;
        let n = r.len();
        let p = self.param_count();
        let mut full = DMatrix::zeros(n + p, p);
        full.rows_mut(0, n).copy_from(&jac);
        for j in 0..p {
            full[(n + j, j)] = self.sqrt_ridge;
        }
        Ok((self.augment(r, params), full))
    }
}

impl<P: LeastSquaresProblem> RidgedProblem<P> {
    fn augment(&self, r: DVector<f64>, params: &DVector<f64>) -> DVector<f64> {
        let n = r.len();
        let p = self.param_count();
        let mut full = DVector::zeros(n + p);
        full.rows_mut(0, n).copy_from(&r);
        for j in 0..p {
            full[n + j] = self.sqrt_ridge * params[j];
        }
        full
    }
}

/// Equation-error fit on filtered data. Returns the fitted map and the inner
/// optimizer report; the caller hands the parameters on to the output-error
/// stage.
///
/// Rows within the smoother's settling distance of either window edge are
/// excluded from the fit: the zero-phase pass does not commute with the
/// difference polynomials there, and the leftover transient is equation
/// error no parameter value can explain.
pub fn arx_warm_start<C: CoefficientMap>(
    map: &C,
    data: &Dataset,
    orders: ModelOrders,
    cfg: &WarmStartConfig,
) -> Result<(C, OptimizerReport)> {
    let u_f = zero_phase_lowpass(&data.u_meas, cfg.cutoff_hz, &data.ctx)?;
    let y_f = zero_phase_lowpass(&data.y, cfg.cutoff_hz, &data.ctx)?;
    let filtered = Dataset::new(u_f, y_f, data.rho.clone(), data.ctx)?;

    let burn_in = match smoothing_gain(cfg.cutoff_hz, &data.ctx)? {
        // Distance at which the pass's impulse response has decayed to 1e-10,
        // plus the polynomial lag depth.
        Some(alpha) => {
            let settle = (1e-10f64.ln() / (1.0 - alpha).ln()).ceil() as usize;
            settle + orders.n_a().max(orders.n_b())
        }
        None => 0,
    };
    if 2 * burn_in >= filtered.len() {
        return Err(Error::InvalidInput(format!(
            "record of {} samples is shorter than twice the {burn_in}-sample filter settling margin",
            filtered.len()
        )));
    }

    if !(cfg.ridge >= 0.0) || !cfg.ridge.is_finite() {
        return Err(Error::InvalidInput(format!(
            "ridge weight must be finite and nonnegative, got {}",
            cfg.ridge
        )));
    }

    let state =
        SkState::initial(filtered.len(), orders, cfg.inner.clone()).with_burn_in(burn_in);
    let problem = sk_problem_at(map.clone(), &filtered, orders, &state);
    let (phi, report) = if cfg.ridge > 0.0 {
        let ridged = RidgedProblem {
            inner: problem,
            sqrt_ridge: cfg.ridge.sqrt(),
        };
        lm_minimize(&ridged, map.params(), &cfg.inner)?
    } else {
        lm_minimize(&problem, map.params(), &cfg.inner)?
    };
    let mut fitted = map.clone();
    fitted.set_params(&phi)?;
    Ok((fitted, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::CoefficientBasisMap;
    use crate::delta::{apply_a_polynomial, DeltaContext};
    use crate::coeffs::evaluate_trajectories;
    use nalgebra::DMatrix;

    #[test]
    fn cutoff_at_or_above_nyquist_is_the_identity() {
        let ctx = DeltaContext::new(0.01).unwrap();
        let x = DVector::from_fn(64, |k, _| (1.3 * k as f64).sin());
        let y = zero_phase_lowpass(&x, ctx.nyquist_hz(), &ctx).unwrap();
        assert_eq!(x, y);
        let y = zero_phase_lowpass(&x, 10.0 * ctx.nyquist_hz(), &ctx).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn lowpass_preserves_a_constant_and_attenuates_a_high_tone() {
        let ctx = DeltaContext::new(0.01).unwrap();
        let n = 400;
        let dc = DVector::from_element(n, 1.0);
        let filtered = zero_phase_lowpass(&dc, 5.0, &ctx).unwrap();
        // Boundary-sample initialization makes a constant a true fixed point
        // of both passes, every sample included.
        for k in 0..n {
            assert_eq!(filtered[k], 1.0, "sample {k}");
        }

        let tone_hz = 45.0;
        let tone = DVector::from_fn(n, |k, _| {
            (2.0 * std::f64::consts::PI * tone_hz * k as f64 * ctx.sample_time()).sin()
        });
        let filtered = zero_phase_lowpass(&tone, 5.0, &ctx).unwrap();
        let in_rms = (tone.norm_squared() / n as f64).sqrt();
        let out_rms = (filtered.norm_squared() / n as f64).sqrt();
        assert!(
            out_rms < 0.1 * in_rms,
            "tone rms only dropped from {in_rms} to {out_rms}"
        );
    }

    #[test]
    fn rejects_a_nonpositive_cutoff() {
        let ctx = DeltaContext::new(0.01).unwrap();
        let x = DVector::zeros(8);
        assert!(zero_phase_lowpass(&x, 0.0, &ctx).is_err());
        assert!(zero_phase_lowpass(&x, -3.0, &ctx).is_err());
        assert!(zero_phase_lowpass(&x, f64::NAN, &ctx).is_err());
    }

    #[test]
    fn noise_free_record_with_unit_input_polynomial_is_recovered() {
        // With B ≡ 1 the record u = A y is linear in the coefficients. The
        // smoother is bypassed here (cutoff at Nyquist) so the record still
        // satisfies the relation exactly when the fit sees it.
        let ctx = DeltaContext::new(0.02).unwrap();
        let n = 300;
        let orders = ModelOrders::new(2, 1).unwrap();
        let y = DVector::from_fn(n, |k, _| {
            (0.013 * k as f64).sin() + 0.4 * (0.051 * k as f64).cos()
        });
        let rho = DMatrix::from_fn(n, 1, |k, _| k as f64 / n as f64);

        let mut truth = CoefficientBasisMap::uniform(orders.coefficient_width(), 1, 1).unwrap();
        truth
            .set_params(&DVector::from_vec(vec![0.8, 0.3, -0.5, 0.2]))
            .unwrap();
        let coeffs = evaluate_trajectories(&truth, &rho, orders).unwrap();
        let u = apply_a_polynomial(&y, &coeffs, &ctx).unwrap();
        let data = Dataset::new(u, y, rho, ctx).unwrap();

        let start = CoefficientBasisMap::uniform(orders.coefficient_width(), 1, 1).unwrap();
        // Ridge off: this checks the exact equation-error recovery.
        let cfg = WarmStartConfig {
            cutoff_hz: ctx.nyquist_hz(),
            inner: LmConfig {
                max_iters: 300,
                param_tol: 1e-14,
                ..LmConfig::default()
            },
            ridge: 0.0,
        };
        let (fitted, report) = arx_warm_start(&start, &data, orders, &cfg).unwrap();

        assert!(report.final_cost().unwrap() <= 1e-10);
        let got = fitted.params();
        let want = truth.params();
        for j in 0..want.len() {
            assert!(
                (got[j] - want[j]).abs() <= 1e-7 * want[j].abs().max(1.0),
                "param {j}: {} vs {}",
                got[j],
                want[j]
            );
        }
    }

    #[test]
    fn lowpass_commutes_with_constant_coefficient_polynomials_in_the_interior() {
        // The smoother and a constant-coefficient delta polynomial are both
        // linear and time invariant, so they commute away from the window
        // edges. Near either edge the boundary-sample initialization and the
        // zero pre-window disagree between the two orderings, with the
        // mismatch decaying like (1−α)^distance, dead after ~60 samples at
        // this cutoff.
        let ctx = DeltaContext::new(0.02).unwrap();
        let n = 300;
        let cutoff = 0.25 * ctx.nyquist_hz();
        let y = DVector::from_fn(n, |k, _| {
            (0.09 * k as f64).sin() + 0.5 * (0.023 * k as f64).cos()
        });

        let orders = ModelOrders::new(3, 1).unwrap();
        let mut map = CoefficientBasisMap::uniform(orders.coefficient_width(), 0, 1).unwrap();
        map.set_params(&DVector::from_vec(vec![1.3, -0.4, 0.02]))
            .unwrap();
        let rho = DMatrix::zeros(n, 1);
        let coeffs = evaluate_trajectories(&map, &rho, orders).unwrap();

        let filter_then_apply = apply_a_polynomial(
            &zero_phase_lowpass(&y, cutoff, &ctx).unwrap(),
            &coeffs,
            &ctx,
        )
        .unwrap();
        let apply_then_filter = zero_phase_lowpass(
            &apply_a_polynomial(&y, &coeffs, &ctx).unwrap(),
            cutoff,
            &ctx,
        )
        .unwrap();

        let scale = apply_then_filter.amax().max(1.0);
        for k in 60..n - 60 {
            let diff = (filter_then_apply[k] - apply_then_filter[k]).abs();
            assert!(
                diff <= 1e-10 * scale,
                "sample {k}: difference {diff} against scale {scale}"
            );
        }
    }
}
