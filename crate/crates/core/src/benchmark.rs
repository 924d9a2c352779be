//! Two-mass test rig used throughout the examples and the acceptance suite:
//! a position-controlled mass coupled through a spring-damper to a load mass,
//! where the coupling damping varies with a measured operating condition.
//! The rig supplies ground-truth coefficient functions, reference and data
//! generation, and the evaluation metrics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::coeffs::CoefficientMap;
use crate::delta::{
    apply_delta_polynomial, generalized_inverse_filter, CoefficientTrajectories, DeltaContext,
    ModelOrders,
};
use crate::error::{Error, Result};
use crate::predictor::{predict, Dataset};

/// Plant constants. Masses in kg, damping in N·s/m, stiffness in N/m.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSystem {
    pub m1: f64,
    pub m2: f64,
    pub d1: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for BenchmarkSystem {
    fn default() -> Self {
        Self {
            m1: 10.0,
            m2: 11.0,
            d1: 5.0,
            k1: 0.3,
            k2: 5e4,
        }
    }
}

impl BenchmarkSystem {
    /// Operating-condition dependent coupling damping. Positive for every
    /// real argument: the exponential bump and the quadratic growth never
    /// both vanish.
    pub fn damping(&self, rho: f64) -> f64 {
        1e3 * (-1e2 * rho * rho).exp() + 1e2 * rho * rho + 1e-4
    }

    pub fn orders(&self) -> ModelOrders {
        ModelOrders::new(5, 3).expect("static orders")
    }

    /// Output-side coefficients of δ^0..δ^4 y in physical units.
    fn raw_a_row(&self, d2: f64) -> [f64; 5] {
        [
            self.k1 * self.k2,
            self.d1 * self.k2 + self.k1 * d2,
            self.k1 * self.m2 + self.k2 * (self.m1 + self.m2) + self.d1 * d2,
            self.d1 * self.m2 + (self.m1 + self.m2) * d2,
            self.m1 * self.m2,
        ]
    }

    /// Input-side coefficients of δ^0..δ^2 u in physical units.
    fn raw_b_row(&self, d2: f64) -> [f64; 3] {
        [self.k2, d2, self.m2]
    }

    /// Stacked normalized coefficients [a_0..a_4, b_1, b_2] at one operating
    /// point. Dividing through by k2 makes the input side monic.
    pub fn coefficient_row(&self, rho: f64) -> [f64; 7] {
        let d2 = self.damping(rho);
        let a = self.raw_a_row(d2);
        let b = self.raw_b_row(d2);
        [
            a[0] / self.k2,
            a[1] / self.k2,
            a[2] / self.k2,
            a[3] / self.k2,
            a[4] / self.k2,
            b[1] / self.k2,
            b[2] / self.k2,
        ]
    }

    /// Ground-truth coefficient trajectories along a scalar scheduling
    /// trajectory, in the normalized monic form the estimator works with.
    pub fn true_coefficients(&self, rho: &DMatrix<f64>) -> Result<CoefficientTrajectories> {
        if rho.ncols() != 1 {
            return Err(Error::InvalidInput(format!(
                "the rig has a scalar operating condition, got {} columns",
                rho.ncols()
            )));
        }
        let n = rho.nrows();
        let orders = self.orders();
        let mut a = DMatrix::zeros(n, 5);
        let mut b = DMatrix::zeros(n, 2);
        for k in 0..n {
            let row = self.coefficient_row(rho[(k, 0)]);
            for i in 0..5 {
                a[(k, i)] = row[i];
            }
            b[(k, 0)] = row[5];
            b[(k, 1)] = row[6];
        }
        CoefficientTrajectories::new(a, b, orders)
    }
}

/// Ground truth packaged as a parameterless coefficient map, so the plant
/// itself can be pushed through the predictor and the metrics.
#[derive(Debug, Clone)]
pub struct TrueCoefficientMap {
    sys: BenchmarkSystem,
}

impl TrueCoefficientMap {
    pub fn new(sys: BenchmarkSystem) -> Self {
        Self { sys }
    }
}

impl CoefficientMap for TrueCoefficientMap {
    fn scheduling_dim(&self) -> usize {
        1
    }

    fn output_width(&self) -> usize {
        7
    }

    fn param_count(&self) -> usize {
        0
    }

    fn params(&self) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn set_params(&mut self, values: &DVector<f64>) -> Result<()> {
        if values.len() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "ground-truth map has no parameters, got {}",
                values.len()
            )));
        }
        Ok(())
    }

    fn eval(&self, rho: &[f64]) -> Result<DVector<f64>> {
        if rho.len() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected a scalar operating condition, got {} values",
                rho.len()
            )));
        }
        Ok(DVector::from_column_slice(&self.sys.coefficient_row(rho[0])))
    }

    fn eval_with_param_jacobian(&self, rho: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.eval(rho)?, DMatrix::zeros(7, 0)))
    }
}

/// Rest-to-rest motion profile request. The record is cut into `moves`
/// equal blocks; each block performs one snap-limited point-to-point move
/// and then dwells at the new setpoint, alternating between zero and
/// `amplitude` so the load sweeps back and forth across the record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceSpec {
    pub samples: usize,
    pub amplitude: f64,
    pub moves: usize,
}

/// Snap-limited point-to-point profile: within each move the fourth
/// derivative is piecewise constant over eight equal segments with sign
/// pattern + − − + − + + −, which lands at rest with zero velocity,
/// acceleration and jerk at both ends. Unit snap covers 8·Δ⁴ of travel over
/// segment length Δ, so each move is scaled to the requested travel. Moves
/// are chained back to back; rest-to-rest boundary conditions keep the
/// profile smooth through third order across the seams, and the motion
/// never goes quiet, which is what makes every coefficient visible along
/// the whole scheduling range.
pub fn generate_reference(spec: &ReferenceSpec, ctx: &DeltaContext) -> Result<DVector<f64>> {
    if spec.moves == 0 {
        return Err(Error::InvalidInput("profile needs at least one move".into()));
    }
    if spec.samples < 100 * spec.moves {
        return Err(Error::InvalidInput(format!(
            "profile needs at least 100 samples per move to resolve the snap segments, got {} for {} moves",
            spec.samples, spec.moves
        )));
    }
    if !spec.amplitude.is_finite() {
        return Err(Error::InvalidInput("amplitude must be finite".into()));
    }
    let n = spec.samples;
    let ts = ctx.sample_time();
    let block = n / spec.moves;
    let move_samples = block;
    let seg = move_samples as f64 * ts / 8.0;
    let snap_signs = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];

    // Segment boundary states (position, velocity, acceleration, jerk) under
    // unit snap magnitude.
    let mut states = [[0.0f64; 4]; 9];
    for i in 0..8 {
        let [p, v, a, j] = states[i];
        let s = snap_signs[i];
        states[i + 1] = [
            p + v * seg + a * seg * seg / 2.0 + j * seg.powi(3) / 6.0 + s * seg.powi(4) / 24.0,
            v + a * seg + j * seg * seg / 2.0 + s * seg.powi(3) / 6.0,
            a + j * seg + s * seg * seg / 2.0,
            j + s * seg,
        ];
    }

    let mut r = DVector::zeros(n);
    for m in 0..spec.moves {
        let start = m * block;
        let stop = if m + 1 == spec.moves { n } else { start + block };
        let (from, to) = if m % 2 == 0 {
            (0.0, spec.amplitude)
        } else {
            (spec.amplitude, 0.0)
        };
        let scale = (to - from) / (8.0 * seg.powi(4));
        for k in start..stop {
            if k - start >= move_samples {
                r[k] = to;
                continue;
            }
            let t = (k - start) as f64 * ts;
            let i = ((t / seg) as usize).min(7);
            let tau = t - i as f64 * seg;
            let [p, v, a, j] = states[i];
            let s = snap_signs[i];
            let pos = p
                + v * tau
                + a * tau * tau / 2.0
                + j * tau.powi(3) / 6.0
                + s * tau.powi(4) / 24.0;
            r[k] = from + scale * pos;
        }
    }
    Ok(r)
}

/// Scheduling trajectory selection for generated records.
#[derive(Debug, Clone, PartialEq)]
pub enum RhoMode {
    /// Ramp from −1 to 1 across the record.
    LinearRamp,
    /// Ramp from 1 to −1; used for validation records.
    ReversedRamp,
    Custom(DVector<f64>),
}

impl RhoMode {
    fn trajectory(&self, n: usize) -> Result<DMatrix<f64>> {
        let ramp = |k: usize| 2.0 * k as f64 / (n as f64 - 1.0) - 1.0;
        match self {
            RhoMode::LinearRamp => Ok(DMatrix::from_fn(n, 1, |k, _| ramp(k))),
            RhoMode::ReversedRamp => Ok(DMatrix::from_fn(n, 1, |k, _| -ramp(k))),
            RhoMode::Custom(rho) => {
                if rho.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "custom scheduling trajectory has {} samples, record has {n}",
                        rho.len()
                    )));
                }
                Ok(DMatrix::from_fn(n, 1, |k, _| rho[k]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// Noise standard deviation relative to the population std of the clean
    /// input signal.
    pub relative_std: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            relative_std: 0.01,
            seed: 0,
        }
    }
}

/// A generated record together with the ground truth the estimator never
/// sees.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub clean_u: DVector<f64>,
    /// Empirical mean of the squared injected noise; zero without noise.
    pub noise_variance: f64,
}

/// Builds a record by simulating the rig in reverse: the load position is
/// the reference itself, the output-side polynomial gives the coupling force
/// signal, and the clean input is recovered through the inverse filter in
/// physical units. Measurement noise is then added to the input.
pub fn generate_dataset(
    sys: &BenchmarkSystem,
    spec: &ReferenceSpec,
    noise: &NoiseSpec,
    ctx: &DeltaContext,
    rho_mode: &RhoMode,
) -> Result<GeneratedDataset> {
    if noise.relative_std < 0.0 || !noise.relative_std.is_finite() {
        return Err(Error::InvalidInput(format!(
            "relative noise level must be nonnegative, got {}",
            noise.relative_std
        )));
    }
    let y = generate_reference(spec, ctx)?;
    let n = y.len();
    let rho = rho_mode.trajectory(n)?;

    let mut a_raw = DMatrix::zeros(n, 5);
    let mut b_raw = DMatrix::zeros(n, 3);
    for k in 0..n {
        let d2 = sys.damping(rho[(k, 0)]);
        let ar = sys.raw_a_row(d2);
        let br = sys.raw_b_row(d2);
        for i in 0..5 {
            a_raw[(k, i)] = ar[i];
        }
        for i in 0..3 {
            b_raw[(k, i)] = br[i];
        }
    }

    let w = apply_delta_polynomial(&y, &a_raw, ctx)?;
    let clean_u = generalized_inverse_filter(&w, &b_raw, ctx)?;

    let (u_meas, noise_variance) = if noise.relative_std == 0.0 {
        (clean_u.clone(), 0.0)
    } else {
        let mean = clean_u.mean();
        let var = clean_u.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n as f64;
        let sigma = noise.relative_std * var.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let dist = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
        let mut u = clean_u.clone();
        let mut sq = 0.0;
        for k in 0..n {
            let v = dist.sample(&mut rng);
            u[k] += v;
            sq += v * v;
        }
        (u, sq / n as f64)
    };

    let dataset = Dataset::new(u_meas, y, rho, *ctx)?;
    Ok(GeneratedDataset {
        dataset,
        clean_u,
        noise_variance,
    })
}

/// Relative root-mean-square errors of selected coefficient functions on a
/// dense operating-condition grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoefficientFitError {
    pub a3_rel_rmse: f64,
    pub b1_rel_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelMetrics {
    /// N⁻¹ Σ ε².
    pub normalized_cost: f64,
    /// Normalized residual autocorrelation at lags 1..=20.
    pub residual_autocorrelation: Vec<f64>,
    /// How many of those lags fall inside ±2/√N.
    pub lags_within_band: usize,
    pub whiteness_band: f64,
    /// Empirical noise variance when the clean input is known.
    pub noise_floor: Option<f64>,
    /// Present when ground truth applies: scalar condition, rig orders.
    pub coefficient_rmse: Option<CoefficientFitError>,
}

/// Normalized autocorrelation of a residual sequence at lags 1..=max_lag,
/// after removing the sample mean.
pub fn residual_autocorrelation(residuals: &DVector<f64>, max_lag: usize) -> Vec<f64> {
    let n = residuals.len();
    let mean = residuals.mean();
    let denom: f64 = residuals.iter().map(|e| (e - mean).powi(2)).sum();
    let mut out = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        if lag >= n || denom == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut acc = 0.0;
        for k in lag..n {
            acc += (residuals[k] - mean) * (residuals[k - lag] - mean);
        }
        out.push(acc / denom);
    }
    out
}

/// Scores a fitted map on a record. `clean_u` enables the noise-floor
/// metric; `truth` enables the coefficient-function comparison when the
/// model is shaped like the rig.
pub fn evaluate_model(
    map: &impl CoefficientMap,
    data: &Dataset,
    orders: ModelOrders,
    clean_u: Option<&DVector<f64>>,
    truth: Option<&BenchmarkSystem>,
) -> Result<ModelMetrics> {
    let n = data.len();
    let pred = predict(map, data, orders)?;
    let autocorr = residual_autocorrelation(&pred.residuals, 20);
    let band = 2.0 / (n as f64).sqrt();
    let within = autocorr.iter().filter(|r| r.abs() <= band).count();

    let noise_floor = clean_u.map(|u| {
        let mut sq = 0.0;
        for k in 0..n {
            let v = data.u_meas[k] - u[k];
            sq += v * v;
        }
        sq / n as f64
    });

    let coefficient_rmse = match truth {
        Some(sys)
            if orders == sys.orders()
                && map.scheduling_dim() == 1
                && map.output_width() == 7 =>
        {
            let grid = 201;
            let mut est_a3 = Vec::with_capacity(grid);
            let mut est_b1 = Vec::with_capacity(grid);
            let mut true_a3 = Vec::with_capacity(grid);
            let mut true_b1 = Vec::with_capacity(grid);
            for g in 0..grid {
                let rho = -1.0 + 2.0 * g as f64 / (grid - 1) as f64;
                let est = map.eval(&[rho])?;
                let row = sys.coefficient_row(rho);
                est_a3.push(est[3]);
                est_b1.push(est[5]);
                true_a3.push(row[3]);
                true_b1.push(row[5]);
            }
            let rel_rmse = |est: &[f64], truth: &[f64]| {
                let err: f64 = est
                    .iter()
                    .zip(truth)
                    .map(|(e, t)| (e - t).powi(2))
                    .sum();
                let scale: f64 = truth.iter().map(|t| t * t).sum();
                (err / scale).sqrt()
            };
            Some(CoefficientFitError {
                a3_rel_rmse: rel_rmse(&est_a3, &true_a3),
                b1_rel_rmse: rel_rmse(&est_b1, &true_b1),
            })
        }
        _ => None,
    };

    Ok(ModelMetrics {
        normalized_cost: pred.cost / n as f64,
        residual_autocorrelation: autocorr,
        lags_within_band: within,
        whiteness_band: band,
        noise_floor,
        coefficient_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::evaluate_trajectories;
    use crate::delta::delta_signal;

    fn ctx() -> DeltaContext {
        DeltaContext::new(1e-3).unwrap()
    }

    #[test]
    fn damping_at_zero_matches_the_closed_form() {
        let sys = BenchmarkSystem::default();
        assert!((sys.damping(0.0) - 1000.0001).abs() < 1e-10);
    }

    #[test]
    fn damping_is_positive_with_the_expected_interior_minimum() {
        let sys = BenchmarkSystem::default();
        let mut min = f64::INFINITY;
        let mut argmin = 0.0;
        for g in 0..=4000 {
            let rho = -1.0 + 2.0 * g as f64 / 4000.0;
            let d = sys.damping(rho);
            assert!(d > 0.0, "damping not positive at rho = {rho}");
            if d < min {
                min = d;
                argmin = rho;
            }
        }
        assert!((7.9..7.92).contains(&min), "minimum damping {min}");
        assert!((0.25..0.28).contains(&argmin.abs()), "minimizer {argmin}");
    }

    #[test]
    fn normalized_coefficients_match_hand_evaluated_values_at_zero() {
        let sys = BenchmarkSystem::default();
        let row = sys.coefficient_row(0.0);
        // a3 = (d1 m2 + (m1+m2) d2(0)) / k2 and b1 = d2(0) / k2.
        assert!((row[3] - 0.421100042).abs() < 1e-9, "a3(0) = {}", row[3]);
        assert!((row[5] - 0.020000002).abs() < 1e-9, "b1(0) = {}", row[5]);
        assert!((row[0] - 0.3).abs() < 1e-15);
        assert!((row[6] - 11.0 / 5e4).abs() < 1e-18);
    }

    #[test]
    fn trajectory_evaluation_agrees_with_the_map_wrapper() {
        let sys = BenchmarkSystem::default();
        let rho = DMatrix::from_fn(40, 1, |k, _| -1.0 + k as f64 / 20.0);
        let direct = sys.true_coefficients(&rho).unwrap();
        let map = TrueCoefficientMap::new(sys.clone());
        let via_map = evaluate_trajectories(&map, &rho, sys.orders()).unwrap();
        assert_eq!(direct.a(), via_map.a());
        assert_eq!(direct.b(), via_map.b());
    }

    #[test]
    fn reference_hits_both_endpoints_at_rest() {
        let spec = ReferenceSpec {
            samples: 1600,
            amplitude: 2.5,
            moves: 1,
        };
        let r = generate_reference(&spec, &ctx()).unwrap();
        assert_eq!(r[0], 0.0);
        // The last sample sits one step short of the move end, inside the
        // quartic landing tail.
        assert!((r[1599] - 2.5).abs() <= 1e-9 * 2.5, "end {}", r[1599]);
        // At-rest boundaries: the first and last increments are tiny
        // compared to the mid-move slope.
        let mid_slope = (r[800] - r[799]).abs();
        assert!((r[1] - r[0]).abs() < 1e-6 * mid_slope);
        assert!((r[1599] - r[1598]).abs() < 1e-6 * mid_slope);
    }

    #[test]
    fn multi_move_profile_alternates_between_setpoints() {
        let spec = ReferenceSpec {
            samples: 1600,
            amplitude: 1.0,
            moves: 4,
        };
        let r = generate_reference(&spec, &ctx()).unwrap();
        // Each block starts exactly at the previous setpoint.
        for (block_start, target) in [(0, 0.0), (400, 1.0), (800, 0.0), (1200, 1.0)] {
            assert_eq!(r[block_start], target, "block start {block_start}");
        }
        // Seams are smooth: the jump across a block boundary is at rest
        // scale, far below the mid-move slope.
        let mid_slope = (r[200] - r[199]).abs();
        assert!((r[400] - r[399]).abs() < 1e-6 * mid_slope);
        let peak = r.amax();
        assert!((peak - 1.0).abs() <= 1e-9, "peak {peak}");
    }

    #[test]
    fn zero_amplitude_reference_is_identically_zero() {
        let spec = ReferenceSpec {
            samples: 200,
            amplitude: 0.0,
            moves: 1,
        };
        let r = generate_reference(&spec, &ctx()).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reference_is_smooth_to_fourth_order_and_no_further() {
        let spec = ReferenceSpec {
            samples: 1600,
            amplitude: 1.0,
            moves: 1,
        };
        let c = ctx();
        let r = generate_reference(&spec, &c).unwrap();
        let d4 = delta_signal(&r, 4, &c);
        let d5 = delta_signal(&r, 5, &c);
        let seg: f64 = 1600.0 * 1e-3 / 8.0;
        let snap = 1.0 / (8.0 * seg.powi(4));
        // δ⁴r tracks the piecewise-constant snap, up to the first samples
        // where the zero pre-window convention differentiates the ramp-in.
        let d4_interior = d4.rows(8, d4.len() - 8).amax();
        assert!(
            d4_interior <= 2.0 * snap,
            "fourth difference {d4_interior} vs snap magnitude {snap}"
        );
        // δ⁵r has spikes of height ≈ (snap jump)/T_s at segment boundaries.
        let d5_interior = d5.rows(8, d5.len() - 8).amax();
        assert!(
            d5_interior >= 50.0 * d4_interior,
            "fifth difference {d5_interior} too small vs {d4_interior}"
        );
    }

    #[test]
    fn too_short_reference_is_rejected() {
        let spec = ReferenceSpec {
            samples: 99,
            amplitude: 1.0,
            moves: 1,
        };
        assert!(matches!(
            generate_reference(&spec, &ctx()),
            Err(Error::InvalidInput(_))
        ));
        let crowded = ReferenceSpec {
            samples: 500,
            amplitude: 1.0,
            moves: 6,
        };
        assert!(matches!(
            generate_reference(&crowded, &ctx()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_noise_returns_the_clean_input_bit_for_bit() {
        let sys = BenchmarkSystem::default();
        let spec = ReferenceSpec {
            samples: 400,
            amplitude: 1.0,
            moves: 2,
        };
        let noise = NoiseSpec {
            relative_std: 0.0,
            seed: 42,
        };
        let gen = generate_dataset(&sys, &spec, &noise, &ctx(), &RhoMode::LinearRamp).unwrap();
        assert_eq!(gen.dataset.u_meas, gen.clean_u);
        assert_eq!(gen.noise_variance, 0.0);
    }

    #[test]
    fn input_side_round_trip_reproduces_the_force_signal() {
        let sys = BenchmarkSystem::default();
        let spec = ReferenceSpec {
            samples: 800,
            amplitude: 1.0,
            moves: 4,
        };
        let noise = NoiseSpec {
            relative_std: 0.0,
            seed: 0,
        };
        let c = ctx();
        let gen = generate_dataset(&sys, &spec, &noise, &c, &RhoMode::LinearRamp).unwrap();

        let n = gen.clean_u.len();
        let mut a_raw = DMatrix::zeros(n, 5);
        let mut b_raw = DMatrix::zeros(n, 3);
        for k in 0..n {
            let d2 = sys.damping(gen.dataset.rho[(k, 0)]);
            let ar = sys.raw_a_row(d2);
            let br = sys.raw_b_row(d2);
            for i in 0..5 {
                a_raw[(k, i)] = ar[i];
            }
            for i in 0..3 {
                b_raw[(k, i)] = br[i];
            }
        }
        let w = apply_delta_polynomial(&gen.dataset.y, &a_raw, &c).unwrap();
        let w_back = apply_delta_polynomial(&gen.clean_u, &b_raw, &c).unwrap();
        let scale = w.amax();
        assert!(
            (&w_back - &w).amax() <= 1e-9 * scale,
            "round trip error {} vs scale {scale}",
            (&w_back - &w).amax()
        );
    }

    #[test]
    fn noise_variance_tracks_the_requested_level_on_a_long_record() {
        let sys = BenchmarkSystem::default();
        let spec = ReferenceSpec {
            samples: 6400,
            amplitude: 1.0,
            moves: 10,
        };
        let noise = NoiseSpec {
            relative_std: 0.01,
            seed: 7,
        };
        let gen = generate_dataset(&sys, &spec, &noise, &ctx(), &RhoMode::LinearRamp).unwrap();

        let mean = gen.clean_u.mean();
        let var_u = gen
            .clean_u
            .iter()
            .map(|u| (u - mean).powi(2))
            .sum::<f64>()
            / gen.clean_u.len() as f64;
        let ratio = gen.noise_variance / var_u;
        assert!(
            (0.8e-4..=1.2e-4).contains(&ratio),
            "variance ratio {ratio}"
        );
    }

    #[test]
    fn generation_is_deterministic_for_a_fixed_seed() {
        let sys = BenchmarkSystem::default();
        let spec = ReferenceSpec {
            samples: 500,
            amplitude: 1.0,
            moves: 2,
        };
        let noise = NoiseSpec {
            relative_std: 0.01,
            seed: 123,
        };
        let g1 = generate_dataset(&sys, &spec, &noise, &ctx(), &RhoMode::ReversedRamp).unwrap();
        let g2 = generate_dataset(&sys, &spec, &noise, &ctx(), &RhoMode::ReversedRamp).unwrap();
        assert_eq!(g1.dataset.u_meas, g2.dataset.u_meas);
        assert_eq!(g1.dataset.rho, g2.dataset.rho);
    }

    #[test]
    fn scheduling_ramps_span_the_operating_range() {
        let traj = RhoMode::LinearRamp.trajectory(101).unwrap();
        assert_eq!(traj[(0, 0)], -1.0);
        assert_eq!(traj[(100, 0)], 1.0);
        assert_eq!(traj[(50, 0)], 0.0);
        let rev = RhoMode::ReversedRamp.trajectory(101).unwrap();
        assert_eq!(rev[(0, 0)], 1.0);
        assert_eq!(rev[(100, 0)], -1.0);
        assert!(matches!(
            RhoMode::Custom(DVector::zeros(5)).trajectory(6),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn ground_truth_map_explains_a_noise_free_record() {
        let sys = BenchmarkSystem::default();
        let spec = ReferenceSpec {
            samples: 1000,
            amplitude: 1.0,
            moves: 5,
        };
        let noise = NoiseSpec {
            relative_std: 0.0,
            seed: 0,
        };
        let gen = generate_dataset(&sys, &spec, &noise, &ctx(), &RhoMode::LinearRamp).unwrap();
        let map = TrueCoefficientMap::new(sys.clone());
        let metrics = evaluate_model(
            &map,
            &gen.dataset,
            sys.orders(),
            Some(&gen.clean_u),
            Some(&sys),
        )
        .unwrap();
        assert!(
            metrics.normalized_cost <= 1e-12,
            "cost {}",
            metrics.normalized_cost
        );
        assert_eq!(metrics.noise_floor, Some(0.0));
        let fit = metrics.coefficient_rmse.unwrap();
        assert_eq!(fit.a3_rel_rmse, 0.0);
        assert_eq!(fit.b1_rel_rmse, 0.0);
    }

    #[test]
    fn white_noise_residuals_stay_inside_the_band_at_most_lags() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let e = DVector::from_fn(4000, |_, _| dist.sample(&mut rng));
        let ac = residual_autocorrelation(&e, 20);
        let band = 2.0 / 4000f64.sqrt();
        let within = ac.iter().filter(|r| r.abs() <= band).count();
        assert!(within >= 18, "only {within} of 20 lags inside the band");
    }

    #[test]
    fn strongly_correlated_residuals_violate_the_band() {
        let e = DVector::from_fn(2000, |k, _| (0.01 * k as f64).sin());
        let ac = residual_autocorrelation(&e, 20);
        let band = 2.0 / 2000f64.sqrt();
        let within = ac.iter().filter(|r| r.abs() <= band).count();
        assert!(within <= 2, "{within} lags inside the band for a slow sine");
    }
}
