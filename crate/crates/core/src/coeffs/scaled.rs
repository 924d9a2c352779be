//! Output-scaled view of a scheduling network.
//!
//! The stacked coefficients span several decades, so optimizing the raw
//! network conditions badly: with isotropic damping the directions that move
//! the small coefficients barely move at all and the fit crawls. Wrapping the
//! net with fixed per-output scales makes a unit parameter step move every
//! coefficient by a comparable relative amount. The output layer is affine,
//! so after training the scales fold back into it exactly and the result is
//! an ordinary network again.

use nalgebra::{DMatrix, DVector};

use super::{CoefficientMap, SchedulingNet};
use crate::error::{Error, Result};

/// Shrink applied to the output-layer weights by [`ScaledNet::with_constant_output`]
/// so the freshly set bias dominates the initial function.
const OUTPUT_WEIGHT_SHRINK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledNet {
    net: SchedulingNet,
    scale: DVector<f64>,
}

impl ScaledNet {
    /// Wraps `net` so its outputs are multiplied elementwise by `scale`.
    pub fn new(net: SchedulingNet, scale: DVector<f64>) -> Result<Self> {
        if scale.len() != *net.layer_sizes().last().unwrap() {
            return Err(Error::DimensionMismatch(format!(
                "{} scales for a network with {} outputs",
                scale.len(),
                net.layer_sizes().last().unwrap()
            )));
        }
        if scale.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(Error::InvalidInput(
                "output scales must be finite and nonzero".into(),
            ));
        }
        Ok(Self { net, scale })
    }

    /// Wraps `net` and rewrites its output layer so the scaled map starts out
    /// close to the constant function `targets`: the output bias is set to
    /// `targets / scale` and the output weights are shrunk until the bias
    /// dominates, which keeps live gradient paths into the hidden layers.
    pub fn with_constant_output(
        net: &SchedulingNet,
        scale: DVector<f64>,
        targets: &DVector<f64>,
    ) -> Result<Self> {
        if targets.len() != scale.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} targets for {} scales",
                targets.len(),
                scale.len()
            )));
        }
        let layers = net.layer_sizes().len() - 1;
        let mut weights: Vec<DMatrix<f64>> = (0..layers).map(|l| net.weight(l).clone()).collect();
        let mut biases: Vec<DVector<f64>> = (0..layers).map(|l| net.bias(l).clone()).collect();
        weights[layers - 1] *= OUTPUT_WEIGHT_SHRINK;
        biases[layers - 1] = targets.component_div(&scale);
        let net = SchedulingNet::from_parts(weights, biases, net.activation())?;
        Self::new(net, scale)
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn inner(&self) -> &SchedulingNet {
        &self.net
    }

    /// Folds the scales into the affine output layer and returns the plain
    /// network computing the same function.
    pub fn collapse(&self) -> SchedulingNet {
        let layers = self.net.layer_sizes().len() - 1;
        let mut weights: Vec<DMatrix<f64>> =
            (0..layers).map(|l| self.net.weight(l).clone()).collect();
        let mut biases: Vec<DVector<f64>> = (0..layers).map(|l| self.net.bias(l).clone()).collect();
        for (r, &s) in self.scale.iter().enumerate() {
            weights[layers - 1].row_mut(r).scale_mut(s);
            biases[layers - 1][r] *= s;
        }
        SchedulingNet::from_parts(weights, biases, self.net.activation())
            .expect("collapsing preserves layer shapes")
    }
}

/// Per-output scales from rough coefficient magnitudes, floored at a small
/// fraction of the largest one so a near-zero estimate cannot freeze its
/// output direction.
pub fn magnitude_scale(consts: &DVector<f64>) -> DVector<f64> {
    let top = consts.amax();
    let floor = if top > 0.0 { 1e-6 * top } else { 1.0 };
    consts.map(|c| c.abs().max(floor))
}

impl CoefficientMap for ScaledNet {
    fn scheduling_dim(&self) -> usize {
        self.net.scheduling_dim()
    }

    fn output_width(&self) -> usize {
        self.net.output_width()
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn params(&self) -> DVector<f64> {
        self.net.params()
    }

    fn set_params(&mut self, values: &DVector<f64>) -> Result<()> {
        self.net.set_params(values)
    }

    fn eval(&self, rho: &[f64]) -> Result<DVector<f64>> {
        Ok(self.net.eval(rho)?.component_mul(&self.scale))
    }

    fn eval_with_param_jacobian(&self, rho: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (out, mut jac) = self.net.eval_with_param_jacobian(rho)?;
        for (r, &s) in self.scale.iter().enumerate() {
            jac.row_mut(r).scale_mut(s);
        }
        Ok((out.component_mul(&self.scale), jac))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::coeffs::Activation;

    fn sample_net(seed: u64) -> SchedulingNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SchedulingNet::random(&[1, 3, 3, 4], Activation::Tanh, &mut rng).unwrap()
    }

    fn decade_scale() -> DVector<f64> {
        DVector::from_vec(vec![21.0, 0.05, 2.2e-3, 2.2e-4])
    }

    #[test]
    fn collapse_computes_the_same_function() {
        let scaled = ScaledNet::new(sample_net(7), decade_scale()).unwrap();
        let plain = scaled.collapse();
        for g in 0..17 {
            let rho = -1.0 + g as f64 / 8.0;
            let a = scaled.eval(&[rho]).unwrap();
            let b = plain.eval(&[rho]).unwrap();
            for c in 0..4 {
                approx::assert_relative_eq!(a[c], b[c], max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn scaled_jacobian_matches_finite_differences() {
        let scaled = ScaledNet::new(sample_net(3), decade_scale()).unwrap();
        let phi = scaled.params();
        let (_, jac) = scaled.eval_with_param_jacobian(&[0.3]).unwrap();
        let h = 1e-6;
        for p in 0..scaled.param_count() {
            let mut lo = scaled.clone();
            let mut hi = scaled.clone();
            let mut philo = phi.clone();
            let mut phihi = phi.clone();
            philo[p] -= h;
            phihi[p] += h;
            lo.set_params(&philo).unwrap();
            hi.set_params(&phihi).unwrap();
            let flo = lo.eval(&[0.3]).unwrap();
            let fhi = hi.eval(&[0.3]).unwrap();
            for c in 0..4 {
                let fd = (fhi[c] - flo[c]) / (2.0 * h);
                approx::assert_relative_eq!(jac[(c, p)], fd, max_relative = 1e-5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_start_stays_near_its_targets() {
        let targets = DVector::from_vec(vec![21.0, -0.05, 2.2e-3, -2.2e-4]);
        let scale = magnitude_scale(&targets);
        let scaled = ScaledNet::with_constant_output(&sample_net(11), scale, &targets).unwrap();
        for g in 0..41 {
            let rho = -1.0 + g as f64 / 20.0;
            let out = scaled.eval(&[rho]).unwrap();
            for c in 0..4 {
                let dev = (out[c] - targets[c]).abs() / targets[c].abs();
                assert!(dev < 0.2, "output {c} at rho {rho}: deviation {dev}");
            }
        }
    }

    #[test]
    fn magnitude_scale_floors_small_entries() {
        let s = magnitude_scale(&DVector::from_vec(vec![-10.0, 0.0, 1e-12]));
        let floor = 1e-6 * 10.0;
        assert_eq!(s[0], 10.0);
        assert_eq!(s[1], floor);
        assert_eq!(s[2], floor);
    }

    #[test]
    fn bad_scales_are_rejected() {
        let net = sample_net(1);
        assert!(ScaledNet::new(net.clone(), DVector::zeros(4)).is_err());
        assert!(ScaledNet::new(net.clone(), DVector::from_element(3, 1.0)).is_err());
        let nan = DVector::from_vec(vec![1.0, f64::NAN, 1.0, 1.0]);
        assert!(ScaledNet::new(net, nan).is_err());
    }
}
