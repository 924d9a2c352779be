//! Fully connected feedforward network used as a coefficient function.
//!
//! Layer l maps h^l to z^{l+1} = W^l h^l + c^l; hidden layers apply the
//! activation elementwise, the output layer is affine. The parameter vector
//! flattens as [vec(W^0); c^0; ...; vec(W^L); c^L] with column-stacked vec.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CoefficientMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidInput(format!("unknown activation '{other}'"))),
        }
    }

    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative at pre-activation `z` whose activation value is `h`.
    /// The rectifier derivative at exactly zero is taken as 0.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

thread_local! {
    static FORWARD_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of network forward passes on this thread since the last reset.
pub fn forward_eval_count() -> u64 {
    FORWARD_EVALS.with(|c| c.get())
}

pub fn reset_forward_eval_count() {
    FORWARD_EVALS.with(|c| c.set(0));
}

/// Intermediate values of one forward pass: activations h^0..h^L and hidden
/// pre-activations z^1..z^L.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<DVector<f64>>,
    pre_activations: Vec<DVector<f64>>,
}

impl ForwardCache {
    pub fn activation(&self, layer: usize) -> &DVector<f64> {
        &self.activations[layer]
    }

    pub fn pre_activation(&self, hidden_layer: usize) -> &DVector<f64> {
        &self.pre_activations[hidden_layer]
    }
}

/// Output sensitivities with respect to each layer's pre-activation, kept
/// together with the forward cache they were computed from. `delta(l)` is
/// d(output)/d(z^{l+1}), the matrix multiplying anything layer l's parameters
/// feed into; the last one is the identity because the output layer is affine.
#[derive(Debug, Clone)]
pub struct LayerSensitivities {
    deltas: Vec<DMatrix<f64>>,
    cache: ForwardCache,
}

impl LayerSensitivities {
    pub fn delta(&self, layer: usize) -> &DMatrix<f64> {
        &self.deltas[layer]
    }

    pub fn layer_count(&self) -> usize {
        self.deltas.len()
    }

    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingNet {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

impl SchedulingNet {
    /// Network with all parameters zero. `layer_sizes` lists the input width,
    /// the hidden widths and the output width; at least input and output are
    /// required.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidInput(
                "a network needs at least input and output sizes".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&s| DVector::zeros(s))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Weights drawn uniformly from ±1/sqrt(fan-in), biases zero.
    pub fn random<R: Rng>(
        layer_sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        for w in &mut net.weights {
            let s = 1.0 / (w.ncols() as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-s..s);
            }
        }
        Ok(net)
    }

    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidInput(
                "need one bias vector per weight matrix".into(),
            ));
        }
        let mut layer_sizes = vec![weights[0].ncols()];
        for (w, c) in weights.iter().zip(&biases) {
            if w.nrows() != c.len() || w.ncols() != *layer_sizes.last().unwrap() {
                return Err(Error::DimensionMismatch(
                    "inconsistent layer shapes".into(),
                ));
            }
            layer_sizes.push(w.nrows());
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of hidden layers.
    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &DVector<f64> {
        &self.biases[layer]
    }

    /// Forward pass, returning the output and every intermediate value.
    pub fn forward(&self, x: &[f64]) -> Result<(DVector<f64>, ForwardCache)> {
        if x.len() != self.layer_sizes[0] {
            return Err(Error::DimensionMismatch(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.layer_sizes[0]
            )));
        }
        FORWARD_EVALS.with(|c| c.set(c.get() + 1));
        let hidden = self.hidden_layers();
        let mut activations = Vec::with_capacity(hidden + 1);
        let mut pre_activations = Vec::with_capacity(hidden);
        activations.push(DVector::from_column_slice(x));
        for l in 0..hidden {
            let z = &self.weights[l] * activations.last().unwrap() + &self.biases[l];
            let h = z.map(|v| self.activation.eval(v));
            pre_activations.push(z);
            activations.push(h);
        }
        let out = &self.weights[hidden] * activations.last().unwrap() + &self.biases[hidden];
        Ok((
            out,
            ForwardCache {
                activations,
                pre_activations,
            },
        ))
    }

    /// Continues the forward pass from a replacement pre-activation at hidden
    /// layer `hidden_layer` (0-based). Used for derivative checks.
    pub fn forward_from_pre_activation(
        &self,
        hidden_layer: usize,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        let hidden = self.hidden_layers();
        let mut h = z.map(|v| self.activation.eval(v));
        for l in hidden_layer + 1..hidden {
            let zl = &self.weights[l] * &h + &self.biases[l];
            h = zl.map(|v| self.activation.eval(v));
        }
        &self.weights[hidden] * &h + &self.biases[hidden]
    }

    /// Backward recursion for the output's sensitivity to every layer's
    /// pre-activation, reusing the given forward cache. The recursion walks
    ///   delta(l) = delta(l+1) · W^{l+1} · diag(activation'(z^{l+1}))
    /// down from the identity at the affine output layer.
    pub fn layer_sensitivities(&self, cache: ForwardCache) -> LayerSensitivities {
        let hidden = self.hidden_layers();
        let n_out = *self.layer_sizes.last().unwrap();
        let mut deltas = vec![DMatrix::zeros(0, 0); hidden + 1];
        deltas[hidden] = DMatrix::identity(n_out, n_out);
        for l in (0..hidden).rev() {
            let mut m = &deltas[l + 1] * &self.weights[l + 1];
            let z = &cache.pre_activations[l];
            let h = &cache.activations[l + 1];
            for j in 0..m.ncols() {
                let d = self.activation.derivative(z[j], h[j]);
                // Column j of m picks up the activation slope of unit j.
                m.column_mut(j).scale_mut(d);
            }
            deltas[l] = m;
        }
        LayerSensitivities { deltas, cache }
    }

    /// Jacobian of the output with respect to the flattened parameters.
    /// For layer l the weight entry (m, n) contributes delta(l) column m
    /// scaled by h^l[n]; the bias entry m contributes delta(l) column m.
    pub fn param_jacobian(&self, sens: &LayerSensitivities) -> DMatrix<f64> {
        let n_out = *self.layer_sizes.last().unwrap();
        let mut jac = DMatrix::zeros(n_out, self.param_count());
        let mut col = 0;
        for l in 0..self.weights.len() {
            let delta = &sens.deltas[l];
            let h = &sens.cache.activations[l];
            for n in 0..self.layer_sizes[l] {
                for m in 0..self.layer_sizes[l + 1] {
                    let src = delta.column(m);
                    let mut dst = jac.column_mut(col);
                    for r in 0..n_out {
                        dst[r] = src[r] * h[n];
                    }
                    col += 1;
                }
            }
            for m in 0..self.layer_sizes[l + 1] {
                jac.set_column(col, &delta.column(m));
                col += 1;
            }
        }
        jac
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, c) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(c.as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn unflatten(
        values: &DVector<f64>,
        layer_sizes: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        net.set_params(values)?;
        Ok(net)
    }
}

impl CoefficientMap for SchedulingNet {
    fn scheduling_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }

    fn params(&self) -> DVector<f64> {
        self.flatten()
    }

    fn set_params(&mut self, values: &DVector<f64>) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, network needs {}",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (w, c) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.nrows() * w.ncols();
            w.as_mut_slice()
                .copy_from_slice(&values.as_slice()[offset..offset + wn]);
            offset += wn;
            let cn = c.len();
            c.as_mut_slice()
                .copy_from_slice(&values.as_slice()[offset..offset + cn]);
            offset += cn;
        }
        Ok(())
    }

    fn eval(&self, rho: &[f64]) -> Result<DVector<f64>> {
        Ok(self.forward(rho)?.0)
    }

    fn eval_with_param_jacobian(&self, rho: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (out, cache) = self.forward(rho)?;
        let sens = self.layer_sensitivities(cache);
        Ok((out, self.param_jacobian(&sens)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn benchmark_architecture_has_82_parameters() {
        let net = SchedulingNet::zeros(&[1, 5, 5, 7], Activation::Tanh).unwrap();
        assert_eq!(net.param_count(), 82);
    }

    #[test]
    fn flatten_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = SchedulingNet::random(&[2, 4, 3], Activation::Tanh, &mut rng).unwrap();
        let flat = net.flatten();
        let back = SchedulingNet::unflatten(&flat, net.layer_sizes(), net.activation()).unwrap();
        assert_eq!(net, back);
        assert_eq!(back.flatten(), flat);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let v = DVector::zeros(5);
        assert!(SchedulingNet::unflatten(&v, &[1, 2, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_depth_net_is_affine() {
        let mut net = SchedulingNet::zeros(&[2, 3], Activation::Tanh).unwrap();
        let p = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5, 0.25]);
        net.set_params(&p).unwrap();
        let (out, _) = net.forward(&[1.0, -1.0]).unwrap();
        // W = [[1,4],[2,5],[3,6]], c = [0.5,−0.5,0.25]
        assert_eq!(out.as_slice(), &[1.0 - 4.0 + 0.5, 2.0 - 5.0 - 0.5, 3.0 - 6.0 + 0.25]);
        // Affine map: sensitivity of the output to itself is the identity.
        let sens = net.layer_sensitivities(net.forward(&[1.0, -1.0]).unwrap().1);
        assert_eq!(sens.delta(0), &DMatrix::identity(3, 3));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(-1.0, 0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(2.0, 2.0), 1.0);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = SchedulingNet::random(&[2, 4, 3, 2], Activation::Tanh, &mut rng).unwrap();
        let x = [0.3, -0.7];
        let (_, cache) = net.forward(&x).unwrap();
        let sens = net.layer_sensitivities(net.forward(&x).unwrap().1);
        let step = 1e-6;
        for l in 0..net.hidden_layers() {
            let z0 = cache.pre_activation(l).clone();
            let delta = sens.delta(l);
            for j in 0..z0.len() {
                let mut zp = z0.clone();
                let mut zm = z0.clone();
                zp[j] += step;
                zm[j] -= step;
                let gp = net.forward_from_pre_activation(l, &zp);
                let gm = net.forward_from_pre_activation(l, &zm);
                let fd = (gp - gm) / (2.0 * step);
                for r in 0..fd.len() {
                    assert_relative_eq!(delta[(r, j)], fd[r], epsilon = 1e-7, max_relative = 1e-7);
                }
            }
        }
    }

    #[test]
    fn param_jacobian_matches_finite_differences() {
        for seed in [1_u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net =
                SchedulingNet::random(&[2, 3, 4], Activation::Tanh, &mut rng).unwrap();
            let p0 = net.params();
            let x = [0.4, -0.9];
            let (_, jac) = net.eval_with_param_jacobian(&x).unwrap();
            let step = 1e-6;
            for j in 0..net.param_count() {
                let mut pp = p0.clone();
                let mut pm = p0.clone();
                pp[j] += step;
                pm[j] -= step;
                net.set_params(&pp).unwrap();
                let gp = net.eval(&x).unwrap();
                net.set_params(&pm).unwrap();
                let gm = net.eval(&x).unwrap();
                let fd = (gp - gm) / (2.0 * step);
                for r in 0..fd.len() {
                    assert_relative_eq!(jac[(r, j)], fd[r], epsilon = 1e-7, max_relative = 1e-7);
                }
            }
            net.set_params(&p0).unwrap();
        }
    }

    #[test]
    fn param_jacobian_reuses_one_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SchedulingNet::random(&[1, 5, 5, 7], Activation::Tanh, &mut rng).unwrap();
        reset_forward_eval_count();
        let _ = net.eval_with_param_jacobian(&[0.2]).unwrap();
        assert_eq!(forward_eval_count(), 1);
    }
}
