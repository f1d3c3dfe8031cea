//! Small dense network with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Weights and biases of `sizes[0] -> sizes[1] -> ... -> sizes[L]`.
///
/// Layer `l` stores its weight matrix row-major (`sizes[l+1] x sizes[l]`)
/// followed by its bias. Hidden layers use `activation`; the output layer
/// is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Activations of every layer from one forward pass.
pub struct MlpCache {
    layers: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("non-empty")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: Vec<usize>, activation: Activation) -> Self {
        let n = param_count(&sizes);
        Self {
            sizes,
            activation,
            params: vec![0.0; n],
        }
    }

    /// Glorot-uniform hidden weights; the output layer starts at zero so the
    /// initial output equals the final bias.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut net = Self::zeros(sizes, activation);
        let last = net.sizes.len() - 2;
        let mut offset = 0;
        for l in 0..net.sizes.len() - 1 {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            if l < last {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut net.params[offset..offset + fan_in * fan_out] {
                    *w = rng.random_range(-a..a);
                }
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset of the bias vector of the output layer.
    pub fn output_bias_offset(&self) -> usize {
        self.params.len() - self.output_dim()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if self.params.len() != param_count(&self.sizes) {
            return Err(Error::DimensionMismatch {
                context: "mlp parameters",
                expected: param_count(&self.sizes),
                got: self.params.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.layers.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache> {
        self.check_input(x)?;
        let n_layers = self.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &layers[l];
            let mut out = Vec::with_capacity(n_out);
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                let s: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[r];
                out.push(if l + 1 < n_layers { self.activation.apply(s) } else { s });
            }
            layers.push(out);
            offset += n_in * n_out + n_out;
        }
        Ok(MlpCache { layers })
    }

    /// Accumulates d(loss)/d(params) into `grad_params` given d(loss)/d(output);
    /// returns d(loss)/d(input).
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < n_layers {
                let act = &cache.layers[l + 1];
                for r in 0..n_out {
                    delta[r] *= self.activation.derivative_from_output(act[r]);
                }
            }
            let off = offsets[l];
            let input = &cache.layers[l];
            let w = &self.params[off..off + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad_params[off + r * n_in..off + (r + 1) * n_in];
                for c in 0..n_in {
                    gw[c] += d * input[c];
                    next[c] += d * w[r * n_in + c];
                }
                grad_params[off + n_in * n_out + r] += d;
            }
            delta = next;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::check::{finite_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_output_final_bias() {
        let mut net = Mlp::zeros(vec![3, 4, 4, 2], Activation::Tanh);
        let off = net.output_bias_offset();
        net.params[off] = 0.7;
        net.params[off + 1] = -1.2;
        assert_eq!(net.forward(&[5.0, -3.0, 1.0]).unwrap(), vec![0.7, -1.2]);
    }

    #[test]
    fn identity_passthrough() {
        let mut net = Mlp::zeros(vec![2, 2, 2], Activation::Identity);
        // W1 = I, b1 = 0, W2 = I, b2 = 0
        net.params[0] = 1.0;
        net.params[3] = 1.0;
        net.params[6] = 1.0;
        net.params[9] = 1.0;
        assert_eq!(net.forward(&[0.3, -4.0]).unwrap(), vec![0.3, -4.0]);
    }

    #[test]
    fn shape_mismatch() {
        let net = Mlp::zeros(vec![2, 3, 1], Activation::Tanh);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(2, &[6, 5], 3, Activation::Tanh, &mut rng);
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let x = [0.4, -1.1];
        let weights = [0.5, -1.0, 2.0];
        let cache = net.forward_cached(&x).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let gx = net.backward(&cache, &weights, &mut g);

        let base = net.clone();
        let fd = finite_difference(
            |p| {
                let mut n = base.clone();
                n.params.copy_from_slice(p);
                let o = n.forward(&x).unwrap();
                o.iter().zip(weights).map(|(a, b)| a * b).sum()
            },
            &net.params,
            1e-5,
        );
        assert!(relative_error(&g, &fd) < 1e-7);

        let fdx = finite_difference(
            |xv| {
                let o = base.forward(xv).unwrap();
                o.iter().zip(weights).map(|(a, b)| a * b).sum()
            },
            &x,
            1e-5,
        );
        assert!(relative_error(&gx, &fdx) < 1e-7);
    }
}
