//! Trapezoid rule in the standard-normal base space.
//!
//! Expectations over a pushforward `T(ζ)`, `ζ ~ N(0, 1)`, are evaluated as
//! `Σ_k w_k h(T(ζ_k))` with `w_k ∝ φ(ζ_k)` on a uniform grid.

use statrs::function::erf::erfc;

pub const DEFAULT_NODES: usize = 128;
pub const DEFAULT_HALF_WIDTH: f64 = 6.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for BaseQuadrature {
    fn default() -> Self {
        Self::new(DEFAULT_NODES, DEFAULT_HALF_WIDTH)
    }
}

impl BaseQuadrature {
    /// `n` equispaced nodes on `[-half_width, half_width]`; weights are
    /// normalized so that constants integrate exactly.
    pub fn new(n: usize, half_width: f64) -> Self {
        assert!(n >= 2, "quadrature needs at least two nodes");
        let step = 2.0 * half_width / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|k| -half_width + step * k as f64).collect();
        let mut weights: Vec<f64> = nodes
            .iter()
            .enumerate()
            .map(|(k, &z)| {
                let end = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                end * std_normal_pdf(z)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut h: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * h(z)).sum()
    }
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

pub fn std_normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// `Φ(z)`, accurate in both tails.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn ln_sqrt_2pi() -> f64 {
    LN_SQRT_2PI
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_are_symmetric() {
        let q = BaseQuadrature::default();
        assert_eq!(q.len(), 128);
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for k in 0..64 {
            assert!((q.weights[k] - q.weights[127 - k]).abs() < 1e-16);
            assert!((q.nodes[k] + q.nodes[127 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn low_moments_of_standard_normal() {
        let q = BaseQuadrature::default();
        assert!(q.expect(|z| z).abs() < 1e-14);
        assert!((q.expect(|z| z * z) - 1.0).abs() < 1e-7);
        // Truncation at ±6 removes about 3e-6 of the fourth moment.
        assert!((q.expect(|z| z.powi(4)) - 3.0).abs() < 1e-5);
    }

    #[test]
    fn cdf_tails() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-16);
        let p = std_normal_cdf(-8.0);
        assert!((p / 6.220_960_574_271_785e-16 - 1.0).abs() < 1e-10);
    }
}
