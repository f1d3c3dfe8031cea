//! Exact Gaussian-process regression with Gaussian noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffopt::{adam_step, AdamState, ParamBlock};
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, JitterSchedule, KernelSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactGp {
    pub kernel: KernelSpec,
    pub log_noise_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactFitConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without improving the objective by 1e-9.
    pub patience: usize,
}

impl Default for ExactFitConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 2000,
            patience: 100,
        }
    }
}

/// Log evidence with gradients for kernel parameters and log noise variance.
#[derive(Clone, Debug)]
pub struct EvidenceGrad {
    pub value: f64,
    pub kernel: Vec<f64>,
    pub log_noise_variance: f64,
}

impl ExactGp {
    pub fn new(kernel: KernelSpec, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::Domain {
                what: "noise variance",
                value: noise_variance,
            });
        }
        Ok(Self {
            kernel,
            log_noise_variance: noise_variance.ln(),
        })
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    fn factor(&self, x: &DMatrix<f64>) -> Result<GramMatrix> {
        let mut k = self.kernel.gram(x, x)?;
        let s2 = self.noise_variance();
        for i in 0..k.nrows() {
            k[(i, i)] += s2;
        }
        GramMatrix::factorize(k, &JitterSchedule::with_exact_first())
    }

    fn check(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
        self.kernel.validate(Some(x.ncols()))?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "exact GP targets",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(())
    }

    pub fn log_marginal(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
        self.check(x, y)?;
        let g = self.factor(x)?;
        let yv = DVector::from_column_slice(y);
        let alpha = g.solve_vec(&yv);
        Ok(-0.5 * yv.dot(&alpha) - 0.5 * g.log_det() - 0.5 * y.len() as f64 * LN_2PI)
    }

    pub fn log_marginal_and_grad(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<EvidenceGrad> {
        self.check(x, y)?;
        let g = self.factor(x)?;
        let yv = DVector::from_column_slice(y);
        let alpha = g.solve_vec(&yv);
        let value = -0.5 * yv.dot(&alpha) - 0.5 * g.log_det() - 0.5 * y.len() as f64 * LN_2PI;
        let gmat = (&alpha * alpha.transpose() - g.inverse()) * 0.5;
        let kernel = self.kernel.backward(x, x, &gmat)?.params;
        Ok(EvidenceGrad {
            value,
            kernel,
            log_noise_variance: self.noise_variance() * gmat.trace(),
        })
    }

    /// Latent posterior mean and variance at each row of `x_star`.
    pub fn posterior_predict(
        &self,
        x: &DMatrix<f64>,
        y: &[f64],
        x_star: &DMatrix<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(x, y)?;
        if x_star.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch {
                context: "exact GP test inputs",
                expected: x.ncols(),
                got: x_star.ncols(),
            });
        }
        let g = self.factor(x)?;
        let alpha = g.solve_vec(&DVector::from_column_slice(y));
        let ks = self.kernel.gram(x, x_star)?;
        let mean = ks.transpose() * alpha;
        let v = g
            .l()
            .solve_lower_triangular(&ks)
            .ok_or(Error::DegenerateKernel { max_jitter: 0.0 })?;
        let kss = self.kernel.diag(x_star)?;
        let var = (0..x_star.nrows())
            .map(|i| (kss[i] - v.column(i).norm_squared()).max(0.0))
            .collect();
        Ok((mean.iter().cloned().collect(), var))
    }

    /// Mean negative log predictive density of `y_star` (latent + noise variance).
    pub fn predictive_nll(&self, x: &DMatrix<f64>, y: &[f64], x_star: &DMatrix<f64>, y_star: &[f64]) -> Result<f64> {
        let (mean, var) = self.posterior_predict(x, y, x_star)?;
        let s2 = self.noise_variance();
        let total: f64 = mean
            .iter()
            .zip(&var)
            .zip(y_star)
            .map(|((m, v), t)| 0.5 * (LN_2PI + (v + s2).ln()) + 0.5 * (t - m).powi(2) / (v + s2))
            .sum();
        Ok(total / y_star.len() as f64)
    }

    /// Maximizes the log evidence with Adam; returns the best objective trace.
    pub fn fit(&mut self, x: &DMatrix<f64>, y: &[f64], config: &ExactFitConfig) -> Result<Vec<f64>> {
        let mut blocks = vec![
            ParamBlock::new("kernel", self.kernel.params()),
            ParamBlock::new("log_noise_variance", vec![self.log_noise_variance]),
        ];
        let mut state = AdamState::new(&blocks);
        let mut trace = Vec::new();
        let mut best = (f64::NEG_INFINITY, self.clone());
        let mut since = 0;
        for epoch in 0..config.epochs {
            self.kernel.set_params(&blocks[0].values)?;
            self.log_noise_variance = blocks[1].values[0];
            let eg = self.log_marginal_and_grad(x, y).map_err(|e| Error::Diverged {
                iteration: epoch,
                reason: e.to_string(),
            })?;
            if !eg.value.is_finite() {
                return Err(Error::Diverged {
                    iteration: epoch,
                    reason: "non-finite log evidence".into(),
                });
            }
            trace.push(eg.value);
            if eg.value > best.0 + 1e-9 {
                best = (eg.value, self.clone());
                since = 0;
            } else {
                since += 1;
                if since >= config.patience {
                    break;
                }
            }
            blocks[0].grad = eg.kernel.iter().map(|g| -g).collect();
            blocks[1].grad = vec![-eg.log_noise_variance];
            adam_step(&mut blocks, &mut state, config.lr)?;
        }
        *self = best.1;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::check::{finite_difference, relative_error};
    use crate::elliptical::EllipticalDistribution;
    use crate::mixing::MixingDistribution;
    use crate::quadrature::BaseQuadrature;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy(n: usize, noise: f64, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = (0..n)
            .map(|i| (3.0f64 * x[(i, 0)]).sin() * 0.5 + noise.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    #[test]
    fn single_point_evidence() {
        let gp = ExactGp::new(KernelSpec::linear(1e-300, 0.0), 1.0).unwrap();
        let x = DMatrix::from_element(1, 1, 0.0);
        let v = gp.log_marginal(&x, &[0.0]).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn evidence_matches_dirac_elliptical_density() {
        let (x, y) = toy(12, 0.04, 1);
        let gp = ExactGp::new(KernelSpec::se_ard(&[0.7], 1.3), 0.05).unwrap();
        let mut k = gp.kernel.gram(&x, &x).unwrap();
        for i in 0..12 {
            k[(i, i)] += 0.05;
        }
        let d = EllipticalDistribution::new(DVector::zeros(12), &k, MixingDistribution::gaussian()).unwrap();
        let e = d
            .joint_log_density(&DVector::from_vec(y.clone()), &BaseQuadrature::default())
            .unwrap();
        assert!((gp.log_marginal(&x, &y).unwrap() - e).abs() < 1e-10);
    }

    #[test]
    fn evidence_peaks_near_true_noise() {
        let (x, y) = toy(200, 0.04, 2);
        let ev = |s2: f64| {
            ExactGp::new(KernelSpec::se_ard(&[0.5], 0.25), s2)
                .unwrap()
                .log_marginal(&x, &y)
                .unwrap()
        };
        let sweep = [0.005, 0.01, 0.02, 0.04];
        for w in sweep.windows(2) {
            assert!(ev(w[1]) > ev(w[0]));
        }
        assert!(ev(0.04) > ev(0.2));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = toy(10, 0.04, 3);
        let gp = ExactGp::new(
            KernelSpec::sum(vec![
                KernelSpec::se_ard(&[0.7], 1.3),
                KernelSpec::periodic(0.9, 1.7, 0.4),
            ]),
            0.07,
        )
        .unwrap();
        let eg = gp.log_marginal_and_grad(&x, &y).unwrap();
        let mut theta = gp.kernel.params();
        theta.push(gp.log_noise_variance);
        let fd = finite_difference(
            |t| {
                let mut g = gp.clone();
                g.kernel.set_params(&t[..t.len() - 1]).unwrap();
                g.log_noise_variance = t[t.len() - 1];
                g.log_marginal(&x, &y).unwrap()
            },
            &theta,
            1e-5,
        );
        let mut an = eg.kernel.clone();
        an.push(eg.log_noise_variance);
        assert!(relative_error(&an, &fd) < 1e-6);
    }

    #[test]
    fn prediction_limits() {
        let (x, y) = toy(8, 0.0, 4);
        let gp = ExactGp::new(KernelSpec::se_ard(&[0.6], 1.0), 1e-10).unwrap();
        let (m, v) = gp.posterior_predict(&x, &y, &x).unwrap();
        for i in 0..8 {
            assert!((m[i] - y[i]).abs() < 1e-4);
            assert!(v[i] < 1e-6);
        }
        let far = DMatrix::from_element(1, 1, 50.0);
        let (m, v) = gp.posterior_predict(&x, &y, &far).unwrap();
        assert!(m[0].abs() < 1e-10 && (v[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn prediction_matches_elliptical_conditioning() {
        let (x, y) = toy(6, 0.04, 5);
        let xs = DMatrix::from_column_slice(3, 1, &[-1.1, 0.2, 1.7]);
        let gp = ExactGp::new(KernelSpec::se_ard(&[0.8], 1.1), 0.03).unwrap();
        let (m, v) = gp.posterior_predict(&x, &y, &xs).unwrap();
        let mut all = DMatrix::zeros(9, 1);
        all.view_mut((0, 0), (6, 1)).copy_from(&x);
        all.view_mut((6, 0), (3, 1)).copy_from(&xs);
        let mut k = gp.kernel.gram(&all, &all).unwrap();
        for i in 0..6 {
            k[(i, i)] += 0.03;
        }
        let d = EllipticalDistribution::new(DVector::zeros(9), &k, MixingDistribution::gaussian()).unwrap();
        let c = d.condition(&[0, 1, 2, 3, 4, 5], &DVector::from_vec(y.clone())).unwrap();
        let sigma = c.sigma();
        for i in 0..3 {
            assert!((c.mu[i] - m[i]).abs() < 1e-10);
            assert!((sigma[(i, i)] - v[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_increases_evidence() {
        let (x, y) = toy(60, 0.04, 6);
        let mut gp = ExactGp::new(KernelSpec::se_ard(&[1.0], 1.0), 0.3).unwrap();
        let before = gp.log_marginal(&x, &y).unwrap();
        let trace = gp.fit(&x, &y, &ExactFitConfig::default()).unwrap();
        let after = gp.log_marginal(&x, &y).unwrap();
        assert!(after > before + 10.0);
        assert!(after >= trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn predictive_variance_is_bounded(seed in 0u64..1000, xs in -5.0f64..5.0) {
            let (x, y) = toy(7, 0.04, seed);
            let gp = ExactGp::new(KernelSpec::se_ard(&[0.5], 0.8), 0.02).unwrap();
            let (_, v) = gp.posterior_predict(&x, &y, &DMatrix::from_element(1, 1, xs)).unwrap();
            proptest::prop_assert!(v[0] >= 0.0 && v[0] <= 0.8 + 1e-10);
        }
    }
}
