//! Observation models `p(y | f)` and their expected log-likelihoods.
//!
//! Elliptical noise is a scale mixture `∫ N(y; f, ω) p(ω) dω`; for flow
//! mixing the integral is the base-space trapezoid of [`BaseQuadrature`].

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffopt::{adam_step, sigmoid, AdamState, Mlp, ParamBlock, Real, Tape};
use crate::error::{Error, Result};
use crate::flow::{num_params, SplineFlow, Squash};
use crate::mixing::MixingDistribution;
use crate::quadrature::BaseQuadrature;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bins of the heteroscedastic noise flow: `3K - 1 = 26` outputs.
pub const HETERO_BINS: usize = 9;
pub const NOISE_BINS: usize = 9;
/// Spline bound of the heteroscedastic flow; `softplus(±12)` spans noise
/// variances from about 6e-6 to 12.
pub const HETERO_BOUND: f64 = 12.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodModel {
    Gaussian {
        log_noise_variance: f64,
    },
    EllipticalNoise {
        mixing: MixingDistribution,
    },
    /// Network output is the log noise variance.
    HeteroGaussian {
        net: Mlp,
    },
    /// Network output is the parameter vector of a softplus-squashed flow.
    HeteroElliptical {
        net: Mlp,
        bins: usize,
        bound: f64,
    },
    BernoulliSigmoid,
}

/// Mixture `ℓ(r) = log Σ_k exp(lw_k) N(r; 0, ω_k)` with `dℓ/dr` and
/// `dℓ/dω_k` (accumulated into `d_omega` with weight `scale`).
pub fn mixture_point(r: f64, omegas: &[f64], log_w: &[f64], scale: f64, d_omega: Option<&mut [f64]>) -> (f64, f64) {
    let mut terms = Vec::with_capacity(omegas.len());
    let mut max = f64::NEG_INFINITY;
    for (&w, &lw) in omegas.iter().zip(log_w) {
        let t = lw - 0.5 * (LN_2PI + w.ln()) - 0.5 * r * r / w;
        max = max.max(t);
        terms.push(t);
    }
    let mut sum = 0.0;
    for t in &mut terms {
        *t = (*t - max).exp();
        sum += *t;
    }
    let ell = max + sum.ln();
    let mut d_r = 0.0;
    match d_omega {
        Some(d_omega) => {
            for k in 0..omegas.len() {
                let pi = terms[k] / sum;
                let w = omegas[k];
                d_r -= pi * r / w;
                d_omega[k] += scale * pi * (-0.5 / w + 0.5 * r * r / (w * w));
            }
        }
        None => {
            for k in 0..omegas.len() {
                d_r -= terms[k] / sum * r / omegas[k];
            }
        }
    }
    (ell, d_r)
}

fn gaussian_log_pdf(r: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * r * r / var
}

fn student_t_point(r: f64, nu: f64, tau2: f64) -> (f64, f64) {
    use statrs::function::gamma::ln_gamma;
    let s = nu * tau2;
    let ell = ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (std::f64::consts::PI * s).ln()
        - 0.5 * (nu + 1.0) * (r * r / s).ln_1p();
    (ell, -(nu + 1.0) * r / (s + r * r))
}

fn log_sigmoid(f: f64) -> f64 {
    -(-f).max(0.0) - (-f.abs()).exp().ln_1p()
}

/// Batch expected log-likelihood and its partial derivatives.
#[derive(Clone, Debug, Default)]
pub struct ExpectedLogLik {
    /// `Σ_i (1/S) Σ_j ℓ_ij`.
    pub value: f64,
    pub d_mu: Vec<f64>,
    pub d_sigma: Vec<f64>,
    /// One entry per mixing draw `ξ_j`.
    pub d_xi: Vec<f64>,
    pub d_params: Vec<f64>,
}

/// Noise values `ω_k = T(ζ_k)` of a flow and a tape-based pullback.
fn flow_nodes(flow: &SplineFlow, q: &BaseQuadrature) -> Result<Vec<f64>> {
    let eval = flow.eval()?;
    Ok(q.nodes.iter().map(|&z| eval.forward(z).0).collect())
}

/// `Σ_k g_k ∂ω_k/∂θ` for `ω_k = T(ζ_k; θ)`.
fn flow_nodes_pullback(flow: &SplineFlow, params: &[f64], q: &BaseQuadrature, g_omega: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::with_capacity(64 * q.len());
    let p = tape.vars(params);
    let eval = flow.eval_with(&p)?;
    let seeds: Vec<_> = q
        .nodes
        .iter()
        .zip(g_omega)
        .map(|(&z, &g)| (eval.forward(p[0].lift(z)).0, g))
        .collect();
    tape.check_finite()?;
    Ok(tape.backprop(&seeds).wrt(&p))
}

impl LikelihoodModel {
    pub fn gaussian(noise_variance: f64) -> Self {
        LikelihoodModel::Gaussian {
            log_noise_variance: noise_variance.ln(),
        }
    }

    /// Elliptical noise with an identity softplus flow.
    pub fn elliptical_flow(bins: usize) -> Self {
        LikelihoodModel::EllipticalNoise {
            mixing: MixingDistribution::Flow(SplineFlow::identity(bins, Squash::Softplus)),
        }
    }

    pub fn hetero_gaussian<G: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        init_log_var: f64,
        rng: &mut G,
    ) -> Self {
        let mut net = Mlp::new(input_dim, hidden, 1, crate::diffopt::Activation::Tanh, rng);
        let off = net.output_bias_offset();
        net.params[off] = init_log_var;
        LikelihoodModel::HeteroGaussian { net }
    }

    pub fn hetero_elliptical<G: Rng + ?Sized>(input_dim: usize, hidden: &[usize], bins: usize, rng: &mut G) -> Self {
        let net = Mlp::new(
            input_dim,
            hidden,
            num_params(bins),
            crate::diffopt::Activation::Tanh,
            rng,
        );
        LikelihoodModel::HeteroElliptical {
            net,
            bins,
            bound: HETERO_BOUND,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodModel::Gaussian { .. } => "gaussian",
            LikelihoodModel::EllipticalNoise { .. } => "elliptical",
            LikelihoodModel::HeteroGaussian { .. } => "hetero_gaussian",
            LikelihoodModel::HeteroElliptical { .. } => "hetero_elliptical",
            LikelihoodModel::BernoulliSigmoid => "bernoulli_sigmoid",
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LikelihoodModel::BernoulliSigmoid)
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        match self {
            LikelihoodModel::Gaussian { log_noise_variance } => {
                if !log_noise_variance.is_finite() {
                    return Err(Error::NonFinite("noise variance".into()));
                }
            }
            LikelihoodModel::EllipticalNoise { mixing } => {
                mixing.validate()?;
                if let MixingDistribution::Flow(f) = mixing {
                    if f.squash != Squash::Softplus {
                        return Err(Error::InvalidArgument(
                            "elliptical noise flows use a softplus squash".into(),
                        ));
                    }
                }
            }
            LikelihoodModel::HeteroGaussian { net } => {
                if net.input_dim() != input_dim || net.output_dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        context: "heteroscedastic network input",
                        expected: input_dim,
                        got: net.input_dim(),
                    });
                }
            }
            LikelihoodModel::HeteroElliptical { net, bins, .. } => {
                if net.input_dim() != input_dim {
                    return Err(Error::DimensionMismatch {
                        context: "heteroscedastic network input",
                        expected: input_dim,
                        got: net.input_dim(),
                    });
                }
                if net.output_dim() != num_params(*bins) {
                    return Err(Error::DimensionMismatch {
                        context: "heteroscedastic network output",
                        expected: num_params(*bins),
                        got: net.output_dim(),
                    });
                }
            }
            LikelihoodModel::BernoulliSigmoid => {}
        }
        Ok(())
    }

    /// Trainable parameters, flattened.
    pub fn params(&self) -> Vec<f64> {
        match self {
            LikelihoodModel::Gaussian { log_noise_variance } => vec![*log_noise_variance],
            LikelihoodModel::EllipticalNoise {
                mixing: MixingDistribution::Flow(f),
            } => f.params.clone(),
            LikelihoodModel::HeteroGaussian { net } | LikelihoodModel::HeteroElliptical { net, .. } => {
                net.params.clone()
            }
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.params().len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "likelihood parameters",
                expected,
                got: values.len(),
            });
        }
        match self {
            LikelihoodModel::Gaussian { log_noise_variance } => *log_noise_variance = values[0],
            LikelihoodModel::EllipticalNoise {
                mixing: MixingDistribution::Flow(f),
            } => f.params.copy_from_slice(values),
            LikelihoodModel::HeteroGaussian { net } | LikelihoodModel::HeteroElliptical { net, .. } => {
                net.params.copy_from_slice(values)
            }
            _ => {}
        }
        Ok(())
    }

    /// Flow parameters at `x` for the heteroscedastic elliptical model.
    pub fn hetero_flow_params(&self, x: &[f64]) -> Result<SplineFlow> {
        match self {
            LikelihoodModel::HeteroElliptical { net, bins, bound } => {
                SplineFlow::with_params(*bins, *bound, Squash::Softplus, net.forward(x)?)
            }
            _ => Err(Error::InvalidArgument(
                "flow parameters exist only for the heteroscedastic elliptical likelihood".into(),
            )),
        }
    }

    /// Noise mixing distribution at `x`, or `None` for classification.
    pub fn noise_mixing_at(&self, x: &[f64]) -> Result<Option<MixingDistribution>> {
        Ok(match self {
            LikelihoodModel::Gaussian { log_noise_variance } => Some(MixingDistribution::Dirac {
                s: log_noise_variance.exp(),
            }),
            LikelihoodModel::EllipticalNoise { mixing } => Some(mixing.clone()),
            LikelihoodModel::HeteroGaussian { net } => Some(MixingDistribution::Dirac {
                s: net.forward(x)?[0].exp(),
            }),
            LikelihoodModel::HeteroElliptical { .. } => Some(MixingDistribution::Flow(self.hetero_flow_params(x)?)),
            LikelihoodModel::BernoulliSigmoid => None,
        })
    }

    /// `log p(y | f, x)` with the noise integral evaluated on `q`.
    pub fn log_lik_point(&self, y: f64, f: f64, x: &[f64], q: &BaseQuadrature) -> Result<f64> {
        if !(y.is_finite() && f.is_finite()) {
            return Err(Error::NonFinite("likelihood arguments".into()));
        }
        if self.is_classification() {
            return Ok(y * log_sigmoid(f) + (1.0 - y) * log_sigmoid(-f));
        }
        let r = y - f;
        match self.noise_mixing_at(x)?.expect("regression likelihood") {
            MixingDistribution::Dirac { s } => Ok(gaussian_log_pdf(r, s)),
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => Ok(student_t_point(r, nu, tau2).0),
            mixing @ MixingDistribution::Flow(_) => {
                let omegas = mixing.base_values(q)?;
                Ok(mixture_point(r, &omegas, &q.log_weights(), 0.0, None).0)
            }
        }
    }

    /// [`log_lik_point`](Self::log_lik_point) on the default 128-node rule.
    pub fn marginal_log_lik_point(&self, y: f64, f: f64, x: &[f64]) -> Result<f64> {
        self.log_lik_point(y, f, x, &BaseQuadrature::default())
    }

    /// Expected log-likelihood of a batch under `f_ij = μ_i + √(σ_i ξ_j) ε_ij`.
    ///
    /// Gaussian noise integrates `f` analytically given `ξ_j`; every other
    /// model uses the supplied standard-normal draws `eps` (`B x S`).
    pub fn expected_log_lik(
        &self,
        x: &DMatrix<f64>,
        y: &[f64],
        mu: &[f64],
        sigma: &[f64],
        xi: &[f64],
        eps: &DMatrix<f64>,
        q: &BaseQuadrature,
    ) -> Result<ExpectedLogLik> {
        let b = y.len();
        let s = xi.len();
        let inv_s = 1.0 / s as f64;
        let mut out = ExpectedLogLik {
            value: 0.0,
            d_mu: vec![0.0; b],
            d_sigma: vec![0.0; b],
            d_xi: vec![0.0; s],
            d_params: vec![0.0; self.params().len()],
        };
        let xi_mean = xi.iter().sum::<f64>() * inv_s;
        let row = |i: usize| -> Vec<f64> { x.row(i).iter().cloned().collect() };

        // Closed-form Gaussian expectation with variance `var` at point i.
        let gaussian = |i: usize, var: f64, out: &mut ExpectedLogLik| -> f64 {
            let r = y[i] - mu[i];
            let ell = gaussian_log_pdf(r, var) - 0.5 * sigma[i] * xi_mean / var;
            out.value += ell;
            out.d_mu[i] += r / var;
            out.d_sigma[i] += -0.5 * xi_mean / var;
            for dxj in out.d_xi.iter_mut() {
                *dxj += -0.5 * sigma[i] / var * inv_s;
            }
            // d ell / d log var
            -0.5 + 0.5 * (r * r + sigma[i] * xi_mean) / var
        };

        // Monte Carlo over f with `dl_df(f) -> (ℓ, dℓ/df)`.
        let monte_carlo = |i: usize, out: &mut ExpectedLogLik, dl: &mut dyn FnMut(f64) -> (f64, f64)| {
            let sg = sigma[i].max(0.0);
            for j in 0..s {
                let e = eps[(i, j)];
                let sd = (sg * xi[j]).sqrt();
                let f = mu[i] + sd * e;
                let (ell, df) = dl(f);
                out.value += ell * inv_s;
                out.d_mu[i] += df * inv_s;
                if sd > 0.0 {
                    out.d_sigma[i] += df * e * xi[j] / (2.0 * sd) * inv_s;
                    out.d_xi[j] += df * e * sg / (2.0 * sd) * inv_s;
                }
            }
        };

        match self {
            LikelihoodModel::Gaussian { log_noise_variance } => {
                let var = log_noise_variance.exp();
                for i in 0..b {
                    out.d_params[0] += gaussian(i, var, &mut out);
                }
            }
            LikelihoodModel::EllipticalNoise { mixing } => match mixing {
                MixingDistribution::Dirac { s: var } => {
                    for i in 0..b {
                        gaussian(i, *var, &mut out);
                    }
                }
                MixingDistribution::ScaleInvChiSquare { nu, tau2 } => {
                    for i in 0..b {
                        monte_carlo(i, &mut out, &mut |f| {
                            let (ell, dr) = student_t_point(y[i] - f, *nu, *tau2);
                            (ell, -dr)
                        });
                    }
                }
                MixingDistribution::Flow(flow) => {
                    let omegas = flow_nodes(flow, q)?;
                    let log_w = q.log_weights();
                    let mut g_omega = vec![0.0; q.len()];
                    for i in 0..b {
                        monte_carlo(i, &mut out, &mut |f| {
                            let (ell, dr) = mixture_point(y[i] - f, &omegas, &log_w, inv_s, Some(&mut g_omega));
                            (ell, -dr)
                        });
                    }
                    out.d_params = flow_nodes_pullback(flow, &flow.params, q, &g_omega)?;
                }
            },
            LikelihoodModel::HeteroGaussian { net } => {
                for i in 0..b {
                    let cache = net.forward_cached(&row(i))?;
                    let var = cache.output()[0].exp();
                    let g = gaussian(i, var, &mut out);
                    net.backward(&cache, &[g], &mut out.d_params);
                }
            }
            LikelihoodModel::HeteroElliptical { net, bins, bound } => {
                let log_w = q.log_weights();
                let proto = SplineFlow::identity(*bins, Squash::Softplus);
                let proto = SplineFlow { bound: *bound, ..proto };
                for i in 0..b {
                    let cache = net.forward_cached(&row(i))?;
                    let flow = SplineFlow {
                        params: cache.output().to_vec(),
                        ..proto.clone()
                    };
                    let omegas = flow_nodes(&flow, q)?;
                    let mut g_omega = vec![0.0; q.len()];
                    monte_carlo(i, &mut out, &mut |f| {
                        let (ell, dr) = mixture_point(y[i] - f, &omegas, &log_w, inv_s, Some(&mut g_omega));
                        (ell, -dr)
                    });
                    let g_out = flow_nodes_pullback(&flow, &flow.params, q, &g_omega)?;
                    net.backward(&cache, &g_out, &mut out.d_params);
                }
            }
            LikelihoodModel::BernoulliSigmoid => {
                for i in 0..b {
                    let yi = y[i];
                    monte_carlo(i, &mut out, &mut |f| {
                        (yi * log_sigmoid(f) + (1.0 - yi) * log_sigmoid(-f), yi - sigmoid(f))
                    });
                }
            }
        }
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!("expected log-likelihood ({})", self.name())));
        }
        Ok(out)
    }

    /// `log ∫ N(y; μ, v + ω) p(ω | x) dω` for every latent variance `v`,
    /// combined by log-mean-exp; for classification, the Bernoulli
    /// probability averaged over stratified latent draws.
    pub fn predictive_log_density(
        &self,
        y: f64,
        x: &[f64],
        mu: f64,
        latent_vars: &[f64],
        q: &BaseQuadrature,
    ) -> Result<f64> {
        let n = latent_vars.len() as f64;
        if self.is_classification() {
            let z = stratified_normal(PREDICTIVE_CLASS_SAMPLES);
            let mut p1 = 0.0;
            for &v in latent_vars {
                let sd = v.max(0.0).sqrt();
                p1 += z.iter().map(|&e| sigmoid(mu + sd * e)).sum::<f64>() / z.len() as f64;
            }
            let p1 = (p1 / n).clamp(1e-300, 1.0);
            let p = if y > 0.5 { p1 } else { (1.0 - p1).max(1e-300) };
            return Ok(p.ln());
        }
        let r = y - mu;
        let terms: Vec<f64> = match self.noise_mixing_at(x)?.expect("regression likelihood") {
            MixingDistribution::Dirac { s } => latent_vars
                .iter()
                .map(|&v| gaussian_log_pdf(r, v.max(0.0) + s))
                .collect(),
            mixing => {
                let omegas = mixing.base_values(q)?;
                let log_w = q.log_weights();
                latent_vars
                    .iter()
                    .map(|&v| {
                        let shifted: Vec<f64> = omegas.iter().map(|w| w + v.max(0.0)).collect();
                        mixture_point(r, &shifted, &log_w, 0.0, None).0
                    })
                    .collect()
            }
        };
        Ok(crate::diffopt::log_sum_exp(&terms) - n.ln())
    }
}

pub const PREDICTIVE_CLASS_SAMPLES: usize = 64;

/// `Φ⁻¹((j + ½) / n)` for `j = 0..n`.
pub fn stratified_normal(n: usize) -> Vec<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::standard();
    (0..n)
        .map(|j| normal.inverse_cdf((j as f64 + 0.5) / n as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFitConfig {
    pub bins: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Fraction of residuals held out for early stopping; 0 disables it.
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for NoiseFitConfig {
    fn default() -> Self {
        Self {
            bins: NOISE_BINS,
            lr: 0.01,
            epochs: 3000,
            val_fraction: 0.0,
            patience: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseFit {
    pub model: LikelihoodModel,
    /// Mean log-likelihood of the training residuals at the returned model.
    pub objective: f64,
    pub trace: Vec<f64>,
}

/// Mean log-likelihood of residuals under flow noise, and its gradient.
fn noise_objective(flow: &SplineFlow, residuals: &[f64], q: &BaseQuadrature, log_w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let omegas = flow_nodes(flow, q)?;
    let n = residuals.len() as f64;
    let mut g_omega = vec![0.0; q.len()];
    let mut total = 0.0;
    for &r in residuals {
        total += mixture_point(r, &omegas, log_w, 1.0 / n, Some(&mut g_omega)).0;
    }
    let grad = flow_nodes_pullback(flow, &flow.params, q, &g_omega)?;
    Ok((total / n, grad))
}

/// Maximum-likelihood flow noise for zero-centred residuals.
pub fn fit_noise(residuals: &[f64], config: &NoiseFitConfig) -> Result<NoiseFit> {
    if residuals.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "noise fitting needs at least 20 residuals, got {}",
            residuals.len()
        )));
    }
    crate::error::ensure_finite("residuals", residuals)?;
    let q = BaseQuadrature::default();
    let log_w = q.log_weights();
    let (train, val): (Vec<f64>, Vec<f64>) = if config.val_fraction > 0.0 {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..residuals.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(config.seed));
        let n_val = ((residuals.len() as f64) * config.val_fraction).round() as usize;
        let n_val = n_val.clamp(1, residuals.len() - 1);
        (
            idx[n_val..].iter().map(|&i| residuals[i]).collect(),
            idx[..n_val].iter().map(|&i| residuals[i]).collect(),
        )
    } else {
        (residuals.to_vec(), Vec::new())
    };

    let mut flow = SplineFlow::identity(config.bins, Squash::Softplus);
    let mut blocks = vec![ParamBlock::new("noise_flow", flow.params.clone())];
    let mut state = AdamState::new(&blocks);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best = (f64::NEG_INFINITY, flow.params.clone());
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        flow.params.copy_from_slice(&blocks[0].values);
        let (obj, grad) = noise_objective(&flow, &train, &q, &log_w).map_err(|e| Error::Diverged {
            iteration: epoch,
            reason: e.to_string(),
        })?;
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: epoch,
                reason: format!(
                    "objective {obj}; trace tail {:?}",
                    &trace[trace.len().saturating_sub(5)..]
                ),
            });
        }
        trace.push(obj);
        let score = if val.is_empty() {
            obj
        } else {
            let omegas = flow_nodes(&flow, &q)?;
            val.iter()
                .map(|&r| mixture_point(r, &omegas, &log_w, 0.0, None).0)
                .sum::<f64>()
                / val.len() as f64
        };
        if score > best.0 {
            best = (score, flow.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if !val.is_empty() && since_best >= config.patience {
                break;
            }
        }
        blocks[0].grad = grad.iter().map(|g| -g).collect();
        adam_step(&mut blocks, &mut state, config.lr)?;
    }
    flow.params = if val.is_empty() {
        blocks[0].values.clone()
    } else {
        best.1
    };
    let objective = noise_objective(&flow, &train, &q, &log_w)?.0;
    Ok(NoiseFit {
        model: LikelihoodModel::EllipticalNoise {
            mixing: MixingDistribution::Flow(flow),
        },
        objective,
        trace,
    })
}

/// Fits a flow to a target mixing law by least squares on base-space log
/// quantiles, `Σ_k w_k (log T(ζ_k) - log T*(ζ_k))²`.
pub fn fit_flow_to_quantiles(
    target: &MixingDistribution,
    bins: usize,
    squash: Squash,
    epochs: usize,
    lr: f64,
) -> Result<SplineFlow> {
    let q = BaseQuadrature::default();
    let goal: Vec<f64> = target.base_values(&q)?.iter().map(|v| v.ln()).collect();
    let mut flow = SplineFlow::identity(bins, squash);
    let mut blocks = vec![ParamBlock::new("flow", flow.params.clone())];
    let mut state = AdamState::new(&blocks);
    for _ in 0..epochs {
        let tape = Tape::new();
        let p = tape.vars(&blocks[0].values);
        let eval = flow.eval_with(&p)?;
        let mut loss = p[0].lift(0.0);
        for ((&z, &w), &g) in q.nodes.iter().zip(&q.weights).zip(&goal) {
            let v = eval.forward(p[0].lift(z)).0.ln() - g;
            loss = loss + v.square() * w;
        }
        tape.check_finite()?;
        blocks[0].grad = tape.gradient(loss).wrt(&p);
        adam_step(&mut blocks, &mut state, lr)?;
    }
    flow.params = blocks[0].values.clone();
    Ok(flow)
}
