//! Sparse variational elliptical processes.
//!
//! The variational posterior is `q(u, ξ) = N(u; m, S ξ) q(ξ)` over inducing
//! values at `Z`, with `q(ξ)` a Dirac or a spline flow. Given `ξ`, the
//! latent marginal at `x` is `N(μ_f(x), σ_f(x) ξ)`, so the expected
//! log-likelihood is estimated with reparameterized draws of `ξ` and `f`.
//! The KL splits into a Gaussian part that is analytic given `ξ` and a
//! mixing part estimated by Monte Carlo.
//!
//! Gradients for the Gaussian-process side are assembled by hand from matrix
//! adjoints; everything touching a flow goes through the scalar tape.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffopt::{adam_step, AdamState, ParamBlock, Real, Tape};
use crate::error::{Error, Result};
use crate::flow::{SplineFlow, Squash};
use crate::kernels::{GramMatrix, JitterSchedule, KernelSpec};
use crate::likelihoods::LikelihoodModel;
use crate::mixing::MixingDistribution;
use crate::quadrature::{std_normal_log_pdf, BaseQuadrature};

pub const DEFAULT_MC_SAMPLES: usize = 16;
pub const BERNOULLI_MC_SAMPLES: usize = 1;
pub const KL_MC_SAMPLES: usize = 256;
pub const DEFAULT_XI_SAMPLES: usize = 32;
pub const DEFAULT_MAX_INDUCING: usize = 500;
pub const POSTERIOR_FLOW_BINS: usize = 5;
pub const POSTERIOR_FLOW_MAX: f64 = 3.0;
pub const PRIOR_FLOW_BINS: usize = 5;

/// Canonical order of the parameter blocks.
pub const BLOCK_NAMES: [&str; 7] = [
    "kernel",
    "likelihood",
    "m",
    "s_chol",
    "posterior_mixing",
    "prior_mixing",
    "z",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub z: DMatrix<f64>,
    pub m: DVector<f64>,
    /// Lower triangular with positive diagonal.
    pub s_chol: DMatrix<f64>,
    pub posterior_mixing: MixingDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kernel: KernelSpec,
    pub prior_mixing: MixingDistribution,
    pub likelihood: LikelihoodModel,
    pub variational: VariationalState,
    #[serde(default = "training_jitter")]
    pub jitter: JitterSchedule,
    #[serde(default)]
    pub trained: bool,
}

/// Smallest relative jitter on `K_uu` during training.
pub const TRAINING_JITTER_FLOOR: f64 = 1e-4;

pub fn training_jitter() -> JitterSchedule {
    JitterSchedule::from_floor(TRAINING_JITTER_FLOOR)
}

/// Five-bin flow with a sigmoid output scaled to `(0, 3)`.
pub fn posterior_flow() -> MixingDistribution {
    MixingDistribution::Flow(SplineFlow::identity(
        POSTERIOR_FLOW_BINS,
        Squash::ScaledSigmoid {
            max: POSTERIOR_FLOW_MAX,
        },
    ))
}

pub fn prior_flow() -> MixingDistribution {
    MixingDistribution::Flow(SplineFlow::identity(PRIOR_FLOW_BINS, Squash::Softplus))
}

fn check_mixing_pair(prior: &MixingDistribution, posterior: &MixingDistribution) -> Result<()> {
    match (prior, posterior) {
        (MixingDistribution::Dirac { s: a }, MixingDistribution::Dirac { s: b }) => {
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return Err(Error::StructuralMismatch(format!(
                    "prior and posterior point masses differ ({a} vs {b})"
                )));
            }
            Ok(())
        }
        (MixingDistribution::Dirac { .. }, _) => Err(Error::StructuralMismatch(
            "a point-mass prior mixing needs a point-mass posterior".into(),
        )),
        (_, MixingDistribution::Dirac { .. }) => Err(Error::StructuralMismatch(
            "a continuous prior mixing needs a continuous posterior".into(),
        )),
        (_, MixingDistribution::Flow(_)) => Ok(()),
        (_, MixingDistribution::ScaleInvChiSquare { .. }) => Err(Error::StructuralMismatch(
            "posterior mixing must be a point mass or a flow".into(),
        )),
    }
}

fn mixing_params(m: &MixingDistribution) -> Vec<f64> {
    match m {
        MixingDistribution::Flow(f) => f.params.clone(),
        _ => Vec::new(),
    }
}

fn set_mixing_params(m: &mut MixingDistribution, values: &[f64]) -> Result<()> {
    match m {
        MixingDistribution::Flow(f) if f.params.len() == values.len() => {
            f.params.copy_from_slice(values);
            Ok(())
        }
        _ if values.is_empty() => Ok(()),
        _ => Err(Error::DimensionMismatch {
            context: "mixing parameters",
            expected: mixing_params(m).len(),
            got: values.len(),
        }),
    }
}

/// Packs a lower-triangular factor row by row, diagonal in log space.
pub fn pack_chol(c: &DMatrix<f64>) -> Vec<f64> {
    let n = c.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..i {
            out.push(c[(i, j)]);
        }
        out.push(c[(i, i)].ln());
    }
    out
}

pub fn unpack_chol(values: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if values.len() != n * (n + 1) / 2 {
        return Err(Error::DimensionMismatch {
            context: "packed Cholesky factor",
            expected: n * (n + 1) / 2,
            got: values.len(),
        });
    }
    let mut c = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..i {
            c[(i, j)] = values[k];
            k += 1;
        }
        c[(i, i)] = values[k].exp();
        k += 1;
    }
    Ok(c)
}

impl ModelSpec {
    /// A model with `m = 0` and `S = K_uu`, so `q(u | ξ)` starts at the prior.
    pub fn new(
        kernel: KernelSpec,
        prior_mixing: MixingDistribution,
        likelihood: LikelihoodModel,
        z: DMatrix<f64>,
        posterior_mixing: MixingDistribution,
    ) -> Result<Self> {
        let jitter = training_jitter();
        let gram = GramMatrix::factorize(kernel.gram(&z, &z)?, &jitter)?;
        let m = z.nrows();
        let spec = Self {
            kernel,
            prior_mixing,
            likelihood,
            variational: VariationalState {
                z,
                m: DVector::zeros(m),
                s_chol: gram.l(),
                posterior_mixing,
            },
            jitter,
            trained: false,
        };
        spec.validate(spec.variational.z.ncols())?;
        Ok(spec)
    }

    pub fn num_inducing(&self) -> usize {
        self.variational.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.variational.z.ncols()
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        self.kernel.validate(Some(input_dim))?;
        let v = &self.variational;
        if v.z.ncols() != input_dim {
            return Err(Error::DimensionMismatch {
                context: "inducing input dimension",
                expected: input_dim,
                got: v.z.ncols(),
            });
        }
        let m = v.z.nrows();
        if m == 0 {
            return Err(Error::InvalidArgument("at least one inducing point is required".into()));
        }
        if v.m.len() != m || v.s_chol.nrows() != m || v.s_chol.ncols() != m {
            return Err(Error::DimensionMismatch {
                context: "variational parameters",
                expected: m,
                got: v.m.len(),
            });
        }
        if (0..m).any(|i| !(v.s_chol[(i, i)] > 0.0)) {
            return Err(Error::Domain {
                what: "S_chol diagonal",
                value: (0..m).map(|i| v.s_chol[(i, i)]).fold(f64::INFINITY, f64::min),
            });
        }
        self.prior_mixing.validate()?;
        v.posterior_mixing.validate()?;
        check_mixing_pair(&self.prior_mixing, &v.posterior_mixing)?;
        self.likelihood.validate(input_dim)
    }

    /// Parameter blocks in [`BLOCK_NAMES`] order; `z` is frozen unless asked.
    pub fn blocks(&self, train_z: bool) -> Vec<ParamBlock> {
        let v = &self.variational;
        let z = ParamBlock::new("z", v.z.transpose().as_slice().to_vec());
        vec![
            ParamBlock::new("kernel", self.kernel.params()),
            ParamBlock::new("likelihood", self.likelihood.params()),
            ParamBlock::new("m", v.m.as_slice().to_vec()),
            ParamBlock::new("s_chol", pack_chol(&v.s_chol)),
            ParamBlock::new("posterior_mixing", mixing_params(&v.posterior_mixing)),
            ParamBlock::new("prior_mixing", mixing_params(&self.prior_mixing)),
            if train_z { z } else { z.frozen() },
        ]
    }

    pub fn load_blocks(&mut self, blocks: &[ParamBlock]) -> Result<()> {
        let values = |name: &str| -> Result<&[f64]> {
            blocks
                .iter()
                .find(|b| b.name == name)
                .map(|b| b.values.as_slice())
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter block {name}")))
        };
        let m = self.num_inducing();
        let d = self.input_dim();
        self.kernel.set_params(values("kernel")?)?;
        self.likelihood.set_params(values("likelihood")?)?;
        let mv = values("m")?;
        if mv.len() != m {
            return Err(Error::DimensionMismatch {
                context: "m block",
                expected: m,
                got: mv.len(),
            });
        }
        self.variational.m = DVector::from_column_slice(mv);
        self.variational.s_chol = unpack_chol(values("s_chol")?, m)?;
        set_mixing_params(&mut self.variational.posterior_mixing, values("posterior_mixing")?)?;
        set_mixing_params(&mut self.prior_mixing, values("prior_mixing")?)?;
        let z = values("z")?;
        if z.len() != m * d {
            return Err(Error::DimensionMismatch {
                context: "z block",
                expected: m * d,
                got: z.len(),
            });
        }
        self.variational.z = DMatrix::from_row_slice(m, d, z);
        Ok(())
    }

    pub fn default_mc_samples(&self) -> usize {
        if self.likelihood.is_classification() {
            BERNOULLI_MC_SAMPLES
        } else {
            DEFAULT_MC_SAMPLES
        }
    }
}

/// Base-space draws that make an ELBO evaluation deterministic.
#[derive(Clone, Debug)]
pub struct ElboDraws {
    /// One `ζ_j` per latent sample, pushed through `q(ξ)`.
    pub xi_base: Vec<f64>,
    /// `B x S` standard normals for `f`.
    pub eps: DMatrix<f64>,
    /// Base draws for the mixing KL.
    pub kl_base: Vec<f64>,
}

impl ElboDraws {
    pub fn sample<G: Rng + ?Sized>(batch: usize, n_mc: usize, kl_samples: usize, rng: &mut G) -> Self {
        let xi_base = (0..n_mc).map(|_| rng.sample(StandardNormal)).collect();
        let eps = DMatrix::from_fn(batch, n_mc, |_, _| rng.sample(StandardNormal));
        let kl_base = (0..kl_samples).map(|_| rng.sample(StandardNormal)).collect();
        Self { xi_base, eps, kl_base }
    }
}

#[derive(Clone, Debug)]
pub struct ElboEval {
    pub elbo: f64,
    /// Scaled to the full data set.
    pub expected_log_lik: f64,
    pub kl_gauss: f64,
    pub kl_mixing: f64,
    /// Gradient of the ELBO per block, in [`BLOCK_NAMES`] order.
    pub grads: Vec<Vec<f64>>,
}

struct MixingTerms<R> {
    xi: Vec<R>,
    e_inv: R,
    kl: R,
}

/// `log p(w)` for the scaled inverse chi-square law.
fn sics_log_pdf<R: Real>(nu: f64, tau2: f64, w: R) -> R {
    let h = 0.5 * nu;
    let c = crate::mixing::scale_inv_chi_square_log_pdf(nu, tau2, 1.0) + h * tau2;
    w.ln() * -(h + 1.0) - w.recip() * (h * tau2) + c
}

/// Draws `ξ_j`, the quadrature estimate of `E_q[1/ξ]` and the Monte-Carlo
/// mixing KL, as functions of the flow parameters.
fn mixing_terms<R: Real>(
    prior: &MixingDistribution,
    posterior: &MixingDistribution,
    post_params: &[R],
    prior_params: &[R],
    anchor: R,
    xi_base: &[f64],
    kl_base: &[f64],
    q: &BaseQuadrature,
) -> Result<MixingTerms<R>> {
    check_mixing_pair(prior, posterior)?;
    let flow = match posterior {
        MixingDistribution::Dirac { s } => {
            return Ok(MixingTerms {
                xi: vec![anchor.lift(*s); xi_base.len()],
                e_inv: anchor.lift(1.0 / s),
                kl: anchor.lift(0.0),
            })
        }
        MixingDistribution::Flow(f) => f,
        _ => unreachable!("rejected by check_mixing_pair"),
    };
    let eval = flow.eval_with(post_params)?;
    let xi = xi_base.iter().map(|&z| eval.forward(anchor.lift(z)).0).collect();
    let mut e_inv = anchor.lift(0.0);
    for (&z, &w) in q.nodes.iter().zip(&q.weights) {
        e_inv = e_inv + eval.forward(anchor.lift(z)).0.recip() * w;
    }
    let prior_eval = match prior {
        MixingDistribution::Flow(p) => Some(p.eval_with(prior_params)?),
        _ => None,
    };
    let mut kl = anchor.lift(0.0);
    for &z in kl_base {
        let (x, ld) = eval.forward(anchor.lift(z));
        let log_p = match (&prior_eval, prior) {
            (Some(pe), _) => pe.log_prob(x)?,
            (None, MixingDistribution::ScaleInvChiSquare { nu, tau2 }) => sics_log_pdf(*nu, *tau2, x),
            _ => unreachable!("rejected by check_mixing_pair"),
        };
        kl = kl + (-ld + std_normal_log_pdf(z)) - log_p;
    }
    if !kl_base.is_empty() {
        kl = kl / kl_base.len() as f64;
    }
    Ok(MixingTerms { xi, e_inv, kl })
}

fn lower(mut a: DMatrix<f64>) -> DMatrix<f64> {
    a.fill_upper_triangle(0.0, 1);
    a
}

fn scale_columns(a: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= d[j];
    }
    out
}

/// ELBO and its gradient for a batch under fixed draws.
pub fn elbo_with_draws(
    spec: &ModelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    full_n: usize,
    draws: &ElboDraws,
    q: &BaseQuadrature,
) -> Result<ElboEval> {
    let v = &spec.variational;
    let b = y.len();
    if b == 0 || x.nrows() != b {
        return Err(Error::InvalidArgument(format!(
            "batch needs matching nonempty inputs and targets ({} rows, {} targets)",
            x.nrows(),
            b
        )));
    }
    if draws.eps.nrows() != b || draws.eps.ncols() != draws.xi_base.len() {
        return Err(Error::DimensionMismatch {
            context: "ELBO draws",
            expected: b,
            got: draws.eps.nrows(),
        });
    }
    let m_ind = spec.num_inducing();
    let c = &v.s_chol;

    let tape = Tape::with_capacity(4096);
    let post_vars = tape.vars(&mixing_params(&v.posterior_mixing));
    let prior_vars = tape.vars(&mixing_params(&spec.prior_mixing));
    let anchor = tape.var(1.0);
    let mix = mixing_terms(
        &spec.prior_mixing,
        &v.posterior_mixing,
        &post_vars,
        &prior_vars,
        anchor,
        &draws.xi_base,
        &draws.kl_base,
        q,
    )?;
    let xi: Vec<f64> = mix.xi.iter().map(|r| r.value()).collect();
    let e_inv = mix.e_inv.value();
    let kl_mixing = mix.kl.value();

    let kuu = spec.kernel.gram(&v.z, &v.z)?;
    let gram = GramMatrix::factorize(kuu, &spec.jitter)?;
    let kuf = spec.kernel.gram(&v.z, x)?;
    let kdiag = spec.kernel.diag(x)?;
    let w = gram.solve(&kuf);
    let alpha = gram.solve_vec(&v.m);
    let mu: Vec<f64> = kuf.tr_mul(&alpha).iter().cloned().collect();
    let ctw = c.tr_mul(&w);
    let sigma: Vec<f64> = (0..b)
        .map(|i| kdiag[i] - kuf.column(i).dot(&w.column(i)) + ctw.column(i).norm_squared())
        .collect();

    let lik = spec
        .likelihood
        .expected_log_lik(x, y, &mu, &sigma, &xi, &draws.eps, q)?;
    let scale = full_n as f64 / b as f64;

    let kinv = gram.inverse();
    let s = c * c.transpose();
    let log_det_s: f64 = 2.0 * (0..m_ind).map(|i| c[(i, i)].ln()).sum::<f64>();
    let quad = v.m.dot(&alpha);
    let kl_gauss = 0.5 * (kinv.component_mul(&s).sum() - m_ind as f64 + gram.log_det() - log_det_s + e_inv * quad);

    let expected_log_lik = scale * lik.value;
    let elbo = expected_log_lik - kl_gauss - kl_mixing;
    if !elbo.is_finite() {
        return Err(Error::NonFinite(format!(
            "ELBO: expected log-likelihood {expected_log_lik}, Gaussian KL {kl_gauss}, mixing KL {kl_mixing}"
        )));
    }

    let g_mu: Vec<f64> = lik.d_mu.iter().map(|g| g * scale).collect();
    let g_sigma: Vec<f64> = lik.d_sigma.iter().map(|g| g * scale).collect();
    let g_xi: Vec<f64> = lik.d_xi.iter().map(|g| g * scale).collect();
    let g_lik: Vec<f64> = lik.d_params.iter().map(|g| g * scale).collect();
    let g_mu_v = DVector::from_column_slice(&g_mu);

    // m
    let w_gmu = &w * &g_mu_v;
    let g_m = &w_gmu - &alpha * e_inv;

    // S_chol
    let wd = scale_columns(&w, &g_sigma);
    let wdwt = &wd * w.transpose();
    let mut g_c = lower(&wdwt * c * 2.0) - lower(&kinv * c);
    for i in 0..m_ind {
        g_c[(i, i)] += 1.0 / c[(i, i)];
    }

    // K_uu (jittered), K_uf, diag
    let vmat = gram.solve(&(c * &ctw));
    let mut g_kuu =
        -(&w_gmu * alpha.transpose()) + &wdwt - &wd * vmat.transpose() - scale_columns(&vmat, &g_sigma) * w.transpose();
    g_kuu -= (-(&kinv * &s * &kinv) + &kinv - (&alpha * alpha.transpose()) * e_inv) * 0.5;
    let tr = g_kuu.trace();
    for i in 0..m_ind {
        g_kuu[(i, i)] += gram.level / m_ind as f64 * tr;
    }
    let g_kuf = &alpha * g_mu_v.transpose() + scale_columns(&(&vmat - &w), &g_sigma) * 2.0;

    let kg_uu = spec.kernel.backward(&v.z, &v.z, &g_kuu)?;
    let kg_uf = spec.kernel.backward(&v.z, x, &g_kuf)?;
    let (kg_diag, _) = spec.kernel.diag_backward(x, &DVector::from_column_slice(&g_sigma))?;
    let g_kernel: Vec<f64> = (0..kg_uu.params.len())
        .map(|k| kg_uu.params[k] + kg_uf.params[k] + kg_diag[k])
        .collect();
    let g_z = kg_uu.x1 + kg_uu.x2 + kg_uf.x1;

    // Mixing parameters through the tape.
    let mut seeds: Vec<_> = mix.xi.iter().zip(&g_xi).map(|(v, g)| (*v, *g)).collect();
    seeds.push((mix.e_inv, -0.5 * quad));
    seeds.push((mix.kl, -1.0));
    tape.check_finite()?;
    let tg = tape.backprop(&seeds);

    let mut g_s_packed = pack_chol(&g_c);
    {
        let mut k = 0;
        for i in 0..m_ind {
            k += i;
            g_s_packed[k] = g_c[(i, i)] * c[(i, i)];
            k += 1;
        }
    }
    let grads = vec![
        g_kernel,
        g_lik,
        g_m.as_slice().to_vec(),
        g_s_packed,
        tg.wrt(&post_vars),
        tg.wrt(&prior_vars),
        g_z.transpose().as_slice().to_vec(),
    ];
    if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of block {}", BLOCK_NAMES[k])));
    }
    Ok(ElboEval {
        elbo,
        expected_log_lik,
        kl_gauss,
        kl_mixing,
        grads,
    })
}

/// Stochastic ELBO estimate for a batch.
pub fn elbo<G: Rng + ?Sized>(
    spec: &ModelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    full_n: usize,
    n_mc: usize,
    rng: &mut G,
) -> Result<f64> {
    let draws = ElboDraws::sample(y.len(), n_mc, KL_MC_SAMPLES, rng);
    Ok(elbo_with_draws(spec, x, y, full_n, &draws, &BaseQuadrature::default())?.elbo)
}

/// `E_q[KL(N(m, Sξ) ‖ N(0, K_uu ξ))] + KL(q(ξ) ‖ p(ξ))`.
pub fn kl_term<G: Rng + ?Sized>(spec: &ModelSpec, rng: &mut G) -> Result<f64> {
    let base: Vec<f64> = (0..KL_MC_SAMPLES).map(|_| rng.sample(StandardNormal)).collect();
    let (g, m) = kl_parts(spec, &base, &BaseQuadrature::default())?;
    Ok(g + m)
}

/// Gaussian and mixing parts of the KL for given base draws.
pub fn kl_parts(spec: &ModelSpec, kl_base: &[f64], q: &BaseQuadrature) -> Result<(f64, f64)> {
    let v = &spec.variational;
    let mix = mixing_terms(
        &spec.prior_mixing,
        &v.posterior_mixing,
        &mixing_params(&v.posterior_mixing),
        &mixing_params(&spec.prior_mixing),
        1.0,
        &[],
        kl_base,
        q,
    )?;
    let gram = GramMatrix::factorize(spec.kernel.gram(&v.z, &v.z)?, &spec.jitter)?;
    let c = &v.s_chol;
    let mi = spec.num_inducing();
    let s = c * c.transpose();
    let tr = gram.inverse().component_mul(&s).sum();
    let log_det_s: f64 = 2.0 * (0..mi).map(|i| c[(i, i)].ln()).sum::<f64>();
    let quad = v.m.dot(&gram.solve_vec(&v.m));
    let gauss = 0.5 * (tr - mi as f64 + gram.log_det() - log_det_s + mix.e_inv * quad);
    Ok((gauss, mix.kl))
}

/// Per-point `(μ_f, σ_f)` plus the number of variances clamped at zero.
pub fn q_f_marginals(spec: &ModelSpec, x_star: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let v = &spec.variational;
    if x_star.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "prediction inputs",
            expected: spec.input_dim(),
            got: x_star.ncols(),
        });
    }
    let gram = GramMatrix::factorize(spec.kernel.gram(&v.z, &v.z)?, &spec.jitter)?;
    let kuf = spec.kernel.gram(&v.z, x_star)?;
    let kdiag = spec.kernel.diag(x_star)?;
    let w = gram.solve(&kuf);
    let alpha = gram.solve_vec(&v.m);
    let mu = kuf.tr_mul(&alpha).iter().cloned().collect();
    let ctw = v.s_chol.tr_mul(&w);
    let mut clamped = 0;
    let sigma = (0..x_star.nrows())
        .map(|i| {
            let s = kdiag[i] - kuf.column(i).dot(&w.column(i)) + ctw.column(i).norm_squared();
            if s < -1e-8 {
                clamped += 1;
            }
            s.max(0.0)
        })
        .collect();
    Ok((mu, sigma, clamped))
}

pub fn q_f_marginal(spec: &ModelSpec, x_star: &[f64]) -> Result<(f64, f64)> {
    let (m, s, _) = q_f_marginals(spec, &DMatrix::from_row_slice(1, x_star.len(), x_star))?;
    Ok((m[0], s[0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub x: DMatrix<f64>,
    pub mu_f: Vec<f64>,
    pub sigma_f: Vec<f64>,
    /// Stratified samples of the posterior mixing.
    pub xi: Vec<f64>,
    pub likelihood: LikelihoodModel,
    /// Variances below `-1e-8` that were clamped to zero.
    pub n_clamped: usize,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mu_f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_f.is_empty()
    }

    /// `E_q[ξ] σ_f`.
    pub fn latent_variance(&self, i: usize) -> f64 {
        self.sigma_f[i] * self.xi.iter().sum::<f64>() / self.xi.len() as f64
    }

    fn latent_vars(&self, i: usize) -> Vec<f64> {
        self.xi.iter().map(|x| x * self.sigma_f[i]).collect()
    }

    /// Half-width of the central latent credible interval at `target`.
    pub fn latent_halfwidth(&self, i: usize, target: f64) -> Result<f64> {
        if self.sigma_f[i] <= 0.0 {
            return Ok(0.0);
        }
        crate::elliptical::credible_halfwidth(&self.latent_vars(i), target)
    }

    pub fn latent_interval(&self, i: usize, target: f64) -> Result<(f64, f64)> {
        let h = self.latent_halfwidth(i, target)?;
        Ok((self.mu_f[i] - h, self.mu_f[i] + h))
    }

    pub fn log_density(&self, i: usize, y: f64, q: &BaseQuadrature) -> Result<f64> {
        let xr: Vec<f64> = self.x.row(i).iter().cloned().collect();
        self.likelihood
            .predictive_log_density(y, &xr, self.mu_f[i], &self.latent_vars(i), q)
    }

    /// `p(y = 1 | x_i)` for classification.
    pub fn class_probability(&self, i: usize, q: &BaseQuadrature) -> Result<f64> {
        Ok(self.log_density(i, 1.0, q)?.exp())
    }

    pub fn nll(&self, y: &[f64], q: &BaseQuadrature) -> Result<f64> {
        if y.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "predictive targets",
                expected: self.len(),
                got: y.len(),
            });
        }
        let mut total = 0.0;
        for (i, &t) in y.iter().enumerate() {
            total -= self.log_density(i, t, q)?;
        }
        Ok(total / y.len() as f64)
    }
}

fn predict_unchecked(spec: &ModelSpec, x_star: &DMatrix<f64>, n_xi: usize) -> Result<PredictiveDistribution> {
    let (mu_f, sigma_f, n_clamped) = q_f_marginals(spec, x_star)?;
    Ok(PredictiveDistribution {
        x: x_star.clone(),
        mu_f,
        sigma_f,
        xi: spec.variational.posterior_mixing.stratified_samples(n_xi.max(1))?,
        likelihood: spec.likelihood.clone(),
        n_clamped,
    })
}

pub fn predict(spec: &ModelSpec, x_star: &DMatrix<f64>, n_xi: usize) -> Result<PredictiveDistribution> {
    if !spec.trained {
        return Err(Error::InvalidArgument(
            "model has not been trained; set `trained` to predict from hand-built parameters".into(),
        ));
    }
    predict_unchecked(spec, x_star, n_xi)
}

/// Mean negative log predictive density.
pub fn predictive_nll(spec: &ModelSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    predict(spec, x, DEFAULT_XI_SAMPLES)?.nll(y, &BaseQuadrature::default())
}

/// Optimal `(m, S_chol)` for a Gaussian likelihood at fixed hyperparameters.
pub fn optimal_gaussian_q(spec: &ModelSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let LikelihoodModel::Gaussian { log_noise_variance } = &spec.likelihood else {
        return Err(Error::InvalidArgument("optimal q needs a Gaussian likelihood".into()));
    };
    let MixingDistribution::Dirac { s } = spec.variational.posterior_mixing else {
        return Err(Error::InvalidArgument(
            "optimal q needs a point-mass posterior mixing".into(),
        ));
    };
    let v = &spec.variational;
    let prec = s * log_noise_variance.exp();
    let gram = GramMatrix::factorize(spec.kernel.gram(&v.z, &v.z)?, &spec.jitter)?;
    let mut kuu = gram.matrix.clone();
    for i in 0..kuu.nrows() {
        kuu[(i, i)] += gram.jitter;
    }
    let kuf = spec.kernel.gram(&v.z, x)?;
    let a = &kuu + &kuf * kuf.transpose() / prec;
    let a = GramMatrix::factorize(a, &JitterSchedule::with_exact_first())?;
    let m = &kuu * a.solve_vec(&(&kuf * DVector::from_column_slice(y))) / prec;
    // S = B Bᵀ with B = K_uu L_A⁻ᵀ; a QR of Bᵀ gives S = RᵀR.
    let la = a.l();
    let bt = la
        .solve_lower_triangular(&kuu)
        .ok_or(Error::DegenerateKernel { max_jitter: 0.0 })?;
    let r = bt.qr().r();
    let mut c = r.transpose();
    for j in 0..c.ncols() {
        if c[(j, j)] < 0.0 {
            let mut col = c.column_mut(j);
            col *= -1.0;
        }
    }
    Ok((m, c))
}

/// k-means++ seeding on the rows of `x`; all rows when `m ≥ N`.
pub fn init_inducing<G: Rng + ?Sized>(x: &DMatrix<f64>, m: usize, rng: &mut G) -> DMatrix<f64> {
    let n = x.nrows();
    if m >= n {
        return x.clone();
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| (x.row(i) - x.row(chosen[0])).norm_squared()).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min((x.row(i) - x.row(next)).norm_squared());
        }
    }
    x.select_rows(chosen.iter())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Latent samples per point; defaults by likelihood.
    pub n_mc: Option<usize>,
    pub batch_size: Option<usize>,
    pub train_z: bool,
    /// Names of blocks held fixed.
    pub frozen: Vec<String>,
    pub early_stopping: bool,
    pub patience: usize,
    pub n_xi: usize,
    pub quad_nodes: usize,
    pub kl_samples: usize,
    /// Learning-rate multiplier reached at the last epoch (geometric decay).
    pub lr_final_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 1000,
            n_mc: None,
            batch_size: None,
            train_z: false,
            frozen: Vec::new(),
            early_stopping: false,
            patience: 200,
            n_xi: DEFAULT_XI_SAMPLES,
            quad_nodes: 128,
            kl_samples: KL_MC_SAMPLES,
            lr_final_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub elbo: f64,
    pub val_nll: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub spec: ModelSpec,
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
}

/// Adam ascent on the ELBO.
pub fn train(
    spec: &ModelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    val: Option<(&DMatrix<f64>, &[f64])>,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let n = y.len();
    if n == 0 || x.nrows() != n {
        return Err(Error::InvalidArgument(
            "training data must be nonempty with matching targets".into(),
        ));
    }
    spec.validate(x.ncols())?;
    if spec.num_inducing() > n {
        return Err(Error::InvalidArgument(format!(
            "{} inducing points exceed {} training points",
            spec.num_inducing(),
            n
        )));
    }
    let val = val.filter(|(_, vy)| !vy.is_empty());
    if config.early_stopping && val.is_none() {
        return Err(Error::InvalidArgument(
            "early stopping needs a nonempty validation split".into(),
        ));
    }
    let q = BaseQuadrature::new(config.quad_nodes, 6.0);
    let n_mc = config.n_mc.unwrap_or_else(|| spec.default_mc_samples());
    let batch = config.batch_size.unwrap_or(n).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut current = spec.clone();
    let mut blocks = current.blocks(config.train_z);
    for b in &mut blocks {
        if config.frozen.iter().any(|f| f == &b.name) {
            b.trainable = false;
        }
    }
    let mut state = AdamState::new(&blocks);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelSpec)> = None;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        current.load_blocks(&blocks)?;
        let lr = config.lr * config.lr_final_ratio.powf(epoch as f64 / config.epochs.max(1) as f64);
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut elbo_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            if steps > 0 {
                current.load_blocks(&blocks)?;
            }
            let (xb, yb) = if batch < n {
                (x.select_rows(chunk.iter()), chunk.iter().map(|&i| y[i]).collect())
            } else {
                (x.clone(), y.to_vec())
            };
            let draws = ElboDraws::sample(yb.len(), n_mc, config.kl_samples, &mut rng);
            let eval = elbo_with_draws(&current, &xb, &yb, n, &draws, &q).map_err(|e| Error::Diverged {
                iteration: epoch,
                reason: e.to_string(),
            })?;
            elbo_sum += eval.elbo;
            steps += 1;
            for (b, g) in blocks.iter_mut().zip(eval.grads) {
                b.grad = g.iter().map(|v| -v).collect();
            }
            adam_step(&mut blocks, &mut state, lr)?;
        }
        let val_nll = match val {
            Some((vx, vy)) => {
                let nll = predict_unchecked(&current, vx, config.n_xi)?.nll(vy, &q)?;
                if !nll.is_finite() {
                    return Err(Error::Diverged {
                        iteration: epoch,
                        reason: format!("validation NLL {nll}"),
                    });
                }
                Some(nll)
            }
            None => None,
        };
        trace.push(TraceRow {
            epoch,
            elbo: elbo_sum / steps as f64,
            val_nll,
        });
        if config.early_stopping {
            let nll = val_nll.expect("checked above");
            if best.as_ref().is_none_or(|(b, _, _)| nll < *b) {
                best = Some((nll, epoch, current.clone()));
            } else if epoch - best.as_ref().map(|b| b.1).unwrap_or(0) >= config.patience {
                break;
            }
        }
    }
    let (mut out, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => {
            current.load_blocks(&blocks)?;
            (current, trace.len().saturating_sub(1))
        }
    };
    out.trained = true;
    Ok(TrainResult {
        spec: out,
        trace,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::check::{finite_difference, relative_error};
    use crate::exact_gp::ExactGp;
    use crate::likelihoods::HETERO_BINS;

    fn data(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = (0..n)
            .map(|i| (3.0f64 * x[(i, 0)]).sin() * 0.5 + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    fn randomize(spec: &mut ModelSpec, seed: u64, train_z: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = spec.blocks(train_z);
        for b in &mut blocks {
            for v in &mut b.values {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        spec.load_blocks(&blocks).unwrap();
    }

    fn gaussian_spec(x: &DMatrix<f64>, m: usize) -> ModelSpec {
        ModelSpec::new(
            KernelSpec::se_ard(&vec![0.8; x.ncols()], 1.0),
            MixingDistribution::gaussian(),
            LikelihoodModel::gaussian(0.05),
            x.rows(0, m).into_owned(),
            MixingDistribution::gaussian(),
        )
        .unwrap()
    }

    #[test]
    fn chol_packing_round_trips() {
        let c = DMatrix::from_row_slice(3, 3, &[1.5, 0.0, 0.0, -0.2, 0.7, 0.0, 0.3, 0.1, 2.0]);
        let p = pack_chol(&c);
        assert_eq!(p.len(), 6);
        assert!((unpack_chol(&p, 3).unwrap() - c).norm() < 1e-15);
    }

    #[test]
    fn prior_is_recovered_when_q_equals_p() {
        let (x, _) = data(12, 2, 1);
        let spec = gaussian_spec(&x, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let xs = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (mu, s) = q_f_marginal(&spec, &xs).unwrap();
            assert!(mu.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn mean_at_inducing_input_is_m() {
        let (x, _) = data(12, 2, 3);
        let mut spec = gaussian_spec(&x, 5);
        spec.jitter = JitterSchedule::default();
        randomize(&mut spec, 4, false);
        for j in 0..5 {
            let z: Vec<f64> = spec.variational.z.row(j).iter().cloned().collect();
            let (mu, _) = q_f_marginal(&spec, &z).unwrap();
            assert!((mu - spec.variational.m[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn marginals_match_dense_inverse() {
        let (x, _) = data(12, 2, 5);
        let mut spec = gaussian_spec(&x, 5);
        randomize(&mut spec, 6, false);
        let v = &spec.variational;
        let mut kuu = spec.kernel.gram(&v.z, &v.z).unwrap();
        let g = GramMatrix::factorize(kuu.clone(), &spec.jitter).unwrap();
        for i in 0..5 {
            kuu[(i, i)] += g.jitter;
        }
        let kinv = kuu.try_inverse().unwrap();
        let s = &v.s_chol * v.s_chol.transpose();
        let xs = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 1.4, 2.2, -0.3]);
        let (mu, sig, _) = q_f_marginals(&spec, &xs).unwrap();
        for i in 0..3 {
            let k = spec.kernel.gram(&v.z, &xs.rows(i, 1).into_owned()).unwrap();
            let mu_d = (k.transpose() * &kinv * &v.m)[0];
            let kss = spec.kernel.diag(&xs.rows(i, 1).into_owned()).unwrap()[0];
            let s_d = kss - (k.transpose() * (&kinv - &kinv * &s * &kinv) * &k)[(0, 0)];
            assert!((mu[i] - mu_d).abs() < 1e-10);
            assert!((sig[i] - s_d).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_vanishes_at_prior_and_matches_gaussian_closed_form() {
        let (x, _) = data(12, 2, 7);
        let mut spec = gaussian_spec(&x, 6);
        let (g, m) = kl_parts(&spec, &[], &BaseQuadrature::default()).unwrap();
        assert!(g.abs() < 1e-9 && m == 0.0);

        randomize(&mut spec, 8, false);
        let v = &spec.variational;
        let mut k = spec.kernel.gram(&v.z, &v.z).unwrap();
        let jit = GramMatrix::factorize(k.clone(), &spec.jitter).unwrap().jitter;
        for i in 0..6 {
            k[(i, i)] += jit;
        }
        let s = &v.s_chol * v.s_chol.transpose();
        let kinv = k.clone().try_inverse().unwrap();
        let oracle = 0.5
            * ((&kinv * &s).trace() - 6.0 + k.determinant().ln() - s.determinant().ln()
                + (v.m.transpose() * &kinv * &v.m)[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((kl_term(&spec, &mut rng).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let (x, _) = data(8, 1, 9);
        let r = ModelSpec::new(
            KernelSpec::se_ard(&[1.0], 1.0),
            MixingDistribution::gaussian(),
            LikelihoodModel::gaussian(0.1),
            x.clone(),
            posterior_flow(),
        );
        assert!(matches!(r, Err(Error::StructuralMismatch(_))));
        let r = ModelSpec::new(
            KernelSpec::se_ard(&[1.0], 1.0),
            prior_flow(),
            LikelihoodModel::gaussian(0.1),
            x,
            MixingDistribution::gaussian(),
        );
        assert!(matches!(r, Err(Error::StructuralMismatch(_))));
    }

    fn flow_with(bins: usize, squash: Squash, seed: u64) -> MixingDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SplineFlow::identity(bins, squash);
        for p in &mut f.params {
            *p = rng.random_range(-1.0..1.0);
        }
        MixingDistribution::Flow(f)
    }

    fn ep_spec(x: &DMatrix<f64>, m: usize, seed: u64) -> ModelSpec {
        let post = flow_with(
            POSTERIOR_FLOW_BINS,
            Squash::ScaledSigmoid {
                max: POSTERIOR_FLOW_MAX,
            },
            seed,
        );
        ModelSpec::new(
            KernelSpec::se_ard(&vec![0.8; x.ncols()], 1.0),
            flow_with(PRIOR_FLOW_BINS, Squash::Softplus, seed + 1),
            LikelihoodModel::elliptical_flow(9),
            x.rows(0, m).into_owned(),
            post,
        )
        .unwrap()
    }

    #[test]
    fn kl_of_identical_flows_is_zero() {
        let (x, _) = data(8, 1, 10);
        let mut spec = ep_spec(&x, 4, 11);
        spec.prior_mixing = spec.variational.posterior_mixing.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let base: Vec<f64> = (0..KL_MC_SAMPLES).map(|_| rng.sample(StandardNormal)).collect();
            let (g, m) = kl_parts(&spec, &base, &BaseQuadrature::default()).unwrap();
            assert!(m.abs() < 1e-9, "{m}");
            assert!(g.abs() < 1e-9);
        }
    }

    #[test]
    fn kl_between_flows_is_nonnegative_within_mc_error() {
        let (x, _) = data(8, 1, 13);
        let spec = ep_spec(&x, 4, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let est: Vec<f64> = (0..20)
            .map(|_| {
                let base: Vec<f64> = (0..KL_MC_SAMPLES).map(|_| rng.sample(StandardNormal)).collect();
                kl_parts(&spec, &base, &BaseQuadrature::default()).unwrap().1
            })
            .collect();
        let mean = est.iter().sum::<f64>() / 20.0;
        let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!(mean >= -3.0 * sd / 20f64.sqrt());
    }

    #[test]
    fn elbo_at_optimal_q_equals_exact_evidence() {
        let (x, y) = data(40, 1, 16);
        let mut spec = gaussian_spec(&x, 40);
        spec.jitter = JitterSchedule::default();
        let (m, c) = optimal_gaussian_q(&spec, &x, &y).unwrap();
        spec.variational.m = m;
        spec.variational.s_chol = c;
        let draws = ElboDraws::sample(40, 4, 0, &mut ChaCha8Rng::seed_from_u64(0));
        let e = elbo_with_draws(&spec, &x, &y, 40, &draws, &BaseQuadrature::default()).unwrap();
        let gp = ExactGp::new(spec.kernel.clone(), 0.05).unwrap();
        let exact = gp.log_marginal(&x, &y).unwrap();
        assert!((e.elbo - exact).abs() < 1e-6 * 40.0, "{} vs {exact}", e.elbo);
    }

    #[test]
    fn elbo_bounds_the_evidence() {
        // Flow prior over ξ and Gaussian noise: p(y) = E_p(ξ)[N(y; 0, ξK + σ²I)].
        let (x, y) = data(10, 1, 17);
        let mut spec = ModelSpec::new(
            KernelSpec::se_ard(&[0.8], 1.0),
            flow_with(PRIOR_FLOW_BINS, Squash::Softplus, 18),
            LikelihoodModel::gaussian(0.05),
            x.clone(),
            flow_with(POSTERIOR_FLOW_BINS, Squash::ScaledSigmoid { max: 3.0 }, 19),
        )
        .unwrap();
        randomize(&mut spec, 20, false);
        spec.likelihood = LikelihoodModel::gaussian(0.05);
        let k = spec.kernel.gram(&x, &x).unwrap();
        let prior = spec.prior_mixing.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xis = prior.sample_mix(20_000, &mut rng).unwrap();
        let vals: Vec<f64> = xis
            .iter()
            .map(|&xi| {
                let mut c = &k * xi;
                for i in 0..10 {
                    c[(i, i)] += 0.05;
                }
                let ch = c.clone().cholesky().unwrap();
                let yv = DVector::from_column_slice(&y);
                let a = ch.solve(&yv);
                (-0.5 * yv.dot(&a) - 0.5 * ch.ln_determinant() - 5.0 * (2.0 * std::f64::consts::PI).ln()).exp()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        let se = sd / (vals.len() as f64).sqrt();
        let log_ev_upper = (mean + 3.0 * se).ln();
        let e: Vec<f64> = (0..20)
            .map(|_| elbo(&spec, &x, &y, 10, 64, &mut rng).unwrap())
            .collect();
        let e_mean = e.iter().sum::<f64>() / 20.0;
        assert!(e_mean <= log_ev_upper, "{e_mean} vs {log_ev_upper}");
    }

    fn check_gradients(spec: &ModelSpec, x: &DMatrix<f64>, y: &[f64]) {
        let q = BaseQuadrature::default();
        let draws = ElboDraws::sample(y.len(), 3, 16, &mut ChaCha8Rng::seed_from_u64(99));
        let e = elbo_with_draws(spec, x, y, 25, &draws, &q).unwrap();
        let blocks = spec.blocks(true);
        for (k, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                continue;
            }
            let fd = finite_difference(
                |v| {
                    let mut s = spec.clone();
                    let mut bl = blocks.clone();
                    bl[k].values = v.to_vec();
                    s.load_blocks(&bl).unwrap();
                    elbo_with_draws(&s, x, y, 25, &draws, &q).unwrap().elbo
                },
                &block.values,
                1e-5,
            );
            let err = relative_error(&e.grads[k], &fd);
            assert!(err < 1e-4, "{} / {}: {err}", spec.likelihood.name(), block.name);
        }
    }

    #[test]
    fn gradients_gaussian() {
        let (x, y) = data(10, 2, 22);
        let mut spec = gaussian_spec(&x, 4);
        randomize(&mut spec, 23, true);
        check_gradients(&spec, &x, &y);
    }

    #[test]
    fn gradients_elliptical_posterior_and_noise() {
        let (x, y) = data(10, 2, 24);
        let mut spec = ep_spec(&x, 4, 25);
        randomize(&mut spec, 26, true);
        check_gradients(&spec, &x, &y);
    }

    #[test]
    fn gradients_heteroscedastic() {
        let (x, y) = data(10, 2, 27);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for lik in [
            LikelihoodModel::hetero_gaussian(2, &[5, 4], -1.0, &mut rng),
            LikelihoodModel::hetero_elliptical(2, &[5, 4], HETERO_BINS, &mut rng),
        ] {
            let mut spec = gaussian_spec(&x, 4);
            spec.likelihood = lik;
            randomize(&mut spec, 29, true);
            check_gradients(&spec, &x, &y);
        }
    }

    #[test]
    fn gradients_classification_and_student_prior() {
        let (x, y) = data(10, 2, 30);
        let labels: Vec<f64> = y.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut spec = ep_spec(&x, 4, 31);
        spec.likelihood = LikelihoodModel::BernoulliSigmoid;
        randomize(&mut spec, 32, true);
        check_gradients(&spec, &x, &labels);
        spec.prior_mixing = MixingDistribution::ScaleInvChiSquare { nu: 5.0, tau2: 0.8 };
        check_gradients(&spec, &x, &labels);
    }

    #[test]
    fn dirac_posterior_interval_is_gaussian() {
        let (x, _) = data(10, 1, 33);
        let mut spec = gaussian_spec(&x, 5);
        spec.trained = true;
        let xs = DMatrix::from_column_slice(2, 1, &[0.3, 5.0]);
        let p = predict(&spec, &xs, 16).unwrap();
        for i in 0..2 {
            let h = p.latent_halfwidth(i, 0.95).unwrap();
            assert!((h - 1.959964 * p.sigma_f[i].sqrt()).abs() < 1e-5);
        }
        let mut heavy = p.clone();
        heavy.xi = MixingDistribution::ScaleInvChiSquare { nu: 4.0, tau2: 1.0 }
            .stratified_samples(64)
            .unwrap();
        assert!(heavy.latent_halfwidth(1, 0.95).unwrap() > p.latent_halfwidth(1, 0.95).unwrap());
        spec.trained = false;
        assert!(predict(&spec, &xs, 16).is_err());
    }

    #[test]
    fn predictive_density_matches_monte_carlo() {
        let (x, _) = data(10, 1, 34);
        let mut spec = ep_spec(&x, 5, 35);
        randomize(&mut spec, 36, false);
        spec.trained = true;
        let p = predict(&spec, &DMatrix::from_element(1, 1, 0.4), 8).unwrap();
        let y = p.mu_f[0] + 0.3;
        let dens = p.log_density(0, y, &BaseQuadrature::default()).unwrap().exp();
        let LikelihoodModel::EllipticalNoise { mixing } = &spec.likelihood else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let n = 1_000_000;
        let omegas = mixing.sample_mix(n, &mut rng).unwrap();
        let vals: Vec<f64> = (0..n)
            .map(|k| {
                let xi = p.xi[rng.random_range(0..p.xi.len())];
                let f = p.mu_f[0] + (p.sigma_f[0] * xi).sqrt() * rng.sample::<f64, _>(StandardNormal);
                let v = omegas[k];
                (-(y - f).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((dens - mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{dens} vs {mean}");
    }

    #[test]
    fn gaussian_predictive_nll_is_closed_form_and_permutation_invariant() {
        let (x, y) = data(20, 1, 38);
        let mut spec = gaussian_spec(&x, 8);
        randomize(&mut spec, 39, false);
        spec.trained = true;
        let nll = predictive_nll(&spec, &x, &y).unwrap();
        let (mu, s, _) = q_f_marginals(&spec, &x).unwrap();
        let nv = spec.likelihood.params()[0].exp();
        let oracle = (0..20)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * (s[i] + nv)).ln() + 0.5 * (y[i] - mu[i]).powi(2) / (s[i] + nv))
            .sum::<f64>()
            / 20.0;
        assert!((nll - oracle).abs() < 1e-6);
        let perm: Vec<usize> = (0..20).rev().collect();
        let xp = x.select_rows(perm.iter());
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        assert!((predictive_nll(&spec, &xp, &yp).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_improves_elbo() {
        let (x, y) = data(30, 1, 40);
        let spec = ep_spec(&x, 8, 41);
        let cfg = TrainConfig {
            epochs: 300,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&spec, &x, &y, Some((&x, &y)), &cfg).unwrap();
        let b = train(&spec, &x, &y, Some((&x, &y)), &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        let head = a.trace[..100].iter().map(|r| r.elbo).sum::<f64>();
        let tail = a.trace[200..].iter().map(|r| r.elbo).sum::<f64>();
        assert!(tail > head);
        assert!(a.spec.trained);
    }

    #[test]
    fn early_stopping_needs_validation() {
        let (x, y) = data(10, 1, 42);
        let spec = gaussian_spec(&x, 4);
        let cfg = TrainConfig {
            early_stopping: true,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &x, &y, None, &cfg).is_err());
        let empty = DMatrix::zeros(0, 1);
        assert!(train(&spec, &x, &y, Some((&empty, &[])), &cfg).is_err());
    }

    #[test]
    fn minibatches_and_inducing_init() {
        let (x, y) = data(40, 2, 43);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let z = init_inducing(&x, 10, &mut rng);
        assert_eq!(z.shape(), (10, 2));
        for i in 0..10 {
            assert!((0..40).any(|r| (x.row(r) - z.row(i)).norm() == 0.0));
        }
        assert_eq!(init_inducing(&x, 50, &mut rng), x);
        let spec = ModelSpec::new(
            KernelSpec::se_ard(&[1.0, 1.0], 1.0),
            MixingDistribution::gaussian(),
            LikelihoodModel::gaussian(0.1),
            z,
            MixingDistribution::gaussian(),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: Some(16),
            train_z: true,
            ..TrainConfig::default()
        };
        let r = train(&spec, &x, &y, None, &cfg).unwrap();
        assert_eq!(r.trace.len(), 20);
        assert!(r.spec.variational.z != spec.variational.z);
    }
}
