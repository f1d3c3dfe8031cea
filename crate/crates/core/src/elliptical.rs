//! Consistent elliptical distributions as Gaussian scale mixtures:
//! densities, hierarchical sampling, conditioning and credible intervals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use crate::diffopt::log_sum_exp;
use crate::error::{Error, Result};
use crate::kernels::{gram_with_jitter, robust_cholesky, JitterSchedule, KernelSpec};
use crate::mixing::{MixingDistribution, MixingLogDensity};
use crate::quadrature::BaseQuadrature;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const CONDITIONAL_GRID_POINTS: usize = 512;
pub const CONDITIONAL_GRID_SPAN: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct EllipticalDistribution {
    pub mu: DVector<f64>,
    pub scale_chol: DMatrix<f64>,
    pub mixing: MixingDistribution,
}

/// `log ∫ N(r; 0, ω I_n |Σ|) p(ω) dω` from the squared Mahalanobis distance,
/// given mixing values `ω_k` and their log weights.
pub fn log_scale_mixture(u: f64, n: usize, log_det: f64, omegas: &[f64], log_weights: &[f64]) -> f64 {
    let nh = 0.5 * n as f64;
    let terms: Vec<f64> = omegas
        .iter()
        .zip(log_weights)
        .map(|(&w, &lw)| lw - nh * (LN_2PI + w.ln()) - 0.5 * u / w)
        .collect();
    log_sum_exp(&terms) - 0.5 * log_det
}

/// Multivariate Student-t log density with scale matrix `τ² Σ`.
pub fn student_t_log_density(u: f64, n: usize, log_det: f64, nu: f64, tau2: f64) -> f64 {
    let nf = n as f64;
    ln_gamma(0.5 * (nu + nf))
        - ln_gamma(0.5 * nu)
        - 0.5 * nf * (nu * std::f64::consts::PI).ln()
        - 0.5 * (log_det + nf * tau2.ln())
        - 0.5 * (nu + nf) * (u / (nu * tau2)).ln_1p()
}

/// Log density of a scale mixture at squared distance `u` in `n` dimensions.
pub fn mixture_log_density(
    mixing: &MixingDistribution,
    u: f64,
    n: usize,
    log_det: f64,
    q: &BaseQuadrature,
) -> Result<f64> {
    match mixing {
        MixingDistribution::Dirac { s } => Ok(-0.5 * n as f64 * (LN_2PI + s.ln()) - 0.5 * log_det - 0.5 * u / s),
        MixingDistribution::ScaleInvChiSquare { nu, tau2 } => Ok(student_t_log_density(u, n, log_det, *nu, *tau2)),
        MixingDistribution::Flow(_) => {
            let omegas = mixing.base_values(q)?;
            Ok(log_scale_mixture(u, n, log_det, &omegas, &q.log_weights()))
        }
    }
}

fn lower_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("positive diagonal")
}

impl EllipticalDistribution {
    pub fn from_chol(mu: DVector<f64>, scale_chol: DMatrix<f64>, mixing: MixingDistribution) -> Result<Self> {
        if scale_chol.nrows() != mu.len() || scale_chol.ncols() != mu.len() {
            return Err(Error::DimensionMismatch {
                context: "scale Cholesky factor",
                expected: mu.len(),
                got: scale_chol.nrows(),
            });
        }
        if scale_chol.diagonal().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidArgument(
                "scale Cholesky factor needs a positive diagonal".into(),
            ));
        }
        mixing.validate()?;
        Ok(Self {
            mu,
            scale_chol: scale_chol.lower_triangle(),
            mixing,
        })
    }

    pub fn new(mu: DVector<f64>, sigma: &DMatrix<f64>, mixing: MixingDistribution) -> Result<Self> {
        let chol = robust_cholesky(sigma).ok_or(Error::DegenerateKernel { max_jitter: 0.0 })?;
        Self::from_chol(mu, chol.l(), mixing)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        &self.scale_chol * self.scale_chol.transpose()
    }

    pub fn log_det_sigma(&self) -> f64 {
        2.0 * self.scale_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn check_len(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "elliptical observation",
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance `(y - μ)ᵀ Σ⁻¹ (y - μ)`.
    pub fn mahalanobis(&self, y: &DVector<f64>) -> Result<f64> {
        self.check_len(y)?;
        Ok(lower_solve(&self.scale_chol, &(y - &self.mu)).norm_squared())
    }

    pub fn joint_log_density(&self, y: &DVector<f64>, q: &BaseQuadrature) -> Result<f64> {
        let u = self.mahalanobis(y)?;
        mixture_log_density(&self.mixing, u, self.dim(), self.log_det_sigma(), q)
    }

    /// Draws `ξ`, then `μ + √ξ L z`.
    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> Result<DVector<f64>> {
        let xi = self.mixing.sample_mix(1, rng)?[0];
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mu + (&self.scale_chol * z) * xi.sqrt())
    }

    /// Covariance `E[ξ] Σ`, or `None` when the mixing mean is infinite.
    pub fn covariance(&self, q: &BaseQuadrature) -> Result<Option<DMatrix<f64>>> {
        let m = self.mixing.mean_quadrature(q)?;
        Ok(m.is_finite().then(|| self.sigma() * m))
    }

    /// Conditions on `y[observed] = y1`; the remaining coordinates keep
    /// their original order.
    pub fn condition(&self, observed: &[usize], y1: &DVector<f64>) -> Result<ConditionalDistribution> {
        let n = self.dim();
        if observed.is_empty() || observed.len() >= n {
            return Err(Error::InvalidArgument(
                "conditioning set must be a nonempty proper subset".into(),
            ));
        }
        if observed.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("conditioning index out of range".into()));
        }
        if y1.len() != observed.len() {
            return Err(Error::DimensionMismatch {
                context: "conditioning values",
                expected: observed.len(),
                got: y1.len(),
            });
        }
        let free: Vec<usize> = (0..n).filter(|i| !observed.contains(i)).collect();
        let sigma = self.sigma();
        let s11 = sigma.select_rows(observed).select_columns(observed);
        let s21 = sigma.select_rows(&free).select_columns(observed);
        let s22 = sigma.select_rows(&free).select_columns(&free);
        let c11 = robust_cholesky(&s11).ok_or(Error::DegenerateKernel { max_jitter: 0.0 })?;
        let resid = y1 - self.mu.select_rows(observed);
        let alpha = c11.solve(&resid);
        let u1 = resid.dot(&alpha);
        let mu2 = self.mu.select_rows(&free) + &s21 * &alpha;
        let s22c = &s22 - &s21 * c11.solve(&s21.transpose());
        let s22c = (&s22c + s22c.transpose()) * 0.5;
        let chol = robust_cholesky(&s22c).ok_or(Error::DegenerateKernel { max_jitter: 0.0 })?;
        let mixing = ConditionalMixing::from_prior(&self.mixing, observed.len(), u1)?;
        Ok(ConditionalDistribution {
            free,
            mu: mu2,
            scale_chol: chol.l(),
            mixing,
        })
    }
}

/// Draw a path `f = √ξ L z` at the rows of `x`, with `K = L Lᵀ`.
pub fn sample_path<G: Rng + ?Sized>(
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    mixing: &MixingDistribution,
    rng: &mut G,
) -> Result<DVector<f64>> {
    let gram = gram_with_jitter(kernel, x, &JitterSchedule::default())?;
    let xi = mixing.sample_mix(1, rng)?[0];
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((gram.l() * z) * xi.sqrt())
}

/// Mixing distribution after observing `N₁` coordinates with Mahalanobis
/// distance `u₁`.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionalMixing {
    Dirac { s: f64 },
    Tabulated(TabulatedMixing),
}

/// Density `∝ ξ^{-N₁/2} exp(-u₁ / 2ξ) p(ξ)` normalized on a log-spaced grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedMixing {
    prior: MixingDistribution,
    n_obs: usize,
    u: f64,
    log_norm: f64,
    pub log_grid: Vec<f64>,
    /// Density with respect to `log ξ` at each grid point.
    pub log_mass: Vec<f64>,
    cdf: Vec<f64>,
}

fn prior_log_density(prior: &MixingDistribution, xi: f64) -> Result<f64> {
    match prior.log_density_mix(xi)? {
        MixingLogDensity::Density(v) => Ok(v),
        MixingLogDensity::PointMass { .. } => Err(Error::InvalidArgument("point-mass mixing has no density".into())),
    }
}

impl ConditionalMixing {
    pub fn from_prior(prior: &MixingDistribution, n_obs: usize, u: f64) -> Result<Self> {
        if let MixingDistribution::Dirac { s } = prior {
            return Ok(ConditionalMixing::Dirac { s: *s });
        }
        let median = prior.transform(0.0)?;
        let (lo, hi) = (
            (median / CONDITIONAL_GRID_SPAN).ln(),
            (median * CONDITIONAL_GRID_SPAN).ln(),
        );
        let n = CONDITIONAL_GRID_POINTS;
        let h = (hi - lo) / (n - 1) as f64;
        let log_grid: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        let unnorm = |t: f64| -> Result<f64> {
            let xi = t.exp();
            Ok(-0.5 * n_obs as f64 * t - 0.5 * u / xi + prior_log_density(prior, xi)? + t)
        };
        let raw: Vec<f64> = log_grid.iter().map(|&t| unnorm(t)).collect::<Result<_>>()?;
        let mut trap: Vec<f64> = raw.iter().map(|v| v + h.ln()).collect();
        trap[0] -= std::f64::consts::LN_2;
        trap[n - 1] -= std::f64::consts::LN_2;
        let log_norm = log_sum_exp(&trap);
        if !log_norm.is_finite() {
            return Err(Error::NonFinite("conditional mixing normalizer".into()));
        }
        let log_mass: Vec<f64> = raw.iter().map(|v| v - log_norm).collect();
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (log_mass[i].exp() + log_mass[i - 1].exp());
        }
        let total = cdf[n - 1];
        for c in &mut cdf {
            *c /= total;
        }
        Ok(ConditionalMixing::Tabulated(TabulatedMixing {
            prior: prior.clone(),
            n_obs,
            u,
            log_norm,
            log_grid,
            log_mass,
            cdf,
        }))
    }

    /// Log density of `ξ`, or `None` for a point mass.
    pub fn log_density(&self, xi: f64) -> Result<Option<f64>> {
        match self {
            ConditionalMixing::Dirac { .. } => Ok(None),
            ConditionalMixing::Tabulated(t) => {
                if !(xi > 0.0) {
                    return Err(Error::Domain {
                        what: "conditional mixing argument",
                        value: xi,
                    });
                }
                let l = xi.ln();
                Ok(Some(
                    -0.5 * t.n_obs as f64 * l - 0.5 * t.u / xi + prior_log_density(&t.prior, xi)? - t.log_norm,
                ))
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ConditionalMixing::Dirac { s } => *s,
            ConditionalMixing::Tabulated(t) => t.expect(|xi| xi),
        }
    }

    pub fn sample<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Vec<f64> {
        match self {
            ConditionalMixing::Dirac { s } => vec![*s; n],
            ConditionalMixing::Tabulated(t) => (0..n).map(|_| t.quantile(rng.random::<f64>())).collect(),
        }
    }
}

impl TabulatedMixing {
    /// Trapezoid of `h(ξ)` against the tabulated density.
    pub fn expect<F: Fn(f64) -> f64>(&self, h: F) -> f64 {
        let step = self.log_grid[1] - self.log_grid[0];
        let n = self.log_grid.len();
        (0..n)
            .map(|i| {
                let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                end * step * self.log_mass[i].exp() * h(self.log_grid[i].exp())
            })
            .sum()
    }

    /// Inverse CDF, linear in `log ξ` between grid points.
    pub fn quantile(&self, p: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < p).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let frac = if c1 > c0 {
            ((p - c0) / (c1 - c0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (self.log_grid[i - 1] + frac * (self.log_grid[i] - self.log_grid[i - 1])).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalDistribution {
    /// Indices of the unobserved coordinates, in order.
    pub free: Vec<usize>,
    pub mu: DVector<f64>,
    pub scale_chol: DMatrix<f64>,
    pub mixing: ConditionalMixing,
}

impl ConditionalDistribution {
    pub fn sigma(&self) -> DMatrix<f64> {
        &self.scale_chol * self.scale_chol.transpose()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.sigma() * self.mixing.mean()
    }

    pub fn log_density(&self, y2: &DVector<f64>) -> Result<f64> {
        if y2.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                context: "conditional observation",
                expected: self.mu.len(),
                got: y2.len(),
            });
        }
        let u = lower_solve(&self.scale_chol, &(y2 - &self.mu)).norm_squared();
        let log_det = 2.0 * self.scale_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let n = self.mu.len();
        match &self.mixing {
            ConditionalMixing::Dirac { s } => Ok(-0.5 * n as f64 * (LN_2PI + s.ln()) - 0.5 * log_det - 0.5 * u / s),
            ConditionalMixing::Tabulated(t) => {
                let step = t.log_grid[1] - t.log_grid[0];
                let m = t.log_grid.len();
                let omegas: Vec<f64> = t.log_grid.iter().map(|l| l.exp()).collect();
                let log_w: Vec<f64> = (0..m)
                    .map(|i| {
                        let end = if i == 0 || i == m - 1 { 0.5f64 } else { 1.0 };
                        t.log_mass[i] + (end * step).ln()
                    })
                    .collect();
                Ok(log_scale_mixture(u, n, log_det, &omegas, &log_w))
            }
        }
    }
}

fn check_samples(xi: &[f64]) -> Result<()> {
    if xi.is_empty() {
        return Err(Error::InvalidArgument("need at least one mixing sample".into()));
    }
    if let Some(&bad) = xi.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain {
            what: "mixing sample",
            value: bad,
        });
    }
    Ok(())
}

/// `Σ_i w_i erf(z / √(2 v_i))`: probability that a zero-mean mixture of
/// normals with variances `v_i` lies within `±z`.
pub fn weighted_coverage(variances: &[f64], weights: &[f64], z: f64) -> f64 {
    variances
        .iter()
        .zip(weights)
        .map(|(&v, &w)| w * erf(z / (2.0 * v).sqrt()))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// `(1/m) Σ erf(z / √(2 ξ_i))`.
pub fn credible_coverage(xi: &[f64], z: f64) -> Result<f64> {
    check_samples(xi)?;
    if !(z >= 0.0) {
        return Err(Error::Domain {
            what: "credible half-width",
            value: z,
        });
    }
    let w = vec![1.0 / xi.len() as f64; xi.len()];
    Ok(weighted_coverage(xi, &w, z))
}

pub const HALFWIDTH_TOL: f64 = 1e-8;
pub const HALFWIDTH_MAX_ITER: usize = 200;

/// Smallest `z` with `weighted_coverage(.., z) = target`, by bisection.
pub fn weighted_halfwidth(variances: &[f64], weights: &[f64], target: f64) -> Result<f64> {
    check_samples(variances)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain {
            what: "credible target probability",
            value: target,
        });
    }
    let total: f64 = weights.iter().sum();
    let cov = |z: f64| weighted_coverage(variances, weights, z) / total;
    let mut hi = variances.iter().cloned().fold(0.0, f64::max).sqrt();
    let mut lo = 0.0;
    let mut iter = 0;
    while cov(hi) < target {
        lo = hi;
        hi *= 2.0;
        iter += 1;
        if iter > HALFWIDTH_MAX_ITER {
            return Err(Error::NoConvergence(HALFWIDTH_MAX_ITER));
        }
    }
    for _ in 0..HALFWIDTH_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let c = cov(mid);
        if (c - target).abs() < HALFWIDTH_TOL {
            return Ok(mid);
        }
        if c < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence(HALFWIDTH_MAX_ITER))
}

/// Half-width `z` with `credible_coverage(xi, z) = target`.
pub fn credible_halfwidth(xi: &[f64], target: f64) -> Result<f64> {
    let w = vec![1.0 / xi.len().max(1) as f64; xi.len()];
    weighted_halfwidth(xi, &w, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{SplineFlow, Squash};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn flow_mixing(seed: u64, squash: Squash) -> MixingDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = SplineFlow::identity(5, squash);
        for p in &mut flow.params {
            *p = rng.random_range(-1.0..1.0);
        }
        MixingDistribution::Flow(flow)
    }

    #[test]
    fn mahalanobis_cases() {
        let d = EllipticalDistribution::new(
            DVector::zeros(2),
            &DMatrix::identity(2, 2),
            MixingDistribution::gaussian(),
        )
        .unwrap();
        assert_eq!(d.mahalanobis(&DVector::from_vec(vec![3.0, 4.0])).unwrap(), 25.0);
        assert_eq!(d.mahalanobis(&DVector::zeros(2)).unwrap(), 0.0);
        assert!(d.mahalanobis(&DVector::zeros(3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = random_spd(&mut rng, 5);
        let mu = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
        let d = EllipticalDistribution::new(mu.clone(), &sigma, MixingDistribution::gaussian()).unwrap();
        let r = &y - &mu;
        let oracle = (r.transpose() * sigma.try_inverse().unwrap() * &r)[(0, 0)];
        assert!((d.mahalanobis(&y).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn closed_form_densities() {
        let q = BaseQuadrature::default();
        let one = DMatrix::identity(1, 1);
        let g = EllipticalDistribution::new(DVector::zeros(1), &one, MixingDistribution::Dirac { s: 1.0 }).unwrap();
        let v = g.joint_log_density(&DVector::zeros(1), &q).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);

        let t = EllipticalDistribution::new(
            DVector::zeros(1),
            &one,
            MixingDistribution::ScaleInvChiSquare { nu: 4.0, tau2: 1.0 },
        )
        .unwrap();
        let v = t.joint_log_density(&DVector::zeros(1), &q).unwrap();
        let oracle = (ln_gamma(2.5) - ln_gamma(2.0) - 0.5 * (4.0 * std::f64::consts::PI).ln()).exp();
        assert!((oracle - 0.375).abs() < 1e-12);
        assert!((v - 0.375f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn flow_density_matches_monte_carlo() {
        let q = BaseQuadrature::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = random_spd(&mut rng, 2);
        let mixing = flow_mixing(3, Squash::Softplus);
        let d = EllipticalDistribution::new(DVector::zeros(2), &sigma, mixing.clone()).unwrap();
        let y = DVector::from_vec(vec![0.4, -0.9]);
        let quad = d.joint_log_density(&y, &q).unwrap().exp();
        let u = d.mahalanobis(&y).unwrap();
        let ld = d.log_det_sigma();
        let xs = mixing.sample_mix(1_000_000, &mut rng).unwrap();
        let vals: Vec<f64> = xs
            .iter()
            .map(|&w| (-(LN_2PI + w.ln()) - 0.5 * ld - 0.5 * u / w).exp())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((quad - mean).abs() < 3.0 * se, "{quad} vs {mean} ± {se}");
    }

    #[test]
    fn sample_paths_reproduce_prior_covariance() {
        let x = DMatrix::from_fn(6, 1, |i, _| 0.4 * i as f64);
        let k = KernelSpec::se_ard(&[1.0], 1.0);
        let kmat = k.gram(&x, &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cov = DMatrix::zeros(6, 6);
        let n = 10_000;
        for _ in 0..n {
            let f = sample_path(&k, &x, &MixingDistribution::gaussian(), &mut rng).unwrap();
            cov += &f * f.transpose();
        }
        cov /= n as f64;
        assert!((&cov - &kmat).norm() / kmat.norm() < 0.05);

        let a = sample_path(
            &k,
            &x,
            &MixingDistribution::gaussian(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = sample_path(
            &k,
            &x,
            &MixingDistribution::gaussian(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dirac_conditioning_is_gaussian_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = random_spd(&mut rng, 4);
        let mu = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let d = EllipticalDistribution::new(mu.clone(), &sigma, MixingDistribution::gaussian()).unwrap();
        let y1 = DVector::from_vec(vec![0.3, -1.2]);
        let c = d.condition(&[1, 3], &y1).unwrap();
        assert_eq!(c.mixing, ConditionalMixing::Dirac { s: 1.0 });
        assert_eq!(c.free, vec![0, 2]);
        // Dense-inverse oracle.
        let s11 = sigma.select_rows(&[1, 3]).select_columns(&[1, 3]);
        let s21 = sigma.select_rows(&[0, 2]).select_columns(&[1, 3]);
        let s22 = sigma.select_rows(&[0, 2]).select_columns(&[0, 2]);
        let inv = s11.try_inverse().unwrap();
        let m = mu.select_rows(&[0, 2]) + &s21 * &inv * (&y1 - mu.select_rows(&[1, 3]));
        let s = &s22 - &s21 * &inv * s21.transpose();
        assert!((&c.mu - m).amax() < 1e-10);
        assert!((c.sigma() - s).amax() < 1e-10);
    }

    #[test]
    fn conditioning_rejects_bad_index_sets() {
        let d = EllipticalDistribution::new(
            DVector::zeros(3),
            &DMatrix::identity(3, 3),
            MixingDistribution::gaussian(),
        )
        .unwrap();
        assert!(d.condition(&[], &DVector::zeros(0)).is_err());
        assert!(d.condition(&[0, 1, 2], &DVector::zeros(3)).is_err());
        assert!(d.condition(&[0], &DVector::zeros(2)).is_err());
    }

    #[test]
    fn student_t_conjugacy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nu = 4.0;
        let sigma = random_spd(&mut rng, 5);
        let d = EllipticalDistribution::new(
            DVector::zeros(5),
            &sigma,
            MixingDistribution::ScaleInvChiSquare { nu, tau2: 1.0 },
        )
        .unwrap();
        let obs = [0, 2, 3];
        let y1 = DVector::from_vec(vec![0.5, -1.0, 0.8]);
        let c = d.condition(&obs, &y1).unwrap();
        let s11 = sigma.select_rows(&obs).select_columns(&obs);
        let u1 = (y1.transpose() * s11.try_inverse().unwrap() * &y1)[(0, 0)];
        let n1 = 3.0;
        let post = MixingDistribution::ScaleInvChiSquare {
            nu: nu + n1,
            tau2: (nu + u1) / (nu + n1),
        };
        let ConditionalMixing::Tabulated(t) = &c.mixing else {
            panic!("expected tabulated mixing")
        };
        let mut sup: f64 = 0.0;
        for &l in &t.log_grid {
            let xi = l.exp();
            let a = c.mixing.log_density(xi).unwrap().unwrap().exp();
            let b = post.log_density_mix(xi).unwrap().density().unwrap().exp();
            sup = sup.max((a - b).abs());
        }
        assert!(sup < 1e-4, "sup error {sup}");
        // Covariance is the conditional mixing mean times the conditional scale.
        let mean = c.mixing.mean();
        let analytic = (nu + u1) / (nu + n1 - 2.0);
        assert!((mean / analytic - 1.0).abs() < 1e-4);
        assert!((c.covariance() - c.sigma() * analytic).amax() < 1e-4 * c.sigma().amax() * analytic);
    }

    #[test]
    fn bayes_consistency_with_flow_mixing() {
        let q = BaseQuadrature::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = random_spd(&mut rng, 3);
        let mixing = flow_mixing(8, Squash::ScaledSigmoid { max: 3.0 });
        let d = EllipticalDistribution::new(DVector::zeros(3), &sigma, mixing.clone()).unwrap();
        let y = DVector::from_vec(vec![0.2, -0.7, 1.1]);
        let joint = d.joint_log_density(&y, &q).unwrap();
        let obs = [0, 2];
        let y1 = y.select_rows(&obs);
        let marg =
            EllipticalDistribution::new(DVector::zeros(2), &sigma.select_rows(&obs).select_columns(&obs), mixing)
                .unwrap()
                .joint_log_density(&y1, &q)
                .unwrap();
        let c = d.condition(&obs, &y1).unwrap();
        let cond = c.log_density(&y.select_rows(&[1])).unwrap();
        assert!((joint - marg - cond).abs() < 1e-3, "{} vs {}", joint - marg, cond);
        let samples = c.mixing.sample(1000, &mut rng);
        assert!(samples.iter().all(|&s| s > 0.0 && s < 3.0));
    }

    #[test]
    fn coverage_values() {
        assert!((credible_coverage(&[1.0], 1.0).unwrap() - 0.682_689_5).abs() < 1e-6);
        assert_eq!(credible_coverage(&[1.0, 2.0], 0.0).unwrap(), 0.0);
        let v = credible_coverage(&[1.0, 4.0], 1.96).unwrap();
        let oracle = 0.5 * (erf(1.96 / 2f64.sqrt()) + erf(1.96 / 8f64.sqrt()));
        assert!((v - oracle).abs() < 1e-15);
        assert!(credible_coverage(&[1.0, -1.0], 1.0).is_err());
        assert!(credible_coverage(&[], 1.0).is_err());
    }

    #[test]
    fn halfwidth_values() {
        assert!((credible_halfwidth(&[1.0], 0.682_689_5).unwrap() - 1.0).abs() < 1e-6);
        assert!((credible_halfwidth(&[1.0], 0.95).unwrap() - 1.959_964).abs() < 1e-5);
        let heavy = MixingDistribution::ScaleInvChiSquare { nu: 4.0, tau2: 1.0 }
            .sample_mix(2000, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let z_heavy = credible_halfwidth(&heavy, 0.95).unwrap();
        // Gaussian with the same second moment, E[ξ] = 2.
        assert!(z_heavy > credible_halfwidth(&[1.0], 0.95).unwrap());
        assert!(credible_halfwidth(&[1.0], 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn coverage_is_monotone_and_bounded(seed in 0u64..10_000, a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let xi = MixingDistribution::ScaleInvChiSquare { nu: 3.0, tau2: 1.0 }
                .sample_mix(50, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let cl = credible_coverage(&xi, lo).unwrap();
            let ch = credible_coverage(&xi, hi).unwrap();
            prop_assert!(cl <= ch);
            prop_assert!((0.0..=1.0).contains(&cl) && (0.0..=1.0).contains(&ch));
        }
    }
}
