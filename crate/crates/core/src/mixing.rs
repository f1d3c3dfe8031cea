//! The positive scale variable of a Gaussian scale mixture.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared as ChiSquaredDist, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::flow::SplineFlow;
use crate::quadrature::{std_normal_cdf, BaseQuadrature};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingDistribution {
    Dirac { s: f64 },
    ScaleInvChiSquare { nu: f64, tau2: f64 },
    Flow(SplineFlow),
}

/// Log density of a mixing distribution, or the location of its point mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MixingLogDensity {
    PointMass { at: f64 },
    Density(f64),
}

impl MixingLogDensity {
    pub fn density(self) -> Option<f64> {
        match self {
            MixingLogDensity::Density(v) => Some(v),
            MixingLogDensity::PointMass { .. } => None,
        }
    }
}

/// Closed-form log density of the scaled inverse chi-square law.
pub fn scale_inv_chi_square_log_pdf(nu: f64, tau2: f64, w: f64) -> f64 {
    let h = 0.5 * nu;
    h * h.ln() - ln_gamma(h) + h * tau2.ln() - (h + 1.0) * w.ln() - h * tau2 / w
}

impl MixingDistribution {
    pub fn gaussian() -> Self {
        MixingDistribution::Dirac { s: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MixingDistribution::Dirac { s } => {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(Error::Domain {
                        what: "Dirac mixing location",
                        value: *s,
                    });
                }
            }
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => {
                if !(*nu > 0.0 && nu.is_finite()) {
                    return Err(Error::Domain {
                        what: "degrees of freedom",
                        value: *nu,
                    });
                }
                if !(*tau2 > 0.0 && tau2.is_finite()) {
                    return Err(Error::Domain {
                        what: "scale-inverse-chi-square scale",
                        value: *tau2,
                    });
                }
            }
            MixingDistribution::Flow(flow) => {
                flow.validate()?;
                if !flow.squash.is_positive() {
                    return Err(Error::InvalidArgument("mixing flows need a positive squash".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self, MixingDistribution::Dirac { .. })
    }

    pub fn as_flow(&self) -> Option<&SplineFlow> {
        match self {
            MixingDistribution::Flow(f) => Some(f),
            _ => None,
        }
    }

    pub fn sample_mix<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            MixingDistribution::Dirac { s } => Ok(vec![*s; n]),
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => {
                let chi = ChiSquared::new(*nu).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Ok((0..n).map(|_| nu * tau2 / chi.sample(rng)).collect())
            }
            MixingDistribution::Flow(flow) => flow.sample(n, rng),
        }
    }

    pub fn log_density_mix(&self, w: f64) -> Result<MixingLogDensity> {
        if !(w > 0.0) {
            return Err(Error::Domain {
                what: "mixing density argument",
                value: w,
            });
        }
        self.validate()?;
        Ok(match self {
            MixingDistribution::Dirac { s } => MixingLogDensity::PointMass { at: *s },
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => {
                MixingLogDensity::Density(scale_inv_chi_square_log_pdf(*nu, *tau2, w))
            }
            MixingDistribution::Flow(flow) => {
                let (_, hi) = flow.image();
                if w >= hi {
                    MixingLogDensity::Density(f64::NEG_INFINITY)
                } else {
                    MixingLogDensity::Density(flow.log_prob(w)?)
                }
            }
        })
    }

    /// Analytic mean where one exists; Monte Carlo with `n_mc` draws for flows.
    pub fn mean_mix<G: Rng + ?Sized>(&self, n_mc: usize, rng: &mut G) -> Result<f64> {
        self.validate()?;
        match self {
            MixingDistribution::Dirac { s } => Ok(*s),
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => Ok(if *nu > 2.0 {
                nu * tau2 / (nu - 2.0)
            } else {
                f64::INFINITY
            }),
            MixingDistribution::Flow(flow) => {
                let xs = flow.sample(n_mc.max(1), rng)?;
                Ok(xs.iter().sum::<f64>() / xs.len() as f64)
            }
        }
    }

    /// Deterministic mean by base-space quadrature.
    pub fn mean_quadrature(&self, q: &BaseQuadrature) -> Result<f64> {
        if let MixingDistribution::ScaleInvChiSquare { nu, .. } = self {
            if *nu <= 2.0 {
                return Ok(f64::INFINITY);
            }
        }
        let vals = self.base_values(q)?;
        Ok(vals.iter().zip(&q.weights).map(|(v, w)| v * w).sum())
    }

    /// The monotone map `ζ ↦ T(ζ)` pushing `N(0, 1)` onto this distribution.
    pub fn transform(&self, zeta: f64) -> Result<f64> {
        self.validate()?;
        Ok(match self {
            MixingDistribution::Dirac { s } => *s,
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => {
                let chi = ChiSquaredDist::new(*nu).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                nu * tau2 / chi.inverse_cdf(std_normal_cdf(-zeta))
            }
            MixingDistribution::Flow(flow) => flow.forward(zeta)?.0,
        })
    }

    /// `T(ζ_k)` at every quadrature node.
    pub fn base_values(&self, q: &BaseQuadrature) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            MixingDistribution::Dirac { s } => Ok(vec![*s; q.len()]),
            MixingDistribution::ScaleInvChiSquare { nu, tau2 } => {
                let chi = ChiSquaredDist::new(*nu).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Ok(q.nodes
                    .iter()
                    .map(|&z| nu * tau2 / chi.inverse_cdf(std_normal_cdf(-z)))
                    .collect())
            }
            MixingDistribution::Flow(flow) => {
                let eval = flow.eval()?;
                Ok(q.nodes.iter().map(|&z| eval.forward(z).0).collect())
            }
        }
    }

    /// Values at the stratified base quantiles `Φ⁻¹((j + ½)/n)`.
    pub fn stratified_samples(&self, n: usize) -> Result<Vec<f64>> {
        let normal = statrs::distribution::Normal::standard();
        (0..n)
            .map(|j| self.transform(normal.inverse_cdf((j as f64 + 0.5) / n as f64)))
            .collect()
    }
}
