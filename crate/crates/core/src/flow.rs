//! Monotonic rational-quadratic spline flows on `[-B, B]` with identity
//! tails, followed by an optional squash onto a positive half-line or a
//! bounded interval.
//!
//! Parameter layout for `K` bins: `K` width logits, `K` height logits, then
//! `K - 1` raw derivatives at the internal knots. All-zero parameters give
//! the exact identity spline.
//!
//! The evaluation core is generic over [`Real`], so the same code yields
//! plain values or a differentiable tape.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffopt::Real;
use crate::error::{Error, Result};
use crate::quadrature::ln_sqrt_2pi;

pub const DEFAULT_BOUND: f64 = 6.0;
pub const MIN_BIN: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;
/// `softplus(LN_E_M1) = 1`, so zero raw derivatives become unit slopes.
const LN_E_M1: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Squash {
    None,
    Softplus,
    ScaledSigmoid { max: f64 },
}

impl Squash {
    /// Open interval covered by the squash output.
    pub fn image(&self) -> (f64, f64) {
        match *self {
            Squash::None => (f64::NEG_INFINITY, f64::INFINITY),
            Squash::Softplus => (0.0, f64::INFINITY),
            Squash::ScaledSigmoid { max } => (0.0, max),
        }
    }

    pub fn is_positive(&self) -> bool {
        !matches!(self, Squash::None)
    }

    fn forward<R: Real>(&self, v: R) -> (R, R) {
        match *self {
            Squash::None => (v, v.lift(0.0)),
            Squash::Softplus => (v.softplus(), v.ln_sigmoid()),
            Squash::ScaledSigmoid { max } => {
                let ld = v.ln_sigmoid() + (-v).ln_sigmoid() + max.ln();
                (v.sigmoid() * max, ld)
            }
        }
    }

    fn inverse<R: Real>(&self, x: R) -> Result<(R, R)> {
        let xv = x.value();
        match *self {
            Squash::None => Ok((x, x.lift(0.0))),
            Squash::Softplus => {
                if !(xv > 0.0) {
                    return Err(Error::Domain {
                        what: "softplus squash inverse",
                        value: xv,
                    });
                }
                let v = x.softplus_inv();
                Ok((v, -v.ln_sigmoid()))
            }
            Squash::ScaledSigmoid { max } => {
                if !(xv > 0.0 && xv < max) {
                    return Err(Error::Domain {
                        what: "scaled sigmoid squash inverse",
                        value: xv,
                    });
                }
                let v = (x / (-x + max)).ln();
                Ok((v, -(v.ln_sigmoid() + (-v).ln_sigmoid() + max.ln())))
            }
        }
    }
}

/// A spline flow with its parameters in unconstrained space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineFlow {
    pub bins: usize,
    pub bound: f64,
    pub squash: Squash,
    pub params: Vec<f64>,
}

pub fn num_params(bins: usize) -> usize {
    (3 * bins).saturating_sub(1)
}

impl SplineFlow {
    pub fn identity(bins: usize, squash: Squash) -> Self {
        Self {
            bins,
            bound: DEFAULT_BOUND,
            squash,
            params: vec![0.0; num_params(bins)],
        }
    }

    pub fn with_params(bins: usize, bound: f64, squash: Squash, params: Vec<f64>) -> Result<Self> {
        let flow = Self {
            bins,
            bound,
            squash,
            params,
        };
        flow.validate()?;
        Ok(flow)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidArgument("spline needs at least one bin".into()));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Domain {
                what: "spline tail bound",
                value: self.bound,
            });
        }
        if let Squash::ScaledSigmoid { max } = self.squash {
            if !(max > 0.0 && max.is_finite()) {
                return Err(Error::Domain {
                    what: "scaled sigmoid maximum",
                    value: max,
                });
            }
        }
        if self.params.len() != num_params(self.bins) {
            return Err(Error::DimensionMismatch {
                context: "spline flow parameters",
                expected: num_params(self.bins),
                got: self.params.len(),
            });
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        num_params(self.bins)
    }

    pub fn image(&self) -> (f64, f64) {
        self.squash.image()
    }

    /// Evaluator over the stored parameters.
    pub fn eval(&self) -> Result<FlowEval<f64>> {
        self.eval_with(&self.params)
    }

    /// Evaluator over externally supplied parameters, e.g. tape variables.
    pub fn eval_with<R: Real>(&self, params: &[R]) -> Result<FlowEval<R>> {
        FlowEval::new(self.bins, self.bound, self.squash, params)
    }

    pub fn forward(&self, z: f64) -> Result<(f64, f64)> {
        if !z.is_finite() {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(self.eval()?.forward(z))
    }

    pub fn inverse(&self, x: f64) -> Result<(f64, f64)> {
        self.eval()?.inverse(x)
    }

    pub fn log_prob(&self, x: f64) -> Result<f64> {
        self.eval()?.log_prob(x)
    }

    pub fn sample<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Result<Vec<f64>> {
        let eval = self.eval()?;
        Ok((0..n)
            .map(|_| eval.forward(rng.sample::<f64, _>(StandardNormal)).0)
            .collect())
    }
}

/// Knot positions, bin sizes and slopes of a spline, ready for evaluation.
#[derive(Clone, Debug)]
pub struct FlowEval<R> {
    bound: f64,
    squash: Squash,
    xs: Vec<R>,
    ys: Vec<R>,
    widths: Vec<R>,
    heights: Vec<R>,
    slopes: Vec<R>,
}

fn constrained_bins<R: Real>(raw: &[R], total: f64) -> Vec<R> {
    let max = raw.iter().map(|r| r.value()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<R> = raw.iter().map(|&r| (r - max).exp()).collect();
    let sum = exps[1..].iter().fold(exps[0], |acc, &e| acc + e);
    let scale = 1.0 - raw.len() as f64 * MIN_BIN;
    exps.iter().map(|&e| ((e / sum) * scale + MIN_BIN) * total).collect()
}

fn cumulative<R: Real>(start: R, sizes: &[R]) -> Vec<R> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    out.push(start);
    for &s in sizes {
        let last = *out.last().unwrap();
        out.push(last + s);
    }
    out
}

impl<R: Real> FlowEval<R> {
    pub fn new(bins: usize, bound: f64, squash: Squash, params: &[R]) -> Result<Self> {
        if params.len() != num_params(bins) || bins == 0 {
            return Err(Error::DimensionMismatch {
                context: "spline flow parameters",
                expected: num_params(bins.max(1)),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.value().is_finite()) {
            return Err(Error::NonFinite("spline flow parameters".into()));
        }
        let k = bins;
        let widths = constrained_bins(&params[..k], 2.0 * bound);
        let heights = constrained_bins(&params[k..2 * k], 2.0 * bound);
        let lo = params[0].lift(-bound);
        let xs = cumulative(lo, &widths);
        let ys = cumulative(lo, &heights);
        let one = params[0].lift(1.0);
        let mut slopes = Vec::with_capacity(k + 1);
        slopes.push(one);
        for &u in &params[2 * k..] {
            slopes.push((u + LN_E_M1).softplus() * (1.0 - MIN_DERIVATIVE) + MIN_DERIVATIVE);
        }
        slopes.push(one);
        Ok(Self {
            bound,
            squash,
            xs,
            ys,
            widths,
            heights,
            slopes,
        })
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    /// Constrained bin widths, summing to `2B`.
    pub fn widths(&self) -> &[R] {
        &self.widths
    }

    pub fn heights(&self) -> &[R] {
        &self.heights
    }

    /// Knot slopes including the unit boundary slopes.
    pub fn slopes(&self) -> &[R] {
        &self.slopes
    }

    fn bin_of(knots: &[R], v: f64) -> usize {
        let k = knots.len() - 1;
        (1..k).take_while(|&i| knots[i].value() <= v).last().unwrap_or(0)
    }

    /// Spline stage only: `(y, log dy/dz)`.
    pub fn spline_forward(&self, z: R) -> (R, R) {
        let zv = z.value();
        if zv <= -self.bound || zv >= self.bound {
            return (z, z.lift(0.0));
        }
        let b = Self::bin_of(&self.xs, zv);
        let (w, h) = (self.widths[b], self.heights[b]);
        let (d0, d1) = (self.slopes[b], self.slopes[b + 1]);
        let s = h / w;
        let theta = (z - self.xs[b]) / w;
        let omt = -theta + 1.0;
        let t1 = theta * omt;
        let den = s + (d1 + d0 - s * 2.0) * t1;
        let num = h * (s * theta.square() + d0 * t1);
        let y = self.ys[b] + num / den;
        let dnum = s.square() * (d1 * theta.square() + s * t1 * 2.0 + d0 * omt.square());
        let logdet = dnum.ln() - den.ln() * 2.0;
        (y, logdet)
    }

    /// Inverse of the spline stage: `(z, log dz/dy)`.
    pub fn spline_inverse(&self, y: R) -> (R, R) {
        let yv = y.value();
        if yv <= -self.bound || yv >= self.bound {
            return (y, y.lift(0.0));
        }
        let b = Self::bin_of(&self.ys, yv);
        let (w, h) = (self.widths[b], self.heights[b]);
        let (d0, d1) = (self.slopes[b], self.slopes[b + 1]);
        let s = h / w;
        let delta = y - self.ys[b];
        let c0 = d1 + d0 - s * 2.0;
        let a = h * (s - d0) + delta * c0;
        let bq = h * d0 - delta * c0;
        let c = -(s * delta);
        let disc = bq.square() - a * c * 4.0;
        // Clamp tiny negative discriminants from round-off at bin edges.
        let root = if disc.value() > 0.0 { disc.sqrt() } else { disc * 0.0 };
        let theta = (c * 2.0) / (-bq - root);
        let z = self.xs[b] + theta * w;
        let omt = -theta + 1.0;
        let t1 = theta * omt;
        let den = s + c0 * t1;
        let dnum = s.square() * (d1 * theta.square() + s * t1 * 2.0 + d0 * omt.square());
        (z, den.ln() * 2.0 - dnum.ln())
    }

    /// `(x, log dx/dz)` for the full transform.
    pub fn forward(&self, z: R) -> (R, R) {
        let (y, ld_spline) = self.spline_forward(z);
        let (x, ld_squash) = self.squash.forward(y);
        (x, ld_spline + ld_squash)
    }

    /// `(z, log dz/dx)`; errors outside the squash image.
    pub fn inverse(&self, x: R) -> Result<(R, R)> {
        if !x.value().is_finite() {
            return Err(Error::NonFinite("flow inverse input".into()));
        }
        let (y, ld_squash) = self.squash.inverse(x)?;
        let (z, ld_spline) = self.spline_inverse(y);
        Ok((z, ld_squash + ld_spline))
    }

    /// Log density of `x = T(ζ)` with `ζ ~ N(0, 1)`.
    pub fn log_prob(&self, x: R) -> Result<R> {
        let (z, ld) = self.inverse(x)?;
        Ok(z.square() * -0.5 - ln_sqrt_2pi() + ld)
    }
}

impl FlowEval<f64> {
    pub fn sample<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Vec<f64> {
        (0..n)
            .map(|_| self.forward(rng.sample::<f64, _>(StandardNormal)).0)
            .collect()
    }
}
