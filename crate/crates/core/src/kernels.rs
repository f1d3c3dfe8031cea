//! Covariance functions and jittered Gram factorizations.
//!
//! Inputs are row-major design matrices (`N x D`, one point per row). All
//! positive hyperparameters are stored as logarithms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    SeArd {
        log_lengthscales: Vec<f64>,
        log_variance: f64,
    },
    Periodic {
        log_lengthscale: f64,
        log_period: f64,
        log_variance: f64,
    },
    Linear {
        log_variance: f64,
        offset: f64,
    },
    Sum {
        children: Vec<KernelSpec>,
    },
}

/// Gradients of `Σ_ij G_ij k(x1_i, x2_j)`.
#[derive(Clone, Debug)]
pub struct KernelGrad {
    pub params: Vec<f64>,
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
}

impl KernelSpec {
    pub fn se_ard(lengthscales: &[f64], variance: f64) -> Self {
        KernelSpec::SeArd {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        }
    }

    pub fn periodic(lengthscale: f64, period: f64, variance: f64) -> Self {
        KernelSpec::Periodic {
            log_lengthscale: lengthscale.ln(),
            log_period: period.ln(),
            log_variance: variance.ln(),
        }
    }

    pub fn linear(variance: f64, offset: f64) -> Self {
        KernelSpec::Linear {
            log_variance: variance.ln(),
            offset,
        }
    }

    pub fn sum(children: Vec<KernelSpec>) -> Self {
        KernelSpec::Sum { children }
    }

    /// Checks structure and, when `dim` is given, input dimension.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        match self {
            KernelSpec::SeArd { log_lengthscales, .. } => {
                if let Some(d) = dim {
                    if log_lengthscales.len() != d {
                        return Err(Error::DimensionMismatch {
                            context: "SE-ARD lengthscales",
                            expected: d,
                            got: log_lengthscales.len(),
                        });
                    }
                }
            }
            KernelSpec::Sum { children } => {
                if children.is_empty() {
                    return Err(Error::InvalidArgument("sum kernel needs a child".into()));
                }
                for c in children {
                    c.validate(dim)?;
                }
            }
            _ => {}
        }
        if self.params().iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("kernel parameters".into()))
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            KernelSpec::SeArd { log_lengthscales, .. } => log_lengthscales.len() + 1,
            KernelSpec::Periodic { .. } => 3,
            KernelSpec::Linear { .. } => 2,
            KernelSpec::Sum { children } => children.iter().map(|c| c.num_params()).sum(),
        }
    }

    /// Flat unconstrained parameter vector.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.push_params(&mut out);
        out
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        match self {
            KernelSpec::SeArd {
                log_lengthscales,
                log_variance,
            } => {
                out.extend_from_slice(log_lengthscales);
                out.push(*log_variance);
            }
            KernelSpec::Periodic {
                log_lengthscale,
                log_period,
                log_variance,
            } => out.extend_from_slice(&[*log_lengthscale, *log_period, *log_variance]),
            KernelSpec::Linear { log_variance, offset } => out.extend_from_slice(&[*log_variance, *offset]),
            KernelSpec::Sum { children } => children.iter().for_each(|c| c.push_params(out)),
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "kernel parameters",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        self.take_params(values);
        Ok(())
    }

    fn take_params<'a>(&mut self, values: &'a [f64]) -> &'a [f64] {
        match self {
            KernelSpec::SeArd {
                log_lengthscales,
                log_variance,
            } => {
                let d = log_lengthscales.len();
                log_lengthscales.copy_from_slice(&values[..d]);
                *log_variance = values[d];
                &values[d + 1..]
            }
            KernelSpec::Periodic {
                log_lengthscale,
                log_period,
                log_variance,
            } => {
                *log_lengthscale = values[0];
                *log_period = values[1];
                *log_variance = values[2];
                &values[3..]
            }
            KernelSpec::Linear { log_variance, offset } => {
                *log_variance = values[0];
                *offset = values[1];
                &values[2..]
            }
            KernelSpec::Sum { children } => {
                let mut rest = values;
                for c in children {
                    rest = c.take_params(rest);
                }
                rest
            }
        }
    }

    /// `k(a, b)` for two points.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::SeArd {
                log_lengthscales,
                log_variance,
            } => {
                let r2: f64 = a
                    .iter()
                    .zip(b)
                    .zip(log_lengthscales)
                    .map(|((x, y), ll)| ((x - y) * (-ll).exp()).powi(2))
                    .sum();
                (log_variance - 0.5 * r2).exp()
            }
            KernelSpec::Periodic {
                log_lengthscale,
                log_period,
                log_variance,
            } => {
                let p = log_period.exp();
                let s: f64 = a.iter().zip(b).map(|(x, y)| (PI * (x - y) / p).sin().powi(2)).sum();
                (log_variance - 2.0 * s * (-2.0 * log_lengthscale).exp()).exp()
            }
            KernelSpec::Linear { log_variance, offset } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| (x - offset) * (y - offset)).sum();
                log_variance.exp() * dot
            }
            KernelSpec::Sum { children } => children.iter().map(|c| c.eval(a, b)).sum(),
        }
    }

    fn check_inputs(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
        if x1.ncols() != x2.ncols() {
            return Err(Error::DimensionMismatch {
                context: "kernel input columns",
                expected: x1.ncols(),
                got: x2.ncols(),
            });
        }
        self.validate(Some(x1.ncols()))?;
        if x1.iter().chain(x2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel inputs".into()));
        }
        Ok(())
    }

    pub fn gram(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(x1, x2)?;
        let rows1: Vec<Vec<f64>> = x1.row_iter().map(|r| r.iter().cloned().collect()).collect();
        let rows2: Vec<Vec<f64>> = x2.row_iter().map(|r| r.iter().cloned().collect()).collect();
        Ok(DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
            self.eval(&rows1[i], &rows2[j])
        }))
    }

    /// `k(x_i, x_i)` for every row.
    pub fn diag(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.validate(Some(x.ncols()))?;
        Ok(DVector::from_iterator(
            x.nrows(),
            x.row_iter().map(|r| {
                let v: Vec<f64> = r.iter().cloned().collect();
                self.eval(&v, &v)
            }),
        ))
    }

    /// Gradients of `Σ_ij G_ij k(x1_i, x2_j)` with respect to parameters
    /// and both input matrices.
    pub fn backward(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<KernelGrad> {
        self.check_inputs(x1, x2)?;
        if g.shape() != (x1.nrows(), x2.nrows()) {
            return Err(Error::DimensionMismatch {
                context: "kernel adjoint rows",
                expected: x1.nrows(),
                got: g.nrows(),
            });
        }
        let mut out = KernelGrad {
            params: vec![0.0; self.num_params()],
            x1: DMatrix::zeros(x1.nrows(), x1.ncols()),
            x2: DMatrix::zeros(x2.nrows(), x2.ncols()),
        };
        self.accumulate(x1, x2, g, &mut out, 0);
        Ok(out)
    }

    /// Gradients of `Σ_i g_i k(x_i, x_i)`.
    pub fn diag_backward(&self, x: &DMatrix<f64>, g: &DVector<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.validate(Some(x.ncols()))?;
        let mut params = vec![0.0; self.num_params()];
        let mut gx = DMatrix::zeros(x.nrows(), x.ncols());
        self.accumulate_diag(x, g, &mut params, &mut gx, 0);
        Ok((params, gx))
    }

    fn accumulate(
        &self,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        g: &DMatrix<f64>,
        out: &mut KernelGrad,
        off: usize,
    ) -> usize {
        let (n1, n2, d) = (x1.nrows(), x2.nrows(), x1.ncols());
        match self {
            KernelSpec::SeArd {
                log_lengthscales,
                log_variance,
            } => {
                let inv_l2: Vec<f64> = log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect();
                for i in 0..n1 {
                    for j in 0..n2 {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        let mut r2 = 0.0;
                        for k in 0..d {
                            let dx = x1[(i, k)] - x2[(j, k)];
                            r2 += dx * dx * inv_l2[k];
                        }
                        let kv = (log_variance - 0.5 * r2).exp() * gij;
                        out.params[off + d] += kv;
                        for k in 0..d {
                            let dx = x1[(i, k)] - x2[(j, k)];
                            out.params[off + k] += kv * dx * dx * inv_l2[k];
                            let gx = -kv * dx * inv_l2[k];
                            out.x1[(i, k)] += gx;
                            out.x2[(j, k)] -= gx;
                        }
                    }
                }
                off + d + 1
            }
            KernelSpec::Periodic {
                log_lengthscale,
                log_period,
                log_variance,
            } => {
                let p = log_period.exp();
                let il2 = (-2.0 * log_lengthscale).exp();
                for i in 0..n1 {
                    for j in 0..n2 {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        let mut s2 = 0.0;
                        let mut scd = 0.0;
                        for k in 0..d {
                            let dx = x1[(i, k)] - x2[(j, k)];
                            let (s, c) = (PI * dx / p).sin_cos();
                            s2 += s * s;
                            scd += s * c * dx;
                        }
                        let kv = (log_variance - 2.0 * s2 * il2).exp() * gij;
                        out.params[off] += kv * 4.0 * s2 * il2;
                        out.params[off + 1] += kv * 4.0 * PI * il2 / p * scd;
                        out.params[off + 2] += kv;
                        for k in 0..d {
                            let dx = x1[(i, k)] - x2[(j, k)];
                            let (s, c) = (PI * dx / p).sin_cos();
                            let gx = -kv * 4.0 * PI * il2 / p * s * c;
                            out.x1[(i, k)] += gx;
                            out.x2[(j, k)] -= gx;
                        }
                    }
                }
                off + 3
            }
            KernelSpec::Linear { log_variance, offset } => {
                let v = log_variance.exp();
                for i in 0..n1 {
                    for j in 0..n2 {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        let mut dot = 0.0;
                        for k in 0..d {
                            let (a, b) = (x1[(i, k)] - offset, x2[(j, k)] - offset);
                            dot += a * b;
                            out.params[off + 1] -= gij * v * (a + b);
                            out.x1[(i, k)] += gij * v * b;
                            out.x2[(j, k)] += gij * v * a;
                        }
                        out.params[off] += gij * v * dot;
                    }
                }
                off + 2
            }
            KernelSpec::Sum { children } => children.iter().fold(off, |o, c| c.accumulate(x1, x2, g, out, o)),
        }
    }

    fn accumulate_diag(
        &self,
        x: &DMatrix<f64>,
        g: &DVector<f64>,
        params: &mut [f64],
        gx: &mut DMatrix<f64>,
        off: usize,
    ) -> usize {
        match self {
            KernelSpec::SeArd {
                log_lengthscales,
                log_variance,
            } => {
                params[off + log_lengthscales.len()] += log_variance.exp() * g.sum();
                off + log_lengthscales.len() + 1
            }
            KernelSpec::Periodic { log_variance, .. } => {
                params[off + 2] += log_variance.exp() * g.sum();
                off + 3
            }
            KernelSpec::Linear { log_variance, offset } => {
                let v = log_variance.exp();
                for i in 0..x.nrows() {
                    let mut sq = 0.0;
                    for k in 0..x.ncols() {
                        let a = x[(i, k)] - offset;
                        sq += a * a;
                        params[off + 1] -= g[i] * v * 2.0 * a;
                        gx[(i, k)] += g[i] * v * 2.0 * a;
                    }
                    params[off] += g[i] * v * sq;
                }
                off + 2
            }
            KernelSpec::Sum { children } => children.iter().fold(off, |o, c| c.accumulate_diag(x, g, params, gx, o)),
        }
    }
}

/// Jitter levels relative to the mean Gram diagonal, tried in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule {
    pub levels: Vec<f64>,
}

impl Default for JitterSchedule {
    fn default() -> Self {
        Self {
            levels: (0..7).map(|k| 1e-8 * 10f64.powi(k)).collect(),
        }
    }
}

impl JitterSchedule {
    /// Tries the unjittered matrix before escalating.
    pub fn with_exact_first() -> Self {
        let mut s = Self::default();
        s.levels.insert(0, 0.0);
        s
    }

    /// Starts at `floor` and escalates ×10 up to the default ceiling.
    pub fn from_floor(floor: f64) -> Self {
        let ceiling = Self::default().max_level();
        let mut levels = vec![floor];
        while levels[levels.len() - 1] * 10.0 <= ceiling * (1.0 + 1e-9) {
            levels.push(levels[levels.len() - 1] * 10.0);
        }
        Self { levels }
    }

    pub fn max_level(&self) -> f64 {
        self.levels.iter().cloned().fold(0.0, f64::max)
    }
}

/// A Gram matrix together with the Cholesky factor of `K + jitter I`.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub matrix: DMatrix<f64>,
    pub jitter: f64,
    /// Relative level from the schedule that succeeded.
    pub level: f64,
    chol: Cholesky<f64, Dyn>,
}

/// Cholesky that also rejects pivots below the round-off floor.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let max_diag = m.diagonal().iter().cloned().fold(0.0, f64::max);
    let floor = n as f64 * f64::EPSILON * max_diag;
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    if (0..n).all(|i| l[(i, i)] * l[(i, i)] > floor && l[(i, i)].is_finite()) {
        Some(chol)
    } else {
        None
    }
}

impl GramMatrix {
    pub fn factorize(matrix: DMatrix<f64>, schedule: &JitterSchedule) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                context: "Gram matrix columns",
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gram matrix".into()));
        }
        let n = matrix.nrows();
        let mean_diag = if n == 0 { 0.0 } else { matrix.diagonal().mean() };
        for &level in &schedule.levels {
            let jitter = level * mean_diag;
            let mut m = matrix.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = robust_cholesky(&m) {
                return Ok(Self {
                    matrix,
                    jitter,
                    level,
                    chol,
                });
            }
        }
        Err(Error::DegenerateKernel {
            max_jitter: schedule.max_level() * mean_diag,
        })
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Lower Cholesky factor of the jittered matrix.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        self.chol.ln_determinant()
    }
}

/// `gram(x, x)` factorized along `schedule`.
pub fn gram_with_jitter(kernel: &KernelSpec, x: &DMatrix<f64>, schedule: &JitterSchedule) -> Result<GramMatrix> {
    GramMatrix::factorize(kernel.gram(x, x)?, schedule)
}
