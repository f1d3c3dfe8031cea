//! Differentiation, optimization and the small dense network used by every
//! trainable part of the library.

mod adam;
pub mod check;
mod mlp;
mod real;
mod tape;

pub use adam::{adam_step, AdamState};
pub use mlp::{param_count, Activation, Mlp, MlpCache};
pub use real::{log_sum_exp, sigmoid, softplus, softplus_inv, Real};
pub use tape::{Gradient, Op, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, flat vector of unconstrained parameters with its gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        let grad = vec![0.0; values.len()];
        Self {
            name: name.into(),
            values,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.values.len(), 0.0);
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().chain(&self.grad).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("parameter block `{}`", self.name)))
        }
    }
}

/// Value and per-block gradients of `loss` recorded on a fresh tape.
///
/// The closure receives one `Var` vector per block, in order.
pub fn grad<F>(blocks: &[ParamBlock], loss: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: for<'t> Fn(&'t Tape, &[Vec<Var<'t>>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Vec<Var<'_>>> = blocks.iter().map(|b| tape.vars(&b.values)).collect();
    let out = loss(&tape, &vars);
    tape.check_finite()?;
    let g = tape.gradient(out);
    Ok((out.value(), vars.iter().map(|v| g.wrt(v)).collect()))
}
