//! Wengert-list reverse-mode differentiation for scalar computations.
//!
//! Every operation on a [`Var`] appends one node holding at most two parent
//! indices and the local partial derivatives. A reverse sweep over the list
//! accumulates adjoints.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::real::{sigmoid, softplus, softplus_inv, Real};
use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Shift,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Recip,
    Powi,
    SoftplusInv,
}

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    da: f64,
    db: f64,
    value: f64,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes. Requires that no `Var` borrows the tape.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Op::Leaf, value, NONE, 0.0, NONE, 0.0);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    #[inline]
    fn push(&self, op: Op, value: f64, a: u32, da: f64, b: u32, db: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            a,
            b,
            da,
            db,
            value,
            op,
        });
        idx
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        self.backprop(&[(output, 1.0)])
    }

    /// Reverse sweep seeded with arbitrary adjoints on several outputs.
    pub fn backprop(&self, seeds: &[(Var<'_>, f64)]) -> Gradient {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        let mut start = 0;
        for (v, s) in seeds {
            adj[v.idx as usize] += s;
            start = start.max(v.idx as usize + 1);
        }
        for i in (0..start).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.a != NONE {
                adj[n.a as usize] += n.da * g;
            }
            if n.b != NONE {
                adj[n.b as usize] += n.db * g;
            }
        }
        Gradient(adj)
    }

    /// First recorded operation whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, Op)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op))
    }

    /// Error describing the first non-finite intermediate, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some((i, op)) => Err(Error::NonFinite(format!("tape node {i} produced by operation {op:?}"))),
        }
    }
}

pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn get(&self, v: &Var<'_>) -> f64 {
        self.0[v.idx as usize]
    }

    pub fn wrt(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.get(v)).collect()
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    #[inline]
    fn unary(self, op: Op, value: f64, d: f64) -> Self {
        let idx = self.tape.push(op, value, self.idx, d, NONE, 0.0);
        Var {
            tape: self.tape,
            idx,
            val: value,
        }
    }

    #[inline]
    fn binary(self, other: Self, op: Op, value: f64, da: f64, db: f64) -> Self {
        let idx = self.tape.push(op, value, self.idx, da, other.idx, db);
        Var {
            tape: self.tape,
            idx,
            val: value,
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        let v = self.val * inv;
        self.binary(rhs, Op::Div, v, inv, -v * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(Op::Shift, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(Op::Shift, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(Op::Scale, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(Op::Scale, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(Op::Shift, self - rhs.val, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self / rhs.val;
        rhs.unary(Op::Div, v, -v / rhs.val)
    }
}

impl Real for Var<'_> {
    #[inline]
    fn value(&self) -> f64 {
        self.val
    }

    fn lift(&self, c: f64) -> Self {
        self.tape.var(c)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(Op::Exp, e, e)
    }

    fn ln(self) -> Self {
        self.unary(Op::Ln, self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(Op::Sqrt, s, 0.5 / s)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(Op::Tanh, t, 1.0 - t * t)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.unary(Op::Sigmoid, s, s * (1.0 - s))
    }

    fn softplus(self) -> Self {
        self.unary(Op::Softplus, softplus(self.val), sigmoid(self.val))
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.val;
        self.unary(Op::Recip, r, -r * r)
    }

    fn powi(self, n: i32) -> Self {
        let d = n as f64 * self.val.powi(n - 1);
        self.unary(Op::Powi, self.val.powi(n), d)
    }

    fn softplus_inv(self) -> Self {
        let d = -1.0 / (-self.val).exp_m1();
        self.unary(Op::SoftplusInv, softplus_inv(self.val), d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let z = x * y + x.exp() / y;
        let g = tape.gradient(z);
        assert!((g.get(&x) - (-2.0 + 3.0f64.exp() / -2.0)).abs() < 1e-12);
        assert!((g.get(&y) - (3.0 - 3.0f64.exp() / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn reused_variable_accumulates() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let z = x * x * x;
        assert!((tape.gradient(z).get(&x) - 3.0 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_node_is_named() {
        let tape = Tape::new();
        let x = tape.var(-1.0);
        let _ = x.ln();
        let err = tape.check_finite().unwrap_err().to_string();
        assert!(err.contains("Ln"), "{err}");
    }

    #[test]
    fn scalar_left_operands() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let z = 1.0 - x + 3.0 / x + 2.0 * x;
        let g = tape.gradient(z);
        assert!((z.value() - (1.0 - 2.0 + 1.5 + 4.0)).abs() < 1e-15);
        assert!((g.get(&x) - (-1.0 - 0.75 + 2.0)).abs() < 1e-15);
    }
}
