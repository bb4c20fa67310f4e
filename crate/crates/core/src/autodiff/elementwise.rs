//! Pointwise operations and scalar reductions.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Abs,
    Relu,
    Sigmoid,
    Log,
    Exp,
    ScalarMul(f64),
    ScalarAdd(f64),
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sums a gradient down to a scalar when the operand was broadcast.
fn reduce_generic<T: Real>(g: Vec<T>, len: usize) -> Vec<T> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}

impl<T: Real> Tape<T> {
    /// Binary pointwise op. Shapes must match unless one operand holds a
    /// single value, which is then broadcast.
    pub fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (shape, n) = if av.shape() == bv.shape() || bv.len() == 1 {
            (av.shape().to_vec(), av.len())
        } else if av.len() == 1 {
            (bv.shape().to_vec(), bv.len())
        } else {
            return Err(Error::shape(
                match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                },
                av.shape(),
                bv.shape(),
            ));
        };
        let at = |i: usize| av.data()[if av.len() == 1 { 0 } else { i }];
        let bt = |i: usize| bv.data()[if bv.len() == 1 { 0 } else { i }];
        let data: Vec<T> = (0..n)
            .map(|i| match op {
                BinaryOp::Add => at(i) + bt(i),
                BinaryOp::Sub => at(i) - bt(i),
                BinaryOp::Mul => at(i) * bt(i),
            })
            .collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let (x, y) = (&ctx.inputs[0], &ctx.inputs[1]);
                let g = ctx.grad;
                let xi = |i: usize| x.data()[if x.len() == 1 { 0 } else { i }];
                let yi = |i: usize| y.data()[if y.len() == 1 { 0 } else { i }];
                let ga = ctx.needs[0].then(|| {
                    let full: Vec<T> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * yi(i)).collect(),
                    };
                    reduce_generic(full, x.len())
                });
                let gb = ctx.needs[1].then(|| {
                    let full: Vec<T> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|&gi| -gi).collect(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * xi(i)).collect(),
                    };
                    reduce_generic(full, y.len())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&self, op: UnaryOp, a: Var) -> Result<Var> {
        let av = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = av.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::invalid(
                    "log",
                    format!("non-positive argument {bad}"),
                ));
            }
        }
        let f = move |x: T| -> T {
            match op {
                UnaryOp::Abs => x.abs(),
                UnaryOp::Relu => x.max(T::zero()),
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Log => x.ln(),
                UnaryOp::Exp => x.exp(),
                UnaryOp::ScalarMul(c) => x * T::lit(c),
                UnaryOp::ScalarAdd(c) => x + T::lit(c),
            }
        };
        let out = Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect())?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx.grad;
                let d: Vec<T> = (0..g.len())
                    .map(|i| {
                        let dydx = match op {
                            UnaryOp::Abs => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else if x[i] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Sigmoid => y[i] * (T::one() - y[i]),
                            UnaryOp::Log => T::one() / x[i],
                            UnaryOp::Exp => y[i],
                            UnaryOp::ScalarMul(c) => T::lit(c),
                            UnaryOp::ScalarAdd(_) => T::one(),
                        };
                        g[i] * dydx
                    })
                    .collect();
                vec![Some(d)]
            }),
        ))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::ScalarMul(c), a)
    }

    pub fn shift(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::ScalarAdd(c), a)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s: T = av.data().iter().copied().sum();
        let n = av.len();
        Ok(self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        ))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }
}
