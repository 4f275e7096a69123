//! Dense arrays and reverse-mode differentiation.
//!
//! Every differentiable computation in the crate is written against the
//! [`Backend`] trait. Two backends exist:
//!
//! - [`Tape`] records each operation so that [`Tape::backward`] can
//!   propagate adjoints in reverse creation order (used for training and
//!   gradient checks);
//! - [`Eager`] evaluates immediately and keeps nothing (used for decoding
//!   and timing).
//!
//! Both run the same forward kernels, so their values agree bit for bit.
//! Both also count scalar multiplications as they go: a matrix-vector
//! product of an `n x m` matrix costs `n * m`, an elementwise product of
//! two `n`-vectors costs `n`, scaling an `n`-vector by a constant costs
//! `n`; everything else is free.

mod eager;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use eager::Eager;
pub use gradcheck::{check_op_rules, finite_difference_check, GradCheck, GradCheckReport, OpRuleCheck};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: OpKind, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: OpKind },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("row index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("objective is not finite at a perturbed point of parameter {param}[{index}]")]
    NonFiniteObjective { param: String, index: usize },
}

/// Arithmetic width of a run. Values are always stored as `f64`; in
/// `F32` mode every op result is rounded to the nearest `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatVec,
    Add,
    Sub,
    Mul,
    Scale,
    RSub,
    Sigmoid,
    Tanh,
    Identity,
    LogSoftmax,
    Concat,
    RowSelect,
    Sum,
    Custom(&'static str),
}

impl OpKind {
    pub const BUILTIN: [OpKind; 13] = [
        OpKind::MatVec,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::RSub,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Identity,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::RowSelect,
        OpKind::Sum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatVec => "matvec",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::RSub => "rsub",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Identity => "identity",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::RowSelect => "row_select",
            OpKind::Sum => "sum",
            OpKind::Custom(name) => name,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::BUILTIN
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op kind `{s}`"))
    }
}

/// An operation whose forward and backward rules live outside this module.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError>;
    /// Adjoint contribution for each input, given the adjoint of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

/// One operation over value handles of a backend.
#[derive(Debug, Clone)]
pub enum Op<V> {
    MatVec(V, V),
    Add(V, V),
    Sub(V, V),
    Mul(V, V),
    Scale(V, f64),
    /// `c - a`, elementwise.
    RSub(f64, V),
    Sigmoid(V),
    Tanh(V),
    Identity(V),
    LogSoftmax(V),
    Concat(Vec<V>),
    RowSelect(V, usize),
    Sum(V),
    Custom(Arc<dyn CustomOp>, Vec<V>),
}

impl<V> Op<V> {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatVec(..) => OpKind::MatVec,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::RSub(..) => OpKind::RSub,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Identity(_) => OpKind::Identity,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Concat(_) => OpKind::Concat,
            Op::RowSelect(..) => OpKind::RowSelect,
            Op::Sum(_) => OpKind::Sum,
            Op::Custom(op, _) => OpKind::Custom(op.name()),
        }
    }

    pub fn operands(&self) -> Vec<&V> {
        match self {
            Op::MatVec(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::RSub(_, a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Identity(a)
            | Op::LogSoftmax(a)
            | Op::RowSelect(a, _)
            | Op::Sum(a) => vec![a],
            Op::Concat(parts) | Op::Custom(_, parts) => parts.iter().collect(),
        }
    }

    /// Evaluates the op given a way to look up operand values, returning
    /// the result and the number of scalar multiplications it cost.
    pub(crate) fn evaluate<'a>(
        &'a self,
        get: impl Fn(&'a V) -> &'a Tensor,
        precision: Precision,
    ) -> Result<(Tensor, u64), NumericsError> {
        let kind = self.kind();
        let (out, mults) = match self {
            Op::MatVec(w, x) => {
                let w = get(w);
                (kernels::matvec(w, get(x))?, w.len() as u64)
            }
            Op::Add(a, b) => (kernels::add(get(a), get(b))?, 0),
            Op::Sub(a, b) => (kernels::sub(get(a), get(b))?, 0),
            Op::Mul(a, b) => {
                let out = kernels::mul(get(a), get(b))?;
                let n = out.len() as u64;
                (out, n)
            }
            Op::Scale(a, c) => {
                let a = get(a);
                (kernels::scale(a, *c), a.len() as u64)
            }
            Op::RSub(c, a) => (kernels::rsub(*c, get(a)), 0),
            Op::Sigmoid(a) => (kernels::sigmoid(get(a)), 0),
            Op::Tanh(a) => (kernels::tanh(get(a)), 0),
            Op::Identity(a) => (get(a).clone(), 0),
            Op::LogSoftmax(a) => (kernels::log_softmax(get(a))?, 0),
            Op::Concat(parts) => {
                let values: Vec<&Tensor> = parts.iter().map(&get).collect();
                (kernels::concat(&values)?, 0)
            }
            Op::RowSelect(table, index) => (kernels::row_select(get(table), *index)?, 0),
            Op::Sum(a) => (Tensor::scalar(get(a).sum()), 0),
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(&get).collect();
                (op.forward(&values)?, 0)
            }
        };
        let out = round_to(out, precision);
        if !out.is_finite() {
            return Err(NumericsError::NonFinite { op: kind });
        }
        Ok((out, mults))
    }
}

pub(crate) fn round_to(mut t: Tensor, precision: Precision) -> Tensor {
    if precision == Precision::F32 {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    t
}

/// Evaluation strategy for differentiable code.
pub trait Backend {
    type Value: Clone;

    fn precision(&self) -> Precision;

    /// Introduces a value that gradients never flow into.
    fn constant(&mut self, value: Tensor) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn apply(&mut self, op: Op<Self::Value>) -> Result<Self::Value, NumericsError>;

    /// Scalar multiplications performed so far.
    fn multiplications(&self) -> u64;

    fn matvec(&mut self, w: &Self::Value, x: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::MatVec(w.clone(), x.clone()))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Add(a.clone(), b.clone()))
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Sub(a.clone(), b.clone()))
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Mul(a.clone(), b.clone()))
    }

    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Scale(a.clone(), c))
    }

    fn rsub(&mut self, c: f64, a: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::RSub(c, a.clone()))
    }

    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Sigmoid(a.clone()))
    }

    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Tanh(a.clone()))
    }

    fn identity(&mut self, a: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Identity(a.clone()))
    }

    fn log_softmax(&mut self, a: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::LogSoftmax(a.clone()))
    }

    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Concat(parts.to_vec()))
    }

    fn row_select(&mut self, table: &Self::Value, index: usize) -> Result<Self::Value, NumericsError> {
        self.apply(Op::RowSelect(table.clone(), index))
    }

    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value, NumericsError> {
        self.apply(Op::Sum(a.clone()))
    }

    fn zeros(&mut self, n: usize) -> Self::Value {
        self.constant(Tensor::zeros(&[n]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut e = Eager::new();
        let z = e.zeros(4);
        let y = e.sigmoid(&z).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn identity_matvec_leaves_operand_unchanged() {
        let mut e = Eager::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let eye = e.constant(eye);
        let x = e.constant(Tensor::vector(vec![0.3, -1.7, 2.5]));
        let y = e.matvec(&eye, &x).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(e.multiplications(), 9);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut e = Eager::new();
        let x = e.constant(Tensor::vector(vec![3.0, -2.0, 0.5, 10.0, -40.0]));
        let y = e.log_softmax(&x).unwrap();
        let total: f64 = y.data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut e = Eager::new();
        let a = e.zeros(3);
        let b = e.zeros(4);
        assert!(matches!(
            e.add(&a, &b),
            Err(NumericsError::ShapeMismatch { op: OpKind::Add, .. })
        ));
        let w = e.constant(Tensor::zeros(&[2, 3]));
        assert!(e.matvec(&w, &b).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut e = Eager::new();
        let a = e.constant(Tensor::vector(vec![f64::MAX, 1.0]));
        assert_eq!(
            e.scale(&a, 10.0).unwrap_err(),
            NumericsError::NonFinite { op: OpKind::Scale }
        );
    }

    #[test]
    fn multiplication_ledger() {
        let mut e = Eager::new();
        let w = e.constant(Tensor::zeros(&[4, 3]));
        let x = e.zeros(3);
        let y = e.matvec(&w, &x).unwrap();
        let z = e.mul(&y, &y).unwrap();
        let s = e.scale(&z, 0.5).unwrap();
        let r = e.rsub(1.0, &s).unwrap();
        let q = e.add(&r, &s).unwrap();
        let _ = e.sigmoid(&q).unwrap();
        assert_eq!(e.multiplications(), 12 + 4 + 4);
    }

    #[test]
    fn f32_mode_rounds_results() {
        let mut e = Eager::with_precision(Precision::F32);
        let x = e.constant(Tensor::vector(vec![0.1]));
        let y = e.identity(&x).unwrap();
        assert_eq!(y.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn op_kind_names_round_trip() {
        for kind in OpKind::BUILTIN {
            assert_eq!(kind.name().parse::<OpKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<OpKind>().is_err());
    }
}
