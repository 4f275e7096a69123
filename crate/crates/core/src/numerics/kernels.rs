//! Forward kernels shared by every backend, so that a recorded and an
//! eagerly evaluated computation produce bit-identical values.

use super::{NumericsError, OpKind, Tensor};

fn expect_vector(op: OpKind, t: &Tensor) -> Result<usize, NumericsError> {
    if t.rank() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op,
            detail: format!("expected a vector, got shape {:?}", t.shape()),
        });
    }
    Ok(t.len())
}

fn expect_same(op: OpKind, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor, NumericsError> {
    let m = expect_vector(OpKind::MatVec, x)?;
    if w.rank() != 2 || w.shape()[1] != m {
        return Err(NumericsError::ShapeMismatch {
            op: OpKind::MatVec,
            detail: format!("matrix {:?} times vector {:?}", w.shape(), x.shape()),
        });
    }
    let rows = w.shape()[0];
    let xs = x.data();
    let out = (0..rows).map(|i| dot(w.row(i), xs)).collect();
    Ok(Tensor::vector(out))
}

fn zip_with(
    op: OpKind,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericsError> {
    expect_same(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())
        .expect("map preserves shape")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    zip_with(OpKind::Add, a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    zip_with(OpKind::Sub, a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    zip_with(OpKind::Mul, a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    map(a, |v| c * v)
}

pub fn rsub(c: f64, a: &Tensor) -> Tensor {
    map(a, |v| c - v)
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    map(a, sigmoid_scalar)
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

pub fn log_softmax(a: &Tensor) -> Result<Tensor, NumericsError> {
    expect_vector(OpKind::LogSoftmax, a)?;
    if a.is_empty() {
        return Err(NumericsError::ShapeMismatch {
            op: OpKind::LogSoftmax,
            detail: "empty vector".into(),
        });
    }
    let lse = log_sum_exp(a.data());
    Ok(map(a, |v| v - lse))
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn concat(parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
    let mut out = Vec::new();
    for p in parts {
        expect_vector(OpKind::Concat, p)?;
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::vector(out))
}

pub fn row_select(table: &Tensor, index: usize) -> Result<Tensor, NumericsError> {
    if table.rank() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: OpKind::RowSelect,
            detail: format!("expected a matrix, got shape {:?}", table.shape()),
        });
    }
    if index >= table.shape()[0] {
        return Err(NumericsError::IndexOutOfRange {
            index,
            rows: table.shape()[0],
        });
    }
    Ok(Tensor::vector(table.row(index).to_vec()))
}
