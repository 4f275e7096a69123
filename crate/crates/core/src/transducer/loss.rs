//! Transducer alignment loss over a `T x (U+1) x (V+1)` lattice.
//!
//! Log-domain forward variables:
//!
//! ```text
//! alpha(0,0) = 0
//! alpha(t,u) = logsumexp(alpha(t-1,u) + blank(t-1,u), alpha(t,u-1) + label(t,u-1))
//! loss       = -(alpha(T-1,U) + blank(T-1,U))
//! ```
//!
//! The backward variables give the gradient with respect to every lattice
//! entry in closed form, which is what the recorded loss op uses.

use std::sync::Arc;

use crate::numerics::kernels::log_add_exp;
use crate::numerics::{Backend, CustomOp, NumericsError, Op, OpKind, Tensor};
use crate::{Error, Result};

/// Log-probabilities for every (frame, emitted-prefix, symbol) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLattice {
    frames: usize,
    prefixes: usize,
    symbols: usize,
    log_probs: Vec<f64>,
}

impl AlignmentLattice {
    /// `prefixes` is `U + 1`; `symbols` is `n_voc + 1` with blank last.
    pub fn new(frames: usize, prefixes: usize, symbols: usize, log_probs: Vec<f64>) -> Result<Self> {
        if frames == 0 || prefixes == 0 || symbols < 2 {
            return Err(Error::Config(format!(
                "lattice needs T >= 1, U+1 >= 1 and at least two symbols (got {frames}x{prefixes}x{symbols})"
            )));
        }
        if log_probs.len() != frames * prefixes * symbols {
            return Err(Error::Config(format!(
                "lattice data has {} entries, expected {}",
                log_probs.len(),
                frames * prefixes * symbols
            )));
        }
        Ok(Self {
            frames,
            prefixes,
            symbols,
            log_probs,
        })
    }

    /// Builds a lattice from rows ordered frame-major (`t * (U+1) + u`).
    pub fn from_rows(frames: usize, prefixes: usize, rows: &[&Tensor]) -> Result<Self> {
        let symbols = rows.first().map_or(0, |r| r.len());
        if rows.len() != frames * prefixes || rows.iter().any(|r| r.len() != symbols) {
            return Err(Error::Config("lattice rows are ragged or miscounted".into()));
        }
        let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
        Self::new(frames, prefixes, symbols, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn prefixes(&self) -> usize {
        self.prefixes
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn blank(&self) -> usize {
        self.symbols - 1
    }

    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * self.prefixes + u) * self.symbols + k]
    }

    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let start = (t * self.prefixes + u) * self.symbols;
        &self.log_probs[start..start + self.symbols]
    }

    /// Largest deviation of `sum(exp(row))` from one over all rows.
    pub fn normalization_error(&self) -> f64 {
        self.log_probs
            .chunks(self.symbols)
            .map(|r| (r.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        if targets.len() + 1 != self.prefixes {
            return Err(Error::Config(format!(
                "lattice has {} prefixes but {} targets",
                self.prefixes,
                targets.len()
            )));
        }
        if let Some(&label) = targets.iter().find(|&&k| k >= self.blank()) {
            return Err(Error::LabelOutOfRange {
                label,
                vocab: self.blank(),
            });
        }
        Ok(())
    }
}

/// Forward variables, indexed `t * (U+1) + u`.
pub fn forward_variables(lattice: &AlignmentLattice, targets: &[usize]) -> Result<Vec<f64>> {
    lattice.check_targets(targets)?;
    let (tn, un, blank) = (lattice.frames, lattice.prefixes, lattice.blank());
    let mut alpha = vec![f64::NEG_INFINITY; tn * un];
    for t in 0..tn {
        for u in 0..un {
            let idx = t * un + u;
            if t == 0 && u == 0 {
                alpha[idx] = 0.0;
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = alpha[idx - un] + lattice.get(t - 1, u, blank);
            }
            if u > 0 {
                acc = log_add_exp(acc, alpha[idx - 1] + lattice.get(t, u - 1, targets[u - 1]));
            }
            alpha[idx] = acc;
        }
    }
    Ok(alpha)
}

/// Backward variables: `beta(t,u)` is the log-probability of completing
/// the target from node `(t,u)`, including the final blank.
pub fn backward_variables(lattice: &AlignmentLattice, targets: &[usize]) -> Result<Vec<f64>> {
    lattice.check_targets(targets)?;
    let (tn, un, blank) = (lattice.frames, lattice.prefixes, lattice.blank());
    let mut beta = vec![f64::NEG_INFINITY; tn * un];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            let idx = t * un + u;
            if t == tn - 1 && u == un - 1 {
                beta[idx] = lattice.get(t, u, blank);
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < tn {
                acc = lattice.get(t, u, blank) + beta[idx + un];
            }
            if u + 1 < un {
                acc = log_add_exp(acc, lattice.get(t, u, targets[u]) + beta[idx + 1]);
            }
            beta[idx] = acc;
        }
    }
    Ok(beta)
}

/// Negative log-likelihood of `targets` summed over all alignments.
pub fn rnnt_loss(lattice: &AlignmentLattice, targets: &[usize]) -> Result<f64> {
    let alpha = forward_variables(lattice, targets)?;
    let (tn, un) = (lattice.frames, lattice.prefixes);
    Ok(-(alpha[tn * un - 1] + lattice.get(tn - 1, un - 1, lattice.blank())))
}

/// Loss and its gradient with respect to every lattice entry.
#[allow(clippy::needless_range_loop)]
pub fn rnnt_loss_and_grad(lattice: &AlignmentLattice, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let alpha = forward_variables(lattice, targets)?;
    let beta = backward_variables(lattice, targets)?;
    let (tn, un, vn, blank) = (lattice.frames, lattice.prefixes, lattice.symbols, lattice.blank());
    let log_total = beta[0];
    let mut grad = vec![0.0; tn * un * vn];
    for t in 0..tn {
        for u in 0..un {
            let idx = t * un + u;
            let base = idx * vn;
            let a = alpha[idx];
            if t + 1 < tn {
                grad[base + blank] = -(a + lattice.get(t, u, blank) + beta[idx + un] - log_total).exp();
            } else if u + 1 == un {
                grad[base + blank] = -(a + lattice.get(t, u, blank) - log_total).exp();
            }
            if u + 1 < un {
                let k = targets[u];
                grad[base + k] = -(a + lattice.get(t, u, k) + beta[idx + 1] - log_total).exp();
            }
        }
    }
    Ok((-log_total, grad))
}

/// Recorded loss node over the lattice rows.
#[derive(Debug)]
struct RnntLossOp {
    frames: usize,
    targets: Vec<usize>,
}

impl RnntLossOp {
    fn lattice(&self, inputs: &[&Tensor]) -> std::result::Result<AlignmentLattice, NumericsError> {
        AlignmentLattice::from_rows(self.frames, self.targets.len() + 1, inputs).map_err(|e| {
            NumericsError::ShapeMismatch {
                op: OpKind::Custom("rnnt_loss"),
                detail: e.to_string(),
            }
        })
    }
}

impl CustomOp for RnntLossOp {
    fn name(&self) -> &'static str {
        "rnnt_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, NumericsError> {
        let lattice = self.lattice(inputs)?;
        let loss = rnnt_loss(&lattice, &self.targets).map_err(|e| NumericsError::ShapeMismatch {
            op: OpKind::Custom("rnnt_loss"),
            detail: e.to_string(),
        })?;
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let lattice = self.lattice(inputs).expect("validated in forward");
        let (_, g) = rnnt_loss_and_grad(&lattice, &self.targets).expect("validated in forward");
        let upstream = grad.data()[0];
        g.chunks(lattice.symbols())
            .map(|row| Tensor::vector(row.iter().map(|v| v * upstream).collect()))
            .collect()
    }
}

/// Records the loss over `rows` (frame-major, `frames * (U+1)` log-prob rows).
pub fn rnnt_loss_node<B: Backend>(
    be: &mut B,
    rows: Vec<B::Value>,
    frames: usize,
    targets: &[usize],
) -> Result<B::Value> {
    let symbols = rows.first().map_or(0, |r| be.value(r).len());
    if symbols < 2 {
        return Err(Error::Config("lattice rows need at least two symbols".into()));
    }
    if let Some(&label) = targets.iter().find(|&&k| k + 1 >= symbols) {
        return Err(Error::LabelOutOfRange {
            label,
            vocab: symbols - 1,
        });
    }
    let op = RnntLossOp {
        frames,
        targets: targets.to_vec(),
    };
    Ok(be.apply(Op::Custom(Arc::new(op), rows))?)
}
