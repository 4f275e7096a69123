use std::collections::BTreeMap;
use std::sync::Arc;

use super::{kernels, Backend, NumericsError, Op, OpKind, Precision, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Option<Op<Var>>,
    requires_grad: bool,
    name: Option<String>,
}

/// Computation record: nodes in creation order, so operands always
/// precede the nodes that consume them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    mults: u64,
    leaf_grads: Vec<Option<Tensor>>,
    corrupt: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    /// Fault injection for verification tooling: the backward rule of
    /// `kind` is scaled by 1.5.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    fn push(&mut self, value: Arc<Tensor>, op: Option<Op<Var>>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable value. The tensor is shared, not copied.
    pub fn param(&mut self, name: impl Into<String>, value: Arc<Tensor>) -> Var {
        self.push(value, None, true, Some(name.into()))
    }

    /// Registers an unnamed leaf that gradients are tracked for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), None, true, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.as_ref().map_or(OpKind::Leaf, |op| op.kind())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all named leaves reached so far.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| {
                let name = node.name.as_ref()?;
                let g = self.leaf_grads.get(i)?.as_ref()?;
                Some((name.clone(), g.clone()))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Accumulates d(root)/d(leaf) into every reachable leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(NumericsError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                accumulate(&mut self.leaf_grads[i], g);
                continue;
            };
            let mut contributions = self.op_backward(op, &node.value, &g);
            if self.corrupt == Some(op.kind()) {
                for (_, c) in contributions.iter_mut() {
                    c.scale_in_place(1.5);
                }
            }
            for (target, c) in contributions {
                accumulate(&mut adjoints[target.0], c);
            }
        }
        Ok(())
    }

    fn needs(&self, v: &Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: &Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn op_backward(&self, op: &Op<Var>, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut res = Vec::new();
        match op {
            Op::MatVec(w, x) => {
                let wv = self.val(w);
                let xv = self.val(x);
                let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
                if self.needs(w) {
                    let mut gw = Vec::with_capacity(rows * cols);
                    for gi in g.data() {
                        gw.extend(xv.data().iter().map(|xj| gi * xj));
                    }
                    res.push((*w, Tensor::new(vec![rows, cols], gw).expect("outer product shape")));
                }
                if self.needs(x) {
                    let mut gx = vec![0.0; cols];
                    for (i, gi) in g.data().iter().enumerate() {
                        for (acc, wij) in gx.iter_mut().zip(wv.row(i)) {
                            *acc += wij * gi;
                        }
                    }
                    res.push((*x, Tensor::vector(gx)));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, kernels::scale(g, -1.0)));
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    res.push((*a, kernels::mul(g, self.val(b)).expect("shapes checked forward")));
                }
                if self.needs(b) {
                    res.push((*b, kernels::mul(g, self.val(a)).expect("shapes checked forward")));
                }
            }
            Op::Scale(a, c) => res.push((*a, kernels::scale(g, *c))),
            Op::RSub(_, a) => res.push((*a, kernels::scale(g, -1.0))),
            Op::Sigmoid(a) => {
                let d = out.data().iter().zip(g.data()).map(|(y, gi)| gi * y * (1.0 - y));
                res.push((*a, Tensor::vector(d.collect()).reshaped(out)));
            }
            Op::Tanh(a) => {
                let d = out.data().iter().zip(g.data()).map(|(y, gi)| gi * (1.0 - y * y));
                res.push((*a, Tensor::vector(d.collect()).reshaped(out)));
            }
            Op::Identity(a) => res.push((*a, g.clone())),
            Op::LogSoftmax(a) => {
                let total: f64 = g.sum();
                let d = out.data().iter().zip(g.data()).map(|(y, gi)| gi - y.exp() * total);
                res.push((*a, Tensor::vector(d.collect())));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(p).len();
                    res.push((*p, Tensor::vector(g.data()[offset..offset + n].to_vec())));
                    offset += n;
                }
            }
            Op::RowSelect(table, index) => {
                let tv = self.val(table);
                let mut gt = Tensor::zeros(tv.shape());
                let cols = tv.shape()[1];
                gt.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                res.push((*table, gt));
            }
            Op::Sum(a) => {
                let av = self.val(a);
                res.push((*a, Tensor::filled(av.shape(), g.data()[0])));
            }
            Op::Custom(custom, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.val(v)).collect();
                let grads = custom.backward(&values, out, g);
                res.extend(inputs.iter().copied().zip(grads));
            }
        }
        res.retain(|(v, _)| self.needs(v));
        res
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

impl Tensor {
    fn reshaped(self, like: &Tensor) -> Tensor {
        Tensor::new(like.shape().to_vec(), self.into_data()).expect("same element count")
    }
}

impl Backend for Tape {
    type Value = Var;

    fn precision(&self) -> Precision {
        self.precision
    }

    fn constant(&mut self, value: Tensor) -> Var {
        self.push(Arc::new(value), None, false, None)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op<Var>) -> Result<Var, NumericsError> {
        let (out, mults) = op.evaluate(|v| self.nodes[v.0].value.as_ref(), self.precision)?;
        self.mults += mults;
        let requires_grad = op.operands().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Arc::new(out), Some(op), requires_grad, None))
    }

    fn multiplications(&self) -> u64 {
        self.mults
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_of_product_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.param("a", Arc::new(Tensor::vector(vec![1.0, 2.0, 3.0])));
        let b = tape.param("b", Arc::new(Tensor::vector(vec![-4.0, 0.5, 7.0])));
        let p = tape.mul(&a, &b).unwrap();
        let root = tape.sum(&p).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[-4.0, 0.5, 7.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0, 3.0]);
        let named = tape.gradients();
        assert_eq!(named.len(), 2);
        assert_eq!(named["a"].data(), &[-4.0, 0.5, 7.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.sigmoid(&x).unwrap();
        let root = tape.sum(&y).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        let y = tape.sigmoid(&x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(NumericsError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = tape.scale(&x, 3.0).unwrap();
        let root = tape.sum(&y).unwrap();
        tape.backward(root).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.5]));
        let y = tape.mul(&c, &x).unwrap();
        let root = tape.sum(&y).unwrap();
        tape.backward(root).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn row_select_routes_gradient_to_row() {
        let mut tape = Tape::new();
        let table = tape.param("e", Arc::new(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap()));
        let r = tape.row_select(&table, 1).unwrap();
        let s = tape.scale(&r, 2.0).unwrap();
        let root = tape.sum(&s).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert_eq!(tape.op_kind(r), OpKind::RowSelect);
        assert_eq!(tape.op_kind(table), OpKind::Leaf);
    }
}
