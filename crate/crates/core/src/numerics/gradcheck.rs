use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Backend, NumericsError, OpKind, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry, with its flat index.
    pub worst_param: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Central-difference gradient checker.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, floor)`,
/// where `a` is the analytic and `n` the numeric derivative. The floor
/// keeps derivatives that are zero up to rounding from dominating.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Backward rule to corrupt on the analytic pass (fault injection).
    pub corrupt: Option<OpKind>,
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        Self {
            step,
            tol,
            floor: 1e-3,
            corrupt: None,
        }
    }

    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(self.floor);
        (analytic - numeric).abs() / scale
    }

    /// `f` builds a scalar objective on the tape from the bound parameters.
    pub fn run<F, E>(
        &self,
        mut f: F,
        params: &BTreeMap<String, Tensor>,
    ) -> Result<GradCheckReport, E>
    where
        F: FnMut(&mut Tape, &BTreeMap<String, Var>) -> Result<Var, E>,
        E: From<NumericsError>,
    {
        if self.step.is_nan() || self.step <= 0.0 {
            return Err(NumericsError::InvalidStep(self.step).into());
        }

        let mut tape = Tape::new();
        if let Some(kind) = self.corrupt {
            tape.corrupt_backward(kind);
        }
        let vars = bind(&mut tape, params);
        let root = f(&mut tape, &vars)?;
        tape.backward(root)?;
        let analytic = tape.gradients();

        let mut evaluate = |perturbed: &BTreeMap<String, Tensor>| -> Result<f64, E> {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, perturbed);
            let root = f(&mut tape, &vars)?;
            Ok(tape.value(&root).data()[0])
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            tol: self.tol,
        };
        let mut work = params.clone();
        for (name, tensor) in params {
            let zero = Tensor::zeros(tensor.shape());
            let grad = analytic.get(name).unwrap_or(&zero);
            for i in 0..tensor.len() {
                let original = tensor.data()[i];
                work.get_mut(name).expect("same keys").data_mut()[i] = original + self.step;
                let plus = evaluate(&work)?;
                work.get_mut(name).expect("same keys").data_mut()[i] = original - self.step;
                let minus = evaluate(&work)?;
                work.get_mut(name).expect("same keys").data_mut()[i] = original;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(NumericsError::NonFiniteObjective {
                        param: name.clone(),
                        index: i,
                    }
                    .into());
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[i];
                let err = self.relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst_param.is_none() {
                    report.max_rel_error = err;
                    report.worst_param = Some((name.clone(), i));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

fn bind(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(name.clone(), Arc::new(t.clone()))))
        .collect()
}

/// Convenience wrapper around [`GradCheck::run`].
pub fn finite_difference_check<F, E>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &BTreeMap<String, Var>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    GradCheck::new(step, tol).run(f, params)
}

/// Result of checking one op's backward rule in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRuleCheck {
    pub kind: OpKind,
    /// Worse of the two reductions (see [`check_op_rules`]).
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Checks every built-in op's backward rule on random inputs of shapes
/// up to 8x8. Each op output is reduced to a scalar twice, once through
/// `sum(w * out)` and once through a `1 x n` matrix-vector product; an op
/// is flagged only when both reductions fail, so a broken rule in one
/// reduction does not implicate the ops checked through it. The scalar
/// output of `sum` needs no second reduction.
pub fn check_op_rules(corrupt: Option<OpKind>, tol: f64, seed: u64) -> Vec<OpRuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck::new(1e-6, tol);
    check.corrupt = corrupt;
    OpKind::BUILTIN
        .iter()
        .map(|&kind| {
            let n = rng.random_range(2..=8);
            let r = rng.random_range(2..=8);
            let mut params = BTreeMap::new();
            let mut put = |name: &str, t: Tensor| {
                params.insert(name.to_string(), t);
            };
            match kind {
                OpKind::MatVec => {
                    put("w", Tensor::matrix(r, n, uniform(&mut rng, r * n)).expect("sizes agree"));
                    put("a", Tensor::vector(uniform(&mut rng, n)));
                }
                OpKind::RowSelect => {
                    put("w", Tensor::matrix(r, n, uniform(&mut rng, r * n)).expect("sizes agree"));
                }
                OpKind::Add | OpKind::Sub | OpKind::Mul => {
                    put("a", Tensor::vector(uniform(&mut rng, n)));
                    put("b", Tensor::vector(uniform(&mut rng, n)));
                }
                OpKind::Concat => {
                    put("a", Tensor::vector(uniform(&mut rng, n)));
                    put("b", Tensor::vector(uniform(&mut rng, r)));
                }
                _ => put("a", Tensor::vector(uniform(&mut rng, n))),
            }
            let c = rng.random_range(-2.0..2.0);
            let index = rng.random_range(0..r);
            let apply = |tape: &mut Tape, v: &BTreeMap<String, Var>| -> Result<Var, NumericsError> {
                match kind {
                    OpKind::MatVec => tape.matvec(&v["w"], &v["a"]),
                    OpKind::RowSelect => tape.row_select(&v["w"], index),
                    OpKind::Add => tape.add(&v["a"], &v["b"]),
                    OpKind::Sub => tape.sub(&v["a"], &v["b"]),
                    OpKind::Mul => tape.mul(&v["a"], &v["b"]),
                    OpKind::Concat => tape.concat(&[v["a"], v["b"]]),
                    OpKind::Scale => tape.scale(&v["a"], c),
                    OpKind::RSub => tape.rsub(c, &v["a"]),
                    OpKind::Sigmoid => tape.sigmoid(&v["a"]),
                    OpKind::Tanh => tape.tanh(&v["a"]),
                    OpKind::Identity => tape.identity(&v["a"]),
                    OpKind::LogSoftmax => tape.log_softmax(&v["a"]),
                    OpKind::Sum => tape.sum(&v["a"]),
                    OpKind::Leaf | OpKind::Custom(_) => unreachable!("not built in"),
                }
            };
            let width = match kind {
                OpKind::MatVec => r,
                OpKind::Concat => n + r,
                OpKind::Sum => 1,
                _ => n,
            };
            let w = uniform(&mut rng, width);
            let by_sum = check.run(
                |tape, v| {
                    let out = apply(tape, v)?;
                    let w = if kind == OpKind::Sum {
                        Tensor::scalar(w[0])
                    } else {
                        Tensor::vector(w.clone())
                    };
                    let w = tape.constant(w);
                    let p = tape.mul(&w, &out)?;
                    tape.sum(&p)
                },
                &params,
            );
            let by_matvec = check.run(
                |tape, v| {
                    let out = apply(tape, v)?;
                    if kind == OpKind::Sum {
                        return Ok(out);
                    }
                    let w = tape.constant(Tensor::matrix(1, width, w.clone()).expect("sizes agree"));
                    tape.matvec(&w, &out)
                },
                &params,
            );
            let err = |r: Result<GradCheckReport, NumericsError>| r.map_or(f64::INFINITY, |r| r.max_rel_error);
            let (e1, e2) = (err(by_sum), err(by_matvec));
            OpRuleCheck {
                kind,
                max_rel_error: e1.max(e2),
                passed: e1 <= tol || e2 <= tol,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(tape: &mut Tape, vars: &BTreeMap<String, Var>) -> Result<Var, NumericsError> {
        // x^T A x + c . x
        let ax = tape.matvec(&vars["A"], &vars["x"])?;
        let xax = tape.mul(&vars["x"], &ax)?;
        let cx = tape.mul(&vars["c"], &vars["x"])?;
        let s = tape.add(&xax, &cx)?;
        tape.sum(&s)
    }

    fn quadratic_params() -> BTreeMap<String, Tensor> {
        let mut p = BTreeMap::new();
        p.insert(
            "A".to_string(),
            Tensor::matrix(3, 3, vec![2.0, 0.5, -1.0, 0.5, 1.5, 0.25, -1.0, 0.25, 3.0]).unwrap(),
        );
        p.insert("x".to_string(), Tensor::vector(vec![0.7, -1.2, 0.4]));
        p.insert("c".to_string(), Tensor::vector(vec![1.0, -2.0, 0.5]));
        p
    }

    #[test]
    fn quadratic_form_is_exact() {
        let report = finite_difference_check(quadratic, &quadratic_params(), 1e-3, 1e-9).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 15);
    }

    #[test]
    fn corrupted_rule_names_worst_parameter() {
        let mut check = GradCheck::new(1e-5, 1e-6);
        check.corrupt = Some(OpKind::Mul);
        let report = check.run(quadratic, &quadratic_params()).unwrap();
        assert!(!report.passed());
        assert!(report.worst_param.is_some());
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let err = finite_difference_check(quadratic, &quadratic_params(), 0.0, 1e-6).unwrap_err();
        assert_eq!(err, NumericsError::InvalidStep(0.0));
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut p = BTreeMap::new();
        p.insert("x".to_string(), Tensor::vector(vec![700.0]));
        let f = |tape: &mut Tape, vars: &BTreeMap<String, Var>| -> Result<Var, NumericsError> {
            let y = tape.scale(&vars["x"], 1.0)?;
            tape.sum(&y)
        };
        // Fine at the base point; the perturbation is finite too, so this passes.
        assert!(finite_difference_check(f, &p, 1e-5, 1e-6).unwrap().passed());
        let g = |tape: &mut Tape, vars: &BTreeMap<String, Var>| -> Result<Var, NumericsError> {
            let w = tape.constant(Tensor::matrix(1, 1, vec![f64::MAX / 700.5]).unwrap());
            let y = tape.matvec(&w, &vars["x"])?;
            tape.sum(&y)
        };
        assert!(finite_difference_check(g, &p, 1.0, 1e-6).is_err());
    }

    #[test]
    fn every_op_rule_passes() {
        for check in check_op_rules(None, 1e-6, 1) {
            assert!(check.passed, "{check:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_singled_out() {
        for kind in OpKind::BUILTIN {
            let flagged: Vec<OpKind> = check_op_rules(Some(kind), 1e-6, 2)
                .into_iter()
                .filter(|c| !c.passed)
                .map(|c| c.kind)
                .collect();
            assert_eq!(flagged, vec![kind]);
        }
    }
}
