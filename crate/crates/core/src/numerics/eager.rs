use std::sync::Arc;

use super::{Backend, NumericsError, Op, Precision, Tensor};

/// Immediate evaluation without recording. Values are reference counted
/// so parameters can be bound without copying.
#[derive(Debug, Default)]
pub struct Eager {
    precision: Precision,
    mults: u64,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            mults: 0,
        }
    }

    pub fn reset_counter(&mut self) {
        self.mults = 0;
    }
}

impl Backend for Eager {
    type Value = Arc<Tensor>;

    fn precision(&self) -> Precision {
        self.precision
    }

    fn constant(&mut self, value: Tensor) -> Arc<Tensor> {
        Arc::new(value)
    }

    fn value<'a>(&'a self, v: &'a Arc<Tensor>) -> &'a Tensor {
        v
    }

    fn apply(&mut self, op: Op<Arc<Tensor>>) -> Result<Arc<Tensor>, NumericsError> {
        let (out, mults) = op.evaluate(|v| v.as_ref(), self.precision)?;
        self.mults += mults;
        Ok(Arc::new(out))
    }

    fn multiplications(&self) -> u64 {
        self.mults
    }
}
