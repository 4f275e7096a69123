//! Recurrent units as single-step transition functions.
//!
//! Membrane update shared by every sSNU variant (`g` is the identity):
//!
//! ```text
//! s_t = W x_t [+ H y_{t-1}] + d * s_{t-1} ⊙ (1 - r_{t-1})
//! ```
//!
//! where `r` is the output driving the reset: `y` for sSNU and sSNU-a,
//! the unmodulated `ỹ` for sSNU-o.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Backend, Eager, NumericsError, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Ssnu,
    SsnuA,
    SsnuO,
}

/// The unit configurations that can be built: the LSTM baseline and the
/// seven sSNU rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "ssnu")]
    Ssnu,
    #[serde(rename = "ssnu-r")]
    SsnuR,
    #[serde(rename = "ssnu-a")]
    SsnuA,
    #[serde(rename = "ssnu-a-r")]
    SsnuAR,
    #[serde(rename = "ssnu-a-ra")]
    SsnuARa,
    #[serde(rename = "ssnu-o")]
    SsnuO,
    #[serde(rename = "ssnu-o-r")]
    SsnuOR,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Lstm,
        Variant::Ssnu,
        Variant::SsnuR,
        Variant::SsnuA,
        Variant::SsnuAR,
        Variant::SsnuARa,
        Variant::SsnuO,
        Variant::SsnuOR,
    ];

    pub fn kind(self) -> CellKind {
        match self {
            Variant::Lstm => CellKind::Lstm,
            Variant::Ssnu | Variant::SsnuR => CellKind::Ssnu,
            Variant::SsnuA | Variant::SsnuAR | Variant::SsnuARa => CellKind::SsnuA,
            Variant::SsnuO | Variant::SsnuOR => CellKind::SsnuO,
        }
    }

    /// Presence of the recurrent matrix `H` (and `H_o` for sSNU-o).
    pub fn recurrent(self) -> bool {
        matches!(
            self,
            Variant::Lstm | Variant::SsnuR | Variant::SsnuAR | Variant::SsnuARa | Variant::SsnuOR
        )
    }

    /// Presence of the axo-somatic recurrent matrix `H_a` (with a
    /// trainable per-unit `rho`).
    pub fn axo_somatic_recurrent(self) -> bool {
        self == Variant::SsnuARa
    }

    /// Short machine name, as used in config files.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Ssnu => "ssnu",
            Variant::SsnuR => "ssnu-r",
            Variant::SsnuA => "ssnu-a",
            Variant::SsnuAR => "ssnu-a-r",
            Variant::SsnuARa => "ssnu-a-ra",
            Variant::SsnuO => "ssnu-o",
            Variant::SsnuOR => "ssnu-o-r",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Lstm => "LSTM",
            Variant::Ssnu => "sSNU",
            Variant::SsnuR => "sSNU R",
            Variant::SsnuA => "sSNU-a",
            Variant::SsnuAR => "sSNU-a R",
            Variant::SsnuARa => "sSNU-a Ra",
            Variant::SsnuO => "sSNU-o",
            Variant::SsnuOR => "sSNU-o R",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts either the display name (`sSNU-o R`) or the key (`ssnu-o-r`).
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '_'], "-");
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.key() == norm)
            .ok_or_else(|| Error::Config(format!("unknown cell variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub units: usize,
    /// Membrane decay `d`.
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Threshold decay; the initial value when trainable.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Threshold scaling `beta`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Replaces the sSNU-o output modulation by the constant one.
    #[doc(hidden)]
    #[serde(skip)]
    pub pin_modulation: bool,
}

fn default_decay() -> f64 {
    DEFAULT_DECAY
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl CellConfig {
    pub fn new(variant: Variant, input_size: usize, units: usize) -> Self {
        Self {
            variant,
            input_size,
            units,
            decay: DEFAULT_DECAY,
            rho: DEFAULT_RHO,
            beta: DEFAULT_BETA,
            pin_modulation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.units == 0 {
            return Err(Error::Config(format!(
                "{}: input size and units must be positive (got m={}, n={})",
                self.variant, self.input_size, self.units
            )));
        }
        for (name, v) in [("decay", self.decay), ("rho", self.rho)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }

    /// Names and shapes of the trainable tensors, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (n, m) = (self.units, self.input_size);
        let input = vec![n, m];
        let rec = vec![n, n];
        let bias = vec![n];
        let mut out = Vec::new();
        match self.variant.kind() {
            CellKind::Lstm => {
                for (w, h, b) in [
                    ("W_i", "H_i", "b_i"),
                    ("W_c", "H_c", "b_c"),
                    ("W_f", "H_f", "b_f"),
                    ("W_s", "H_s", "b_s"),
                ] {
                    out.push((w, input.clone()));
                    out.push((h, rec.clone()));
                    out.push((b, bias.clone()));
                }
            }
            CellKind::Ssnu => {
                out.push(("W", input));
                if self.variant.recurrent() {
                    out.push(("H", rec));
                }
                out.push(("b", bias));
            }
            CellKind::SsnuA => {
                out.push(("W", input));
                if self.variant.recurrent() {
                    out.push(("H", rec.clone()));
                }
                if self.variant.axo_somatic_recurrent() {
                    out.push(("H_a", rec));
                    out.push(("rho", bias.clone()));
                }
                out.push(("b0", bias));
            }
            CellKind::SsnuO => {
                out.push(("W", input.clone()));
                if self.variant.recurrent() {
                    out.push(("H", rec.clone()));
                }
                out.push(("b", bias.clone()));
                out.push(("W_o", input));
                if self.variant.recurrent() {
                    out.push(("H_o", rec));
                }
                out.push(("b_o", bias));
            }
        }
        out
    }
}

/// Trainable tensors of one cell, keyed by local name (`W`, `H_a`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub tensors: BTreeMap<String, Arc<Tensor>>,
}

impl CellParams {
    /// Fan-based uniform init for matrices, zero biases, `rho` from the config.
    pub fn init<R: Rng + ?Sized>(config: &CellConfig, rng: &mut R) -> Self {
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name.to_string(), Arc::new(init_tensor(name, &shape, config, rng))))
            .collect();
        Self { tensors }
    }

    pub fn zeros(config: &CellConfig) -> Self {
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name.to_string(), Arc::new(Tensor::zeros(&shape))))
            .collect();
        Self { tensors }
    }

    /// Checks that exactly the tensors of `config` exist, with the right shapes.
    pub fn validate(&self, config: &CellConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "{} expects {} tensors, found {}",
                config.variant,
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.tensors.insert(name.to_string(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }
}

pub(crate) fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], config: &CellConfig, rng: &mut R) -> Tensor {
    match shape {
        [rows, cols] => glorot_uniform(*rows, *cols, rng),
        _ if name == "rho" => Tensor::filled(shape, config.rho),
        _ => Tensor::zeros(shape),
    }
}

/// Backends that can introduce named parameters.
pub trait Bind: Backend {
    fn bind(&mut self, name: &str, value: &Arc<Tensor>) -> Self::Value;
}

impl Bind for Tape {
    fn bind(&mut self, name: &str, value: &Arc<Tensor>) -> Self::Value {
        self.param(name, Arc::clone(value))
    }
}

impl Bind for Eager {
    fn bind(&mut self, _name: &str, value: &Arc<Tensor>) -> Self::Value {
        Arc::clone(value)
    }
}

/// Recurrent state of one layer for one sequence.
#[derive(Debug, Clone)]
pub struct CellState<V> {
    /// Membrane potential (LSTM: cell state).
    pub s: V,
    /// Output propagated to other units and to `H`/`H_o`/`H_a`.
    pub y: V,
    /// Output driving the reset term.
    pub reset: V,
    /// Adaptive threshold (sSNU-a only).
    pub threshold: Option<V>,
}

/// A cell whose parameters are bound to a backend.
#[derive(Debug, Clone)]
pub struct BoundCell<V> {
    pub config: CellConfig,
    params: BTreeMap<&'static str, V>,
}

impl<V: Clone> BoundCell<V> {
    pub fn bind<B: Bind<Value = V>>(be: &mut B, config: &CellConfig, params: &CellParams, prefix: &str) -> Result<Self> {
        params.validate(config)?;
        let bound = config
            .param_shapes()
            .into_iter()
            .map(|(name, _)| (name, be.bind(&format!("{prefix}{name}"), &params.tensors[name])))
            .collect();
        Ok(Self {
            config: config.clone(),
            params: bound,
        })
    }

    /// Builds a cell from values that are already bound, looked up as
    /// `{prefix}{name}`.
    pub fn from_named(config: &CellConfig, values: &BTreeMap<String, V>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, _)| {
                let key = format!("{prefix}{name}");
                values
                    .get(&key)
                    .cloned()
                    .map(|v| (name, v))
                    .ok_or_else(|| Error::Config(format!("missing parameter {key}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    fn p(&self, name: &str) -> &V {
        &self.params[name]
    }

    fn opt(&self, name: &str) -> Option<&V> {
        self.params.get(name)
    }

    pub fn zero_state<B: Backend<Value = V>>(&self, be: &mut B) -> CellState<V> {
        let n = self.config.units;
        CellState {
            s: be.zeros(n),
            y: be.zeros(n),
            reset: be.zeros(n),
            threshold: (self.config.variant.kind() == CellKind::SsnuA).then(|| be.zeros(n)),
        }
    }

    /// One transition, dispatched on the configured variant.
    pub fn step<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        state: &CellState<V>,
        x: &V,
    ) -> Result<(V, CellState<V>), NumericsError> {
        match self.config.variant.kind() {
            CellKind::Lstm => self.lstm_step(be, state, x),
            CellKind::Ssnu => self.ssnu_step(be, state, x),
            CellKind::SsnuA => self.ssnu_a_step(be, state, x),
            CellKind::SsnuO => self.ssnu_o_step(be, state, x),
        }
    }

    fn membrane<B: Backend<Value = V>>(&self, be: &mut B, state: &CellState<V>, x: &V) -> Result<V, NumericsError> {
        let mut pre = be.matvec(self.p("W"), x)?;
        if let Some(h) = self.opt("H") {
            let hy = be.matvec(h, &state.y)?;
            pre = be.add(&pre, &hy)?;
        }
        let decayed = be.scale(&state.s, self.config.decay)?;
        let keep = be.rsub(1.0, &state.reset)?;
        let carried = be.mul(&decayed, &keep)?;
        be.add(&pre, &carried)
    }

    pub fn ssnu_step<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        state: &CellState<V>,
        x: &V,
    ) -> Result<(V, CellState<V>), NumericsError> {
        let s = self.membrane(be, state, x)?;
        let pre = be.add(&s, self.p("b"))?;
        let y = be.sigmoid(&pre)?;
        Ok((
            y.clone(),
            CellState {
                s,
                y: y.clone(),
                reset: y,
                threshold: None,
            },
        ))
    }

    pub fn ssnu_a_step<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        state: &CellState<V>,
        x: &V,
    ) -> Result<(V, CellState<V>), NumericsError> {
        let s = self.membrane(be, state, x)?;
        let prev = state
            .threshold
            .as_ref()
            .expect("sSNU-a state carries a threshold");
        let drive = match self.opt("H_a") {
            Some(ha) => be.matvec(ha, &state.y)?,
            None => state.y.clone(),
        };
        let threshold = match self.opt("rho") {
            Some(rho) => {
                let kept = be.mul(rho, prev)?;
                let inflow_rate = be.rsub(1.0, rho)?;
                let inflow = be.mul(&inflow_rate, &drive)?;
                be.add(&kept, &inflow)?
            }
            None => {
                let kept = be.scale(prev, self.config.rho)?;
                let inflow = be.scale(&drive, 1.0 - self.config.rho)?;
                be.add(&kept, &inflow)?
            }
        };
        let shift = be.scale(&threshold, self.config.beta)?;
        let pre = be.add(&s, &shift)?;
        let pre = be.add(&pre, self.p("b0"))?;
        let y = be.sigmoid(&pre)?;
        Ok((
            y.clone(),
            CellState {
                s,
                y: y.clone(),
                reset: y,
                threshold: Some(threshold),
            },
        ))
    }

    pub fn ssnu_o_step<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        state: &CellState<V>,
        x: &V,
    ) -> Result<(V, CellState<V>), NumericsError> {
        let s = self.membrane(be, state, x)?;
        let pre = be.add(&s, self.p("b"))?;
        let unmodulated = be.sigmoid(&pre)?;
        let y = if self.config.pin_modulation {
            unmodulated.clone()
        } else {
            let mut gate = be.matvec(self.p("W_o"), x)?;
            if let Some(ho) = self.opt("H_o") {
                let hy = be.matvec(ho, &state.y)?;
                gate = be.add(&gate, &hy)?;
            }
            let gate = be.add(&gate, self.p("b_o"))?;
            let gate = be.sigmoid(&gate)?;
            be.mul(&unmodulated, &gate)?
        };
        Ok((
            y.clone(),
            CellState {
                s,
                y,
                reset: unmodulated,
                threshold: None,
            },
        ))
    }

    fn lstm_gate<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        suffix: char,
        x: &V,
        y_prev: &V,
    ) -> Result<V, NumericsError> {
        let wx = be.matvec(self.p(&format!("W_{suffix}")), x)?;
        let hy = be.matvec(self.p(&format!("H_{suffix}")), y_prev)?;
        let sum = be.add(&wx, &hy)?;
        be.add(&sum, self.p(&format!("b_{suffix}")))
    }

    /// Standard LSTM with input gate `i`, output gate `c`, forget gate `f`.
    pub fn lstm_step<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        state: &CellState<V>,
        x: &V,
    ) -> Result<(V, CellState<V>), NumericsError> {
        let i = self.lstm_gate(be, 'i', x, &state.y)?;
        let i = be.sigmoid(&i)?;
        let c = self.lstm_gate(be, 'c', x, &state.y)?;
        let c = be.sigmoid(&c)?;
        let f = self.lstm_gate(be, 'f', x, &state.y)?;
        let f = be.sigmoid(&f)?;
        let candidate = self.lstm_gate(be, 's', x, &state.y)?;
        let candidate = be.tanh(&candidate)?;
        let kept = be.mul(&f, &state.s)?;
        let written = be.mul(&i, &candidate)?;
        let s = be.add(&kept, &written)?;
        let squashed = be.tanh(&s)?;
        let y = be.mul(&c, &squashed)?;
        Ok((
            y.clone(),
            CellState {
                s,
                y: y.clone(),
                reset: y,
                threshold: None,
            },
        ))
    }

    /// Unrolls the cell left to right from the zero state.
    pub fn run_layer<B: Backend<Value = V>>(&self, be: &mut B, inputs: &[V]) -> Result<Vec<V>, NumericsError> {
        let mut state = self.zero_state(be);
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (y, next) = self.step(be, &state, x)?;
            outputs.push(y);
            state = next;
        }
        Ok(outputs)
    }
}

/// Forward cell over the sequence and backward cell over its reverse;
/// output `t` concatenates forward output `t` with the backward output
/// aligned to frame `t`.
pub fn run_bidirectional<B: Backend>(
    be: &mut B,
    fwd: &BoundCell<B::Value>,
    bwd: &BoundCell<B::Value>,
    inputs: &[B::Value],
) -> Result<Vec<B::Value>> {
    if fwd.config.units != bwd.config.units {
        return Err(Error::Config(format!(
            "bidirectional layer needs equal widths, got {} and {}",
            fwd.config.units, bwd.config.units
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Config("cannot run a layer on an empty sequence".into()));
    }
    let forward = fwd.run_layer(be, inputs)?;
    let reversed: Vec<B::Value> = inputs.iter().rev().cloned().collect();
    let mut backward = bwd.run_layer(be, &reversed)?;
    backward.reverse();
    forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| be.concat(&[f.clone(), b.clone()]).map_err(Error::from))
        .collect()
}
