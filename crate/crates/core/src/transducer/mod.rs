//! Recurrent neural network transducer: a bidirectional encoder over
//! acoustic frames, a prediction network over emitted labels, and a joint
//! network producing a distribution over `n_voc` labels plus blank.
//!
//! The joint network projects both embeddings to a shared width,
//! combines them with a Hadamard product and applies `tanh`, an output
//! layer and a log-softmax.

mod decode;
mod loss;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{glorot_uniform, run_bidirectional, Bind, BoundCell, CellConfig, CellParams, CellState, Variant};
use crate::cells::{DEFAULT_BETA, DEFAULT_DECAY, DEFAULT_RHO};
use crate::numerics::{Backend, Tensor};
use crate::training::Dropout;
use crate::{Error, Result};

pub use decode::{beam_decode, beam_decode_with, greedy_decode, greedy_decode_with, DecodeResult};
pub use loss::{
    backward_variables, forward_variables, rnnt_loss, rnnt_loss_and_grad, rnnt_loss_node, AlignmentLattice,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// Number of bidirectional layers `k`.
    pub layers: usize,
    /// Units per direction.
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionConfig {
    pub variant: Variant,
    pub units: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_embed_dim() -> usize {
    10
}
fn default_joint_dim() -> usize {
    256
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransducerConfig {
    /// Feature width of an input frame.
    pub input_size: usize,
    /// Number of labels `n_voc`; the blank symbol is index `n_voc`.
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub prediction: PredictionConfig,
    #[serde(default = "default_joint_dim")]
    pub joint_dim: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Initial bias of the blank logit.
    #[serde(default)]
    pub blank_bias: f64,
}

impl TransducerConfig {
    pub fn new(input_size: usize, vocab_size: usize, encoder: EncoderConfig, prediction: PredictionConfig) -> Self {
        Self {
            input_size,
            vocab_size,
            encoder,
            prediction,
            joint_dim: default_joint_dim(),
            decay: DEFAULT_DECAY,
            rho: DEFAULT_RHO,
            beta: DEFAULT_BETA,
            blank_bias: 0.0,
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    fn cell(&self, variant: Variant, input_size: usize, units: usize) -> CellConfig {
        let mut c = CellConfig::new(variant, input_size, units);
        c.decay = self.decay;
        c.rho = self.rho;
        c.beta = self.beta;
        c
    }

    /// Per-layer cell configs; layer 1 reads the features, deeper layers
    /// read both directions of the layer below.
    pub fn encoder_cells(&self) -> Vec<CellConfig> {
        (0..self.encoder.layers)
            .map(|i| {
                let input = if i == 0 { self.input_size } else { 2 * self.encoder.units };
                self.cell(self.encoder.variant, input, self.encoder.units)
            })
            .collect()
    }

    pub fn prediction_cell(&self) -> CellConfig {
        self.cell(self.prediction.variant, self.prediction.embed_dim, self.prediction.units)
    }

    pub fn encoder_width(&self) -> usize {
        2 * self.encoder.units
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (name, v) in [
            ("input_size", self.input_size),
            ("vocab_size", self.vocab_size),
            ("joint_dim", self.joint_dim),
            ("prediction.embed_dim", self.prediction.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for c in self.encoder_cells() {
            c.validate()?;
        }
        self.prediction_cell().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    /// `d_j x 2 n_enc`
    pub enc_proj: Arc<Tensor>,
    /// `d_j x n_pred`
    pub pred_proj: Arc<Tensor>,
    /// `(n_voc + 1) x d_j`
    pub out_w: Arc<Tensor>,
    pub out_b: Arc<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerModel {
    pub config: TransducerConfig,
    /// Forward and backward cell per encoder layer.
    pub encoder: Vec<[CellParams; 2]>,
    /// `(n_voc + 1) x e`; the last row embeds the blank start symbol.
    pub embedding: Arc<Tensor>,
    pub prediction: CellParams,
    pub joint: JointParams,
}

impl TransducerModel {
    pub fn new(config: TransducerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = config
            .encoder_cells()
            .iter()
            .map(|c| [CellParams::init(c, &mut rng), CellParams::init(c, &mut rng)])
            .collect();
        let symbols = config.vocab_size + 1;
        let embedding = Arc::new(glorot_uniform(symbols, config.prediction.embed_dim, &mut rng));
        let prediction = CellParams::init(&config.prediction_cell(), &mut rng);
        let mut out_b = Tensor::zeros(&[symbols]);
        out_b.data_mut()[config.blank()] = config.blank_bias;
        let joint = JointParams {
            enc_proj: Arc::new(glorot_uniform(config.joint_dim, config.encoder_width(), &mut rng)),
            pred_proj: Arc::new(glorot_uniform(config.joint_dim, config.prediction.units, &mut rng)),
            out_w: Arc::new(glorot_uniform(symbols, config.joint_dim, &mut rng)),
            out_b: Arc::new(out_b),
        };
        Ok(Self {
            config,
            encoder,
            embedding,
            prediction,
            joint,
        })
    }

    /// All trainable tensors under their qualified names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = Vec::new();
        for (i, pair) in self.encoder.iter().enumerate() {
            for (dir, params) in ["fwd", "bwd"].iter().zip(pair) {
                for (name, t) in &params.tensors {
                    out.push((format!("enc.{i}.{dir}.{name}"), t));
                }
            }
        }
        out.push(("pred.embed".to_string(), &self.embedding));
        for (name, t) in &self.prediction.tensors {
            out.push((format!("pred.cell.{name}"), t));
        }
        out.push(("joint.enc_proj".to_string(), &self.joint.enc_proj));
        out.push(("joint.pred_proj".to_string(), &self.joint.pred_proj));
        out.push(("joint.out_w".to_string(), &self.joint.out_w));
        out.push(("joint.out_b".to_string(), &self.joint.out_b));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Arc<Tensor>> {
        let parts: Vec<&str> = name.splitn(4, '.').collect();
        match parts.as_slice() {
            ["enc", layer, dir, local] => {
                let layer: usize = layer.parse().ok()?;
                let idx = match *dir {
                    "fwd" => 0,
                    "bwd" => 1,
                    _ => return None,
                };
                self.encoder.get_mut(layer)?[idx].tensors.get_mut(*local)
            }
            ["pred", "embed"] => Some(&mut self.embedding),
            ["pred", "cell", local] => self.prediction.tensors.get_mut(*local),
            ["joint", "enc_proj"] => Some(&mut self.joint.enc_proj),
            ["joint", "pred_proj"] => Some(&mut self.joint.pred_proj),
            ["joint", "out_w"] => Some(&mut self.joint.out_w),
            ["joint", "out_b"] => Some(&mut self.joint.out_b),
            _ => None,
        }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .param_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "{name}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Clamps trainable threshold decays into `[0, 1]`.
    pub fn project_constraints(&mut self) {
        let clamp = |params: &mut CellParams| {
            if let Some(rho) = params.tensors.get_mut("rho") {
                for v in Arc::make_mut(rho).data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        };
        for pair in &mut self.encoder {
            pair.iter_mut().for_each(clamp);
        }
        clamp(&mut self.prediction);
    }

    /// Assembles a bound model from values already registered under the
    /// qualified parameter names (for example by a gradient checker).
    pub fn bind_from<V: Clone>(&self, values: &BTreeMap<String, V>) -> Result<BoundTransducer<V>> {
        let get = |name: &str| {
            values
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let encoder = self
            .config
            .encoder_cells()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Ok((
                    BoundCell::from_named(c, values, &format!("enc.{i}.fwd."))?,
                    BoundCell::from_named(c, values, &format!("enc.{i}.bwd."))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundTransducer {
            vocab_size: self.config.vocab_size,
            input_size: self.config.input_size,
            encoder,
            embedding: get("pred.embed")?,
            prediction: BoundCell::from_named(&self.config.prediction_cell(), values, "pred.cell.")?,
            enc_proj: get("joint.enc_proj")?,
            pred_proj: get("joint.pred_proj")?,
            out_w: get("joint.out_w")?,
            out_b: get("joint.out_b")?,
        })
    }

    /// Copies of all parameters keyed by qualified name.
    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, Tensor::clone(t)))
            .collect()
    }

    pub fn bind<B: Bind>(&self, be: &mut B) -> Result<BoundTransducer<B::Value>> {
        let cells = self.config.encoder_cells();
        let encoder = cells
            .iter()
            .zip(&self.encoder)
            .enumerate()
            .map(|(i, (c, [f, b]))| {
                Ok((
                    BoundCell::bind(be, c, f, &format!("enc.{i}.fwd."))?,
                    BoundCell::bind(be, c, b, &format!("enc.{i}.bwd."))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundTransducer {
            vocab_size: self.config.vocab_size,
            input_size: self.config.input_size,
            encoder,
            embedding: be.bind("pred.embed", &self.embedding),
            prediction: BoundCell::bind(be, &self.config.prediction_cell(), &self.prediction, "pred.cell.")?,
            enc_proj: be.bind("joint.enc_proj", &self.joint.enc_proj),
            pred_proj: be.bind("joint.pred_proj", &self.joint.pred_proj),
            out_w: be.bind("joint.out_w", &self.joint.out_w),
            out_b: be.bind("joint.out_b", &self.joint.out_b),
        })
    }
}

/// A transducer whose parameters are bound to a backend.
#[derive(Debug, Clone)]
pub struct BoundTransducer<V> {
    pub vocab_size: usize,
    pub input_size: usize,
    pub encoder: Vec<(BoundCell<V>, BoundCell<V>)>,
    pub embedding: V,
    pub prediction: BoundCell<V>,
    pub enc_proj: V,
    pub pred_proj: V,
    pub out_w: V,
    pub out_b: V,
}

impl<V: Clone> BoundTransducer<V> {
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Acoustic embeddings for a `T x n_in` feature matrix. Dropout, when
    /// given, is applied to the input of every layer.
    pub fn encode<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        features: &Tensor,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vec<V>> {
        if features.rank() != 2 || features.shape()[0] == 0 || features.shape()[1] != self.input_size {
            return Err(Error::Config(format!(
                "features must be T x {} with T >= 1, got {:?}",
                self.input_size,
                features.shape()
            )));
        }
        let mut layer: Vec<V> = (0..features.shape()[0])
            .map(|t| be.constant(Tensor::vector(features.row(t).to_vec())))
            .collect();
        for (fwd, bwd) in &self.encoder {
            if let Some(d) = dropout.as_deref_mut() {
                layer = layer
                    .iter()
                    .map(|x| d.input(be, x))
                    .collect::<Result<Vec<_>>>()?;
            }
            layer = run_bidirectional(be, fwd, bwd, &layer)?;
        }
        Ok(layer)
    }

    pub fn prediction_start<B: Backend<Value = V>>(&self, be: &mut B) -> CellState<V> {
        self.prediction.zero_state(be)
    }

    /// Embeds `label` (the blank index is the start token) and advances
    /// the prediction network.
    pub fn predict_step<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        label: usize,
        state: &CellState<V>,
        dropout: Option<&mut Dropout>,
    ) -> Result<(V, CellState<V>)> {
        if label > self.vocab_size {
            return Err(Error::LabelOutOfRange {
                label,
                vocab: self.vocab_size,
            });
        }
        let mut embedded = be.row_select(&self.embedding, label)?;
        if let Some(d) = dropout {
            embedded = d.embedding(be, &embedded)?;
        }
        Ok(self.prediction.step(be, state, &embedded)?)
    }

    pub fn project_encoder<B: Backend<Value = V>>(&self, be: &mut B, h_enc: &V) -> Result<V> {
        Ok(be.matvec(&self.enc_proj, h_enc)?)
    }

    pub fn project_prediction<B: Backend<Value = V>>(&self, be: &mut B, h_pred: &V) -> Result<V> {
        Ok(be.matvec(&self.pred_proj, h_pred)?)
    }

    /// Log-probabilities over `n_voc + 1` symbols from projected embeddings.
    pub fn joint_projected<B: Backend<Value = V>>(&self, be: &mut B, enc: &V, pred: &V) -> Result<V> {
        let combined = be.mul(enc, pred)?;
        let z = be.tanh(&combined)?;
        let logits = be.matvec(&self.out_w, &z)?;
        let logits = be.add(&logits, &self.out_b)?;
        Ok(be.log_softmax(&logits)?)
    }

    pub fn joint<B: Backend<Value = V>>(&self, be: &mut B, h_enc: &V, h_pred: &V) -> Result<V> {
        let enc = self.project_encoder(be, h_enc)?;
        let pred = self.project_prediction(be, h_pred)?;
        self.joint_projected(be, &enc, &pred)
    }

    /// Lattice rows (frame-major) for a feature matrix and its labels.
    pub fn lattice_rows<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        features: &Tensor,
        labels: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vec<V>> {
        if let Some(&label) = labels.iter().find(|&&k| k >= self.vocab_size) {
            return Err(Error::LabelOutOfRange {
                label,
                vocab: self.vocab_size,
            });
        }
        let h_enc = self.encode(be, features, dropout.as_deref_mut())?;
        let enc_proj = h_enc
            .iter()
            .map(|h| self.project_encoder(be, h))
            .collect::<Result<Vec<_>>>()?;
        let mut state = self.prediction_start(be);
        let mut pred_proj = Vec::with_capacity(labels.len() + 1);
        for prev in std::iter::once(self.blank()).chain(labels.iter().copied()) {
            let (h, next) = self.predict_step(be, prev, &state, dropout.as_deref_mut())?;
            pred_proj.push(self.project_prediction(be, &h)?);
            state = next;
        }
        let mut rows = Vec::with_capacity(enc_proj.len() * pred_proj.len());
        for e in &enc_proj {
            for p in &pred_proj {
                rows.push(self.joint_projected(be, e, p)?);
            }
        }
        Ok(rows)
    }

    /// Negative log-likelihood of `labels` given `features`.
    pub fn loss<B: Backend<Value = V>>(
        &self,
        be: &mut B,
        features: &Tensor,
        labels: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<V> {
        let rows = self.lattice_rows(be, features, labels, dropout)?;
        rnnt_loss_node(be, rows, features.shape()[0], labels)
    }
}

/// Plain lattice of a model, computed without recording.
pub fn model_lattice(model: &TransducerModel, features: &Tensor, labels: &[usize]) -> Result<AlignmentLattice> {
    let mut be = crate::numerics::Eager::new();
    let bound = model.bind(&mut be)?;
    let rows = bound.lattice_rows(&mut be, features, labels, None)?;
    let refs: Vec<&Tensor> = rows.iter().map(|r| r.as_ref()).collect();
    AlignmentLattice::from_rows(features.shape()[0], labels.len() + 1, &refs)
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Total edits over total reference length.
pub fn token_error_rate<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> f64 {
    let (edits, total) = pairs
        .into_iter()
        .fold((0usize, 0usize), |(e, n), (h, r)| (e + edit_distance(h, r), n + r.len()));
    if total == 0 {
        0.0
    } else {
        edits as f64 / total as f64
    }
}
