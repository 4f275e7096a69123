//! Synthetic transduction task, delta and frame-stacking feature ops,
//! line-delimited dataset files and the binary checkpoint container.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::transducer::{TransducerConfig, TransducerModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x F`
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Label sequences are drawn without adjacent repeats, so every label
/// boundary is visible in the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    /// Inclusive range of frames each label occupies.
    pub frames_per_symbol: (usize, usize),
    /// Inclusive range of labels per utterance.
    pub labels_per_utterance: (usize, usize),
    pub feature_dim: usize,
    pub noise: f64,
    pub utterances: usize,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            frames_per_symbol: (2, 5),
            labels_per_utterance: (3, 8),
            feature_dim: 16,
            noise: 0.5,
            utterances: 500,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// One row per label.
    pub prototypes: Tensor,
    pub utterances: Vec<Utterance>,
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (f0, f1) = self.frames_per_symbol;
        let (l0, l1) = self.labels_per_utterance;
        if self.vocab_size < 2 || self.feature_dim == 0 || self.utterances == 0 {
            return Err(Error::Config("toy task needs vocab >= 2, feature_dim >= 1, utterances >= 1".into()));
        }
        if f0 == 0 || f0 > f1 || l0 == 0 || l0 > l1 {
            return Err(Error::Config("toy task ranges must be positive and ordered".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    fn prototypes(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let data = (0..self.vocab_size * self.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::matrix(self.vocab_size, self.feature_dim, data).expect("sizes agree")
    }

    fn utterance(&self, prototypes: &Tensor, id: String, rng: &mut ChaCha8Rng) -> Utterance {
        let (f0, f1) = self.frames_per_symbol;
        let (l0, l1) = self.labels_per_utterance;
        let n = rng.random_range(l0..=l1);
        let mut labels: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..n {
            let k = match labels.last() {
                Some(&prev) => (prev + rng.random_range(1..self.vocab_size)) % self.vocab_size,
                None => rng.random_range(0..self.vocab_size),
            };
            labels.push(k);
        }
        let mut data = Vec::new();
        let mut frames = 0;
        for &k in &labels {
            for _ in 0..rng.random_range(f0..=f1) {
                for &p in prototypes.row(k) {
                    data.push(p + self.noise * rng.sample::<f64, _>(StandardNormal));
                }
                frames += 1;
            }
        }
        let features = Tensor::matrix(frames, self.feature_dim, data).expect("sizes agree");
        Utterance { id, features, labels }
    }

    fn generate_stream(&self, count: usize, stream: u64, prefix: &str) -> Result<ToyDataset> {
        self.validate()?;
        let prototypes = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let utterances = (0..count)
            .map(|i| self.utterance(&prototypes, format!("{prefix}{i:05}"), &mut rng))
            .collect();
        Ok(ToyDataset { prototypes, utterances })
    }

    /// `utterances` examples; deterministic in the seed.
    pub fn generate(&self) -> Result<ToyDataset> {
        self.generate_stream(self.utterances, 1, "toy-")
    }

    /// Extra utterances from the same prototypes, disjoint from
    /// [`Self::generate`]'s stream.
    pub fn generate_heldout(&self, count: usize) -> Result<ToyDataset> {
        self.generate_stream(count, 2, "heldout-")
    }
}

pub fn generate_toy_dataset(spec: &ToyTaskSpec) -> Result<ToyDataset> {
    spec.generate()
}

/// Backward differences along time; frame 0 copies frame 1's value
/// (zero when `T = 1`).
fn time_difference(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    let mut out: Vec<Vec<f64>> = (0..rows.len())
        .map(|t| {
            if t == 0 {
                vec![0.0; width]
            } else {
                rows[t].iter().zip(&rows[t - 1]).map(|(a, b)| a - b).collect()
            }
        })
        .collect();
    if out.len() > 1 {
        out[0] = out[1].clone();
    }
    out
}

fn rows_of(features: &Tensor) -> Result<Vec<Vec<f64>>> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(Error::Config(format!("features must be T x F with T >= 1, got {:?}", features.shape())));
    }
    Ok((0..features.shape()[0]).map(|t| features.row(t).to_vec()).collect())
}

/// Appends first and second differences: `T x F` becomes `T x 3F`.
pub fn add_deltas(features: &Tensor) -> Result<Tensor> {
    let rows = rows_of(features)?;
    let d1 = time_difference(&rows);
    let d2 = time_difference(&d1);
    let width = 3 * features.shape()[1];
    let data = (0..rows.len())
        .flat_map(|t| rows[t].iter().chain(&d1[t]).chain(&d2[t]).copied().collect::<Vec<_>>())
        .collect();
    Ok(Tensor::matrix(rows.len(), width, data)?)
}

/// Concatenates frame pairs `(2i, 2i+1)`; an odd last frame is paired with
/// itself.
pub fn stack_frames(features: &Tensor) -> Result<Tensor> {
    let rows = rows_of(features)?;
    let out_t = rows.len().div_ceil(2);
    let data = (0..out_t)
        .flat_map(|i| {
            let a = &rows[2 * i];
            let b = rows.get(2 * i + 1).unwrap_or(a);
            a.iter().chain(b).copied().collect::<Vec<_>>()
        })
        .collect();
    Ok(Tensor::matrix(out_t, 2 * features.shape()[1], data)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    shape: [usize; 2],
    features: Vec<f64>,
    labels: Vec<usize>,
}

pub fn utterance_to_line(u: &Utterance) -> String {
    let record = Record {
        id: u.id.clone(),
        shape: [u.features.shape()[0], u.features.shape()[1]],
        features: u.features.data().to_vec(),
        labels: u.labels.clone(),
    };
    serde_json::to_string(&record).expect("plain data serializes")
}

pub fn utterance_from_line(line: &str) -> Result<Utterance> {
    let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    if r.shape[0] == 0 {
        return Err(Error::Parse(format!("{}: utterance has no frames", r.id)));
    }
    let features = Tensor::new(r.shape.to_vec(), r.features).map_err(|e| Error::Parse(format!("{}: {e}", r.id)))?;
    Ok(Utterance {
        id: r.id,
        features,
        labels: r.labels,
    })
}

pub fn write_dataset(path: &Path, data: &[Utterance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in data {
        writeln!(w, "{}", utterance_to_line(u)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u = utterance_from_line(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(u);
    }
    Ok(out)
}

const MAGIC: &str = "snurnnt-checkpoint 1";

/// Serializes a model as a text header followed by little-endian payloads.
///
/// ```text
/// snurnnt-checkpoint 1
/// config <json>
/// tensor <name> f64 <d0>x<d1>... <byte offset>
/// ...
/// end
/// <payload bytes>
/// ```
pub fn checkpoint_bytes(model: &TransducerModel) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    header.push_str("config ");
    header.push_str(&serde_json::to_string(&model.config).expect("config serializes"));
    header.push('\n');
    let mut payload = Vec::new();
    for (name, t) in model.named_params() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor {name} f64 {} {}\n", dims.join("x"), payload.len()));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(payload);
    out
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<TransducerModel> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let config_line = next_line()?;
    let json = config_line.strip_prefix("config ").ok_or_else(|| bad("missing config line"))?;
    let config: TransducerConfig = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let ["tensor", name, "f64", dims, offset] = fields.as_slice() else {
            return Err(Error::Checkpoint(format!("malformed tensor line: {line}")));
        };
        let shape = dims
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape in: {line}")))?;
        let offset: usize = offset.parse().map_err(|_| Error::Checkpoint(format!("bad offset in: {line}")))?;
        entries.push((name.to_string(), shape, offset));
    }
    let payload = &bytes[pos..];
    let mut model = TransducerModel::new(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut found: Vec<String> = entries.iter().map(|(n, _, _)| n.clone()).collect();
    found.sort();
    let mut wanted = expected.clone();
    wanted.sort();
    if found != wanted {
        return Err(bad("tensor names do not match the embedded config"));
    }
    for (name, shape, offset) in entries {
        let count: usize = shape.iter().product();
        let bytes = payload
            .get(offset..offset + 8 * count)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload out of range")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model
            .set_param(&name, tensor)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TransducerModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TransducerModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(&bytes)
}
