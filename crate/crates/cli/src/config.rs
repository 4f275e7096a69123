//! Run configuration: one TOML file, optionally patched by `--set` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use snurnnt::training::TrainingConfig;
use snurnnt::transducer::TransducerConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
}

fn default_beam_width() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    #[serde(default)]
    pub mode: DecodeMode,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    /// Cap on emitted labels per utterance; `10 T` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_symbols: Option<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: default_beam_width(),
            max_symbols: None,
        }
    }
}

/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for parameter initialisation.
    #[serde(default)]
    pub init_seed: u64,
    pub model: TransducerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    /// SHA-256 of the effective config (after overrides, before path
    /// resolution), hex encoded.
    pub hash: String,
}

/// Parses `raw` as a TOML value, falling back to a bare string so that
/// `--set paths.train=data.jsonl` needs no quoting.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

pub fn hash_config(run: &RunConfig) -> String {
    let bytes = serde_json::to_vec(run).expect("config serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut run: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    run.model.validate()?;
    if let Some(t) = &run.training {
        t.validate()?;
    }
    if run.decode.beam_width == 0 {
        return Err(CliError::Usage("decode.beam_width must be positive".into()));
    }
    let hash = hash_config(&run);
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(base, &mut run.paths.train);
    resolve(base, &mut run.paths.eval);
    resolve(base, &mut run.paths.out);
    Ok(LoadedConfig { run, hash })
}
