use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use snurnnt::cells::{BoundCell, CellConfig, CellParams, Variant};
use snurnnt::dataio::{
    add_deltas, load_checkpoint, read_dataset, save_checkpoint, stack_frames, write_dataset, ToyTaskSpec, Utterance,
};
use snurnnt::numerics::{check_op_rules, Backend, GradCheck, GradCheckReport, OpKind, Tensor};
use snurnnt::profiler::{
    encoder_cost, model_cost, full_size_config, reference_cost_report, pin_to_one_cpu, prediction_cost, time_decode,
    CostReport, Subnetwork,
};
use snurnnt::training::{fit, FitOptions};
use snurnnt::transducer::{
    beam_decode_with, greedy_decode_with, token_error_rate, EncoderConfig, PredictionConfig, TransducerConfig,
    TransducerModel,
};

use crate::config::{self, DecodeMode, LoadedConfig};
use crate::CliError;

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_optional(path: Option<&Path>, overrides: &[String]) -> Result<Option<LoadedConfig>, CliError> {
    match path {
        Some(p) => config::load(p, overrides).map(Some),
        None if overrides.is_empty() => Ok(None),
        None => Err(CliError::Usage("--set needs --config".into())),
    }
}

/// Rejects data the model cannot consume before any work starts.
fn check_data(model: &TransducerConfig, data: &[Utterance], path: &Path) -> Result<(), CliError> {
    for u in data {
        let width = u.features.shape()[1];
        if width != model.input_size {
            return Err(CliError::Usage(format!(
                "{}: utterance {} has {width}-dim features but the model expects {}",
                path.display(),
                u.id,
                model.input_size
            )));
        }
        if let Some(&k) = u.labels.iter().find(|&&k| k >= model.vocab_size) {
            return Err(CliError::Usage(format!(
                "{}: utterance {} has label {k} outside the vocabulary of {}",
                path.display(),
                u.id,
                model.vocab_size
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_sha256: &'a str,
    config: &'a config::RunConfig,
    epochs: &'a [snurnnt::training::EpochRecord],
}

pub fn train(
    config_path: &Path,
    overrides: &[String],
    data: Option<PathBuf>,
    eval: Option<PathBuf>,
    out: Option<PathBuf>,
    max_epochs: Option<usize>,
) -> Result<(), CliError> {
    let loaded = config::load(config_path, overrides)?;
    let run = &loaded.run;
    let training = run
        .training
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{}: no [training] section", config_path.display())))?;
    let data_path = data
        .or_else(|| run.paths.train.clone())
        .ok_or_else(|| CliError::Usage("no training data: pass --data or set paths.train".into()))?;
    let out = out
        .or_else(|| run.paths.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set paths.out".into()))?;
    let dataset = read_dataset(&data_path)?;
    check_data(&run.model, &dataset, &data_path)?;
    let eval_set = match eval.or_else(|| run.paths.eval.clone()) {
        Some(p) => {
            let set = read_dataset(&p)?;
            check_data(&run.model, &set, &p)?;
            Some(set)
        }
        None => None,
    };

    eprintln!("config sha256 {}", loaded.hash);
    eprintln!(
        "training {} / {} on {} utterances for {} epochs",
        run.model.encoder.variant,
        run.model.prediction.variant,
        dataset.len(),
        max_epochs.map_or(training.epochs(), |m| m.min(training.epochs()))
    );
    fs::create_dir_all(&out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    let mut model = TransducerModel::new(run.model.clone(), run.init_seed)?;
    let options = FitOptions {
        checkpoint_dir: Some(out.join("checkpoints")),
        eval: eval_set.as_deref(),
        max_epochs,
    };
    let log = fit(&mut model, &dataset, training, &options)?;
    for r in &log.epochs {
        eprintln!(
            "[{}] epoch {:3} step {:6} lr {:.3e} loss {:.4} token error {:.2}%",
            &loaded.hash[..12],
            r.epoch,
            r.step,
            r.lr,
            r.loss,
            100.0 * r.token_error
        );
    }
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    write_file(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
    let record = RunRecord {
        config_sha256: &loaded.hash,
        config: run,
        epochs: &log.epochs,
    };
    let json = serde_json::to_string_pretty(&record).expect("run record serialises");
    write_file(&out.join("run.json"), json.as_bytes())?;
    eprintln!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct Hypothesis<'a> {
    id: &'a str,
    labels: &'a [usize],
    log_prob: f64,
    truncated: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn decode(
    config_path: Option<&Path>,
    overrides: &[String],
    checkpoint: &Path,
    data: &Path,
    mode: Option<DecodeMode>,
    beam_width: Option<usize>,
    max_symbols: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load_optional(config_path, overrides)?;
    let model = load_checkpoint(checkpoint)?;
    let mut settings = config::DecodeSection::default();
    if let Some(l) = &loaded {
        if l.run.model != model.config {
            return Err(CliError::Usage(format!(
                "checkpoint/config mismatch: {} was trained with a different [model] section than {}",
                checkpoint.display(),
                config_path.expect("loaded implies a path").display()
            )));
        }
        settings = l.run.decode.clone();
        eprintln!("config sha256 {}", l.hash);
    }
    let mode = mode.unwrap_or(settings.mode);
    let width = beam_width.unwrap_or(settings.beam_width);
    let max_symbols = max_symbols.or(settings.max_symbols);
    if width == 0 {
        return Err(CliError::Usage("beam width must be positive".into()));
    }
    let dataset = read_dataset(data)?;
    check_data(&model.config, &dataset, data)?;

    let mut be = snurnnt::numerics::Eager::new();
    let mut lines = String::new();
    let mut hyps = Vec::with_capacity(dataset.len());
    let mut total_log_prob = 0.0;
    for u in &dataset {
        let r = match mode {
            DecodeMode::Greedy => greedy_decode_with(&mut be, &model, &u.features, max_symbols)?,
            DecodeMode::Beam => beam_decode_with(&mut be, &model, &u.features, width, max_symbols)?,
        };
        let record = Hypothesis {
            id: &u.id,
            labels: &r.labels,
            log_prob: r.log_prob,
            truncated: r.truncated,
        };
        lines.push_str(&serde_json::to_string(&record).expect("hypothesis serialises"));
        lines.push('\n');
        total_log_prob += r.log_prob;
        hyps.push(r.labels);
    }
    match out {
        Some(p) => write_file(p, lines.as_bytes())?,
        None => {
            let _ = std::io::stdout().write_all(lines.as_bytes());
        }
    }
    let n = dataset.len().max(1) as f64;
    eprintln!("decoded {} utterances, mean log-prob {:.4}", dataset.len(), total_log_prob / n);
    if dataset.iter().any(|u| !u.labels.is_empty()) {
        let ter = token_error_rate(hyps.iter().zip(&dataset).map(|(h, u)| (h.as_slice(), u.labels.as_slice())));
        eprintln!("token error {:.2}%", 100.0 * ter);
    }
    Ok(())
}

/// Encoder, prediction and full rows for one config, each relative to an
/// all-LSTM model of the same shape.
fn config_report(config: &TransducerConfig) -> CostReport {
    let mut base = config.clone();
    base.encoder.variant = Variant::Lstm;
    base.prediction.variant = Variant::Lstm;
    let mut report = CostReport::default();
    let (enc, pred) = (config.encoder.variant, config.prediction.variant);
    report.push_relative(enc.to_string(), Subnetwork::Encoder, encoder_cost(config), encoder_cost(&base));
    report.push_relative(pred.to_string(), Subnetwork::Prediction, prediction_cost(config), prediction_cost(&base));
    report.push_relative(format!("{enc} / {pred}"), Subnetwork::Full, model_cost(config), model_cost(&base));
    report
}

fn count_report(loaded: Option<&LoadedConfig>) -> CostReport {
    match loaded {
        Some(l) => config_report(&l.run.model),
        None => reference_cost_report(),
    }
}

pub fn count(config_path: Option<&Path>, overrides: &[String]) -> Result<(), CliError> {
    let loaded = load_optional(config_path, overrides)?;
    print!("{}", count_report(loaded.as_ref()).counts_csv());
    Ok(())
}

pub fn profile(
    config_path: Option<&Path>,
    overrides: &[String],
    lengths: &[usize],
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if lengths.contains(&0) {
        return Err(CliError::Usage("utterance lengths must be positive".into()));
    }
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let loaded = load_optional(config_path, overrides)?;
    if let Some(l) = &loaded {
        eprintln!("config sha256 {}", l.hash);
    }
    let mut report = count_report(loaded.as_ref());
    if !lengths.is_empty() {
        if !pin_to_one_cpu() {
            eprintln!("warning: could not pin to one CPU; timings may be noisy");
        }
        let models = match &loaded {
            Some(l) => vec![(l.run.model.clone(), l.run.init_seed)],
            None => vec![
                (full_size_config(Variant::SsnuOR, Variant::SsnuAR), seed),
                (full_size_config(Variant::Lstm, Variant::Lstm), seed),
            ],
        };
        for (config, init_seed) in models {
            let model = TransducerModel::new(config, init_seed)?;
            report.timing.extend(time_decode(&model, lengths, repeats, seed)?);
        }
    }
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
            write_file(&dir.join("counts.csv"), report.counts_csv().as_bytes())?;
            if !report.timing.is_empty() {
                write_file(&dir.join("timing.csv"), report.timing_csv().as_bytes())?;
            }
        }
        None => {
            print!("{}", report.counts_csv());
            if !report.timing.is_empty() {
                println!();
                print!("{}", report.timing_csv());
            }
        }
    }
    Ok(())
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum of a 4-step unroll of one cell, `m = n = 5`.
fn check_cell(variant: Variant, check: &GradCheck, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, CliError> {
    let config = CellConfig::new(variant, 5, 5);
    let params = CellParams::init(&config, rng);
    let inputs: Vec<Tensor> = (0..4).map(|_| random_vector(rng, 5)).collect();
    let weights: Vec<Tensor> = (0..4).map(|_| random_vector(rng, 5)).collect();
    let values: BTreeMap<String, Tensor> = params
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::clone(v)))
        .collect();
    let report = check.run(
        |tape, vars| -> snurnnt::Result<_> {
            let cell = BoundCell::from_named(&config, vars, "")?;
            let xs: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let ys = cell.run_layer(tape, &xs)?;
            let mut total = None;
            for (y, w) in ys.iter().zip(&weights) {
                let w = tape.constant(w.clone());
                let p = tape.mul(y, &w)?;
                let s = tape.sum(&p)?;
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(&acc, &s)?,
                });
            }
            Ok(total.expect("four steps"))
        },
        &values,
    )?;
    Ok(report)
}

/// Two-layer, four-unit transducer on three frames and two labels.
fn check_transducer(
    encoder: Variant,
    prediction: Variant,
    check: &GradCheck,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, CliError> {
    let mut config = TransducerConfig::new(
        3,
        3,
        EncoderConfig {
            variant: encoder,
            layers: 2,
            units: 4,
        },
        PredictionConfig {
            variant: prediction,
            units: 4,
            embed_dim: 3,
        },
    );
    config.joint_dim = 4;
    let model = TransducerModel::new(config, rng.random())?;
    let features = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sizes agree");
    let report = check.run(
        |tape, vars| {
            let bound = model.bind_from(vars)?;
            bound.loss(tape, &features, &[1, 2], None)
        },
        &model.param_map(),
    )?;
    Ok(report)
}

pub fn gradcheck(
    config_path: Option<&Path>,
    overrides: &[String],
    tol: f64,
    seed: u64,
    corrupt_op: Option<&str>,
) -> Result<(), CliError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(CliError::Usage(format!("--tol must be a positive number, got {tol}")));
    }
    let corrupt = corrupt_op
        .map(|s| s.parse::<OpKind>().map_err(CliError::Usage))
        .transpose()?;
    let loaded = load_optional(config_path, overrides)?;
    let pairs = match &loaded {
        Some(l) => vec![(l.run.model.encoder.variant, l.run.model.prediction.variant)],
        None => vec![(Variant::SsnuOR, Variant::SsnuAR), (Variant::Lstm, Variant::Lstm)],
    };
    let mut check = GradCheck::new(1e-5, tol);
    check.corrupt = corrupt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failed = Vec::new();
    let mut report_line = |name: String, r: &GradCheckReport| {
        let mark = if r.passed() { "PASS" } else { "FAIL" };
        let worst = r
            .worst_param
            .as_ref()
            .map(|(p, i)| format!(" (worst {p}[{i}])"))
            .unwrap_or_default();
        println!("{mark} {name}: max relative error {:.2e}{worst}", r.max_rel_error);
        if !r.passed() {
            failed.push(name);
        }
    };
    for variant in Variant::ALL {
        let r = check_cell(variant, &check, &mut rng)?;
        report_line(format!("cell {variant}"), &r);
    }
    for (enc, pred) in pairs {
        let r = check_transducer(enc, pred, &check, &mut rng)?;
        report_line(format!("transducer {enc} / {pred}"), &r);
    }
    if failed.is_empty() {
        return Ok(());
    }
    let broken: Vec<String> = check_op_rules(corrupt, tol, seed)
        .into_iter()
        .filter(|c| !c.passed)
        .map(|c| {
            println!("FAIL op {}: isolated backward rule error {:.2e}", c.kind, c.max_rel_error);
            c.kind.to_string()
        })
        .collect();
    let culprit = if broken.is_empty() {
        "every op passes in isolation".to_string()
    } else {
        format!("faulty backward rule: {}", broken.join(", "))
    };
    Err(CliError::Verification(format!("{} ({culprit})", failed.join(", "))))
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    /// Output dataset (line-delimited JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    utterances: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Frames per label, MIN,MAX inclusive.
    #[arg(long, value_parser = parse_range, default_value = "2,5")]
    frames_per_symbol: (usize, usize),
    /// Labels per utterance, MIN,MAX inclusive.
    #[arg(long, value_parser = parse_range, default_value = "3,8")]
    labels: (usize, usize),
    /// Also write this many held-out utterances from the same prototypes.
    #[arg(long, default_value_t = 0)]
    heldout: usize,
    #[arg(long)]
    heldout_out: Option<PathBuf>,
    /// Append first and second time differences (F becomes 3F).
    #[arg(long)]
    deltas: bool,
    /// Concatenate frame pairs (halves T, doubles F).
    #[arg(long)]
    stack: bool,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected MIN,MAX, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let spec = ToyTaskSpec {
        vocab_size: args.vocab,
        frames_per_symbol: args.frames_per_symbol,
        labels_per_utterance: args.labels,
        feature_dim: args.feature_dim,
        noise: args.noise,
        utterances: args.utterances,
        seed: args.seed,
    };
    let transform = |mut data: Vec<Utterance>| -> Result<Vec<Utterance>, CliError> {
        for u in &mut data {
            if args.deltas {
                u.features = add_deltas(&u.features)?;
            }
            if args.stack {
                u.features = stack_frames(&u.features)?;
            }
        }
        Ok(data)
    };
    let train = transform(spec.generate()?.utterances)?;
    write_dataset(&args.out, &train)?;
    let width = train[0].features.shape()[1];
    eprintln!("wrote {} utterances ({width}-dim features) to {}", train.len(), args.out.display());
    if args.heldout > 0 {
        let path = args
            .heldout_out
            .as_ref()
            .ok_or_else(|| CliError::Usage("--heldout needs --heldout-out".into()))?;
        let held = transform(spec.generate_heldout(args.heldout)?.utterances)?;
        write_dataset(path, &held)?;
        eprintln!("wrote {} held-out utterances to {}", held.len(), path.display());
    }
    Ok(())
}
