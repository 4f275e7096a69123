//! Exact parameter and multiplication counts, and decode timing.
//!
//! Multiplications are counted per output timestep, summed over all
//! layers and both encoder directions. An `n x m` matrix-vector product
//! costs `n m`; an elementwise product or scalar scaling of an
//! `n`-vector costs `n`; additions, subtractions and activations are free.
//!
//! Per cell step (input width `m`, `n` units, `[..]` only when recurrent):
//!
//! ```text
//! LSTM    4(nm + n^2) + 3n         f*c, i*s, o*tanh(c)
//! sSNU    nm [+ n^2] + 2n          d*s, (.)*(1 - y)
//! sSNU-a  sSNU + 3n [+ n^2]        rho*b, (1-rho)*drive, beta*b, [H_a y]
//! sSNU-o  sSNU + nm [+ n^2] + n    W_o x, [H_o y], y~ * gate
//! ```
//!
//! The embedding lookup and the joint network are outside the subnetwork
//! totals.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cells::{CellConfig, CellKind, Variant};
use crate::numerics::{Eager, Tensor};
use crate::transducer::{greedy_decode_with, EncoderConfig, PredictionConfig, TransducerConfig, TransducerModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub mults: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            mults: self.mults + o.mults,
        }
    }
}

impl std::ops::Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost {
            params: self.params * k,
            mults: self.mults * k,
        }
    }
}

/// Trainable scalars of one unidirectional layer.
pub fn count_params(config: &CellConfig) -> u64 {
    let (n, m) = (config.units as u64, config.input_size as u64);
    let v = config.variant;
    let rec = if v.recurrent() { n * n } else { 0 };
    match v.kind() {
        CellKind::Lstm => 4 * (n * m + n * n + n),
        CellKind::Ssnu => n * m + rec + n,
        CellKind::SsnuA => {
            let h_a = if v.axo_somatic_recurrent() { n * n } else { 0 };
            let rho = if v == Variant::SsnuARa { n } else { 0 };
            n * m + rec + n + h_a + rho
        }
        CellKind::SsnuO => 2 * (n * m + rec + n),
    }
}

/// Multiplications for one step of one unidirectional layer.
pub fn count_mults(config: &CellConfig) -> u64 {
    let (n, m) = (config.units as u64, config.input_size as u64);
    let v = config.variant;
    let rec = if v.recurrent() { n * n } else { 0 };
    let base = n * m + rec + 2 * n;
    match v.kind() {
        CellKind::Lstm => 4 * (n * m + n * n) + 3 * n,
        CellKind::Ssnu => base,
        CellKind::SsnuA => {
            let h_a = if v.axo_somatic_recurrent() { n * n } else { 0 };
            base + 3 * n + h_a
        }
        CellKind::SsnuO => base + n * m + rec + n,
    }
}

pub fn cell_cost(config: &CellConfig) -> Cost {
    Cost {
        params: count_params(config),
        mults: count_mults(config),
    }
}

/// Both directions of every encoder layer.
pub fn encoder_cost(config: &TransducerConfig) -> Cost {
    config
        .encoder_cells()
        .iter()
        .map(|c| cell_cost(c) * 2)
        .fold(Cost::default(), |a, b| a + b)
}

pub fn prediction_cost(config: &TransducerConfig) -> Cost {
    cell_cost(&config.prediction_cell())
}

pub fn model_cost(config: &TransducerConfig) -> Cost {
    encoder_cost(config) + prediction_cost(config)
}

/// Which part of the network a row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subnetwork {
    Encoder,
    Prediction,
    Full,
}

impl std::fmt::Display for Subnetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subnetwork::Encoder => "encoder",
            Subnetwork::Prediction => "prediction",
            Subnetwork::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub variant: String,
    pub subnetwork: Subnetwork,
    pub cost: Cost,
    pub percent_params: f64,
    pub percent_mults: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub variant: String,
    pub frames: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub timing: Vec<TimingRow>,
}

/// Whole-number percentage, with `<1` for anything below one percent.
pub fn format_percent(p: f64) -> String {
    if p < 1.0 {
        "<1".to_string()
    } else {
        format!("{}", p.round() as i64)
    }
}

impl CostReport {
    /// Adds rows relative to `baseline` (the first row typically is the
    /// baseline itself, at 100).
    pub fn push_relative(&mut self, variant: impl Into<String>, subnetwork: Subnetwork, cost: Cost, baseline: Cost) {
        self.rows.push(CostRow {
            variant: variant.into(),
            subnetwork,
            cost,
            percent_params: 100.0 * cost.params as f64 / baseline.params as f64,
            percent_mults: 100.0 * cost.mults as f64 / baseline.mults as f64,
        });
    }

    pub fn find(&self, variant: &str, subnetwork: Subnetwork) -> Option<&CostRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.subnetwork == subnetwork)
    }

    pub fn counts_csv(&self) -> String {
        let mut out = String::from("variant,subnetwork,params,mults,percent_params,percent_mults\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.variant,
                r.subnetwork,
                r.cost.params,
                r.cost.mults,
                format_percent(r.percent_params),
                format_percent(r.percent_mults)
            );
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("variant,T,mean_s,std_s\n");
        for r in &self.timing {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.variant, r.frames, r.mean_s, r.std_s);
        }
        out
    }
}

pub const FULL_SIZE_INPUT: usize = 340;
pub const FULL_SIZE_VOCAB: usize = 45;
pub const FULL_SIZE_ENCODER_LAYERS: usize = 6;
pub const FULL_SIZE_ENCODER_UNITS: usize = 640;
pub const FULL_SIZE_PREDICTION_UNITS: usize = 768;
pub const FULL_SIZE_EMBED: usize = 10;

/// The full-size transducer shape with the given unit types.
pub fn full_size_config(encoder: Variant, prediction: Variant) -> TransducerConfig {
    TransducerConfig::new(
        FULL_SIZE_INPUT,
        FULL_SIZE_VOCAB,
        EncoderConfig {
            variant: encoder,
            layers: FULL_SIZE_ENCODER_LAYERS,
            units: FULL_SIZE_ENCODER_UNITS,
        },
        PredictionConfig {
            variant: prediction,
            units: FULL_SIZE_PREDICTION_UNITS,
            embed_dim: FULL_SIZE_EMBED,
        },
    )
}

/// Prediction-network rows (LSTM encoder), encoder rows and full models,
/// each section relative to its all-LSTM baseline.
pub fn reference_cost_report() -> CostReport {
    use Variant::*;
    let mut report = CostReport::default();
    let base_pred = prediction_cost(&full_size_config(Lstm, Lstm));
    for v in [Lstm, Ssnu, SsnuR, SsnuA, SsnuAR, SsnuO, SsnuOR] {
        report.push_relative(v.to_string(), Subnetwork::Prediction, prediction_cost(&full_size_config(Lstm, v)), base_pred);
    }
    let base_enc = encoder_cost(&full_size_config(Lstm, Lstm));
    for v in [Lstm, SsnuARa, SsnuO, SsnuOR] {
        report.push_relative(v.to_string(), Subnetwork::Encoder, encoder_cost(&full_size_config(v, Lstm)), base_enc);
    }
    let base_full = model_cost(&full_size_config(Lstm, Lstm));
    for (e, p) in [(Lstm, Lstm), (SsnuOR, SsnuAR), (SsnuOR, SsnuOR)] {
        report.push_relative(format!("{e} / {p}"), Subnetwork::Full, model_cost(&full_size_config(e, p)), base_full);
    }
    report
}

/// Pins the calling thread to one logical CPU. Returns false where that
/// is unsupported or refused.
pub fn pin_to_one_cpu() -> bool {
    #[cfg(target_os = "linux")]
    // SAFETY: the set is zero-initialised and only passed to libc calls
    // that read or fill it; pid 0 refers to the calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return false;
        }
        let Some(cpu) = (0..libc::CPU_SETSIZE as usize).find(|&c| libc::CPU_ISSET(c, &set)) else {
            return false;
        };
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
    #[cfg(not(target_os = "linux"))]
    false
}

pub fn mean_and_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, _) = mean_and_std(x);
    let (my, _) = mean_and_std(y);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

/// Wall-clock greedy decoding of random `T x n_in` inputs, one row per
/// length. Each length gets one untimed warm-up decode, then `repeats`
/// timed ones.
pub fn time_decode(model: &TransducerModel, lengths: &[usize], repeats: usize, seed: u64) -> Result<Vec<TimingRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if lengths.contains(&0) {
        return Err(Error::Config("utterance lengths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = model.config.input_size;
    let variant = format!("{} / {}", model.config.encoder.variant, model.config.prediction.variant);
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let data = (0..t * width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let features = Tensor::matrix(t, width, data)?;
        greedy_decode_with(&mut Eager::new(), model, &features, None)?;
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let out = greedy_decode_with(&mut Eager::new(), model, &features, None)?;
            samples.push(start.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        let (mean_s, std_s) = mean_and_std(&samples);
        rows.push(TimingRow {
            variant: variant.clone(),
            frames: t,
            mean_s,
            std_s,
            samples: samples.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellParams;
    use crate::transducer::TransducerModel;
    use proptest::prelude::*;

    #[test]
    fn prediction_rows() {
        use Variant::*;
        let expect = [
            (Lstm, 2_393_088, 2_392_320),
            (Ssnu, 8_448, 9_216),
            (SsnuR, 598_272, 599_040),
            (SsnuA, 8_448, 11_520),
            (SsnuAR, 598_272, 601_344),
            (SsnuO, 16_896, 17_664),
            (SsnuOR, 1_196_544, 1_197_312),
        ];
        for (v, p, m) in expect {
            let c = prediction_cost(&full_size_config(Lstm, v));
            assert_eq!((c.params, c.mults), (p, m), "{v}");
        }
    }

    #[test]
    fn hand_ledger_for_unit_cell() {
        let c = CellConfig::new(Variant::Ssnu, 1, 1);
        assert_eq!(count_mults(&c), 3);
        assert_eq!(count_params(&c), 2);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.35), "<1");
        assert_eq!(format_percent(25.0), "25");
        assert_eq!(format_percent(48.94), "49");
    }

    #[test]
    fn report_percent_columns() {
        let r = reference_cost_report();
        let pct = |v: &str, s| format_percent(r.find(v, s).unwrap().percent_params);
        assert_eq!(pct("sSNU R", Subnetwork::Prediction), "25");
        assert_eq!(pct("sSNU-o R", Subnetwork::Prediction), "50");
        assert_eq!(pct("sSNU", Subnetwork::Prediction), "<1");
        assert_eq!(pct("sSNU-a Ra", Subnetwork::Encoder), "34");
        assert_eq!(pct("sSNU-o", Subnetwork::Encoder), "32");
        assert_eq!(pct("sSNU-o R / sSNU-a R", Subnetwork::Full), "49");
        let csv = r.counts_csv();
        assert!(csv.starts_with("variant,subnetwork,params,mults,percent_params,percent_mults\n"));
        assert!(csv.contains("LSTM,encoder,54200320,54192640,100,100"));
    }

    #[test]
    fn statistics_helpers() {
        let (m, s) = mean_and_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.290_994_448_735_805_6).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn timing_rows_have_requested_samples() {
        let mut config = full_size_config(Variant::SsnuOR, Variant::SsnuAR);
        config.input_size = 4;
        config.vocab_size = 3;
        config.encoder.layers = 1;
        config.encoder.units = 3;
        config.prediction.units = 3;
        config.joint_dim = 4;
        let model = TransducerModel::new(config, 0).unwrap();
        let rows = time_decode(&model, &[3, 5], 4, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.samples == 4 && r.mean_s > 0.0));
        assert!(time_decode(&model, &[3], 0, 1).is_err());
        assert!(time_decode(&model, &[0], 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn analytic_params_match_instantiated(
            vi in 0usize..8, m in 1usize..40, n in 1usize..40,
        ) {
            let config = CellConfig::new(Variant::ALL[vi], m, n);
            let params = CellParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
            prop_assert_eq!(count_params(&config), params.scalar_count() as u64);
        }
    }
}
