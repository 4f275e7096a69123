//! Greedy and beam-search decoding.
//!
//! Both decoders run on the eager backend. A frame ends when blank is
//! emitted; the last frame also ends with blank, matching the loss. The
//! total number of emitted labels is capped (default `10 T`); once the cap
//! is reached only blank is allowed and the result is marked truncated.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::cells::CellState;
use crate::numerics::kernels::log_add_exp;
use crate::numerics::{Eager, Tensor};
use crate::transducer::{BoundTransducer, TransducerModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub labels: Vec<usize>,
    /// Greedy: log-probability of the chosen alignment. Beam: merged
    /// log-probability of the label sequence over the explored alignments.
    pub log_prob: f64,
    /// True if the symbol cap forced a blank at least once.
    pub truncated: bool,
    /// Emitted symbols in order, blanks included.
    pub alignment: Vec<usize>,
}

type Value = Arc<Tensor>;

struct Prepared {
    bound: BoundTransducer<Value>,
    enc: Vec<Value>,
    limit: usize,
}

fn prepare(be: &mut Eager, model: &TransducerModel, features: &Tensor, max_symbols: Option<usize>) -> Result<Prepared> {
    let bound = model.bind(be)?;
    let h = bound.encode(be, features, None)?;
    let enc = h
        .iter()
        .map(|v| bound.project_encoder(be, v))
        .collect::<Result<Vec<_>>>()?;
    let limit = max_symbols.unwrap_or(10 * enc.len());
    Ok(Prepared { bound, enc, limit })
}

/// Highest log-probability symbol. Ties go to blank, then to the lowest
/// label index, which matches the beam ordering below.
fn argmax(v: &[f64], blank: usize) -> usize {
    let mut best = blank;
    for (i, &x) in v[..blank].iter().enumerate() {
        if x > v[best] || (x == v[best] && best != blank && i < best) {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &TransducerModel, features: &Tensor) -> Result<DecodeResult> {
    greedy_decode_with(&mut Eager::new(), model, features, None)
}

pub fn greedy_decode_with(
    be: &mut Eager,
    model: &TransducerModel,
    features: &Tensor,
    max_symbols: Option<usize>,
) -> Result<DecodeResult> {
    let Prepared { bound, enc, limit } = prepare(be, model, features, max_symbols)?;
    let blank = bound.blank();
    let start = bound.prediction_start(be);
    let (h, mut state) = bound.predict_step(be, blank, &start, None)?;
    let mut pred = bound.project_prediction(be, &h)?;
    let mut out = DecodeResult {
        labels: Vec::new(),
        log_prob: 0.0,
        truncated: false,
        alignment: Vec::new(),
    };
    for e in &enc {
        loop {
            let row = bound.joint_projected(be, e, &pred)?;
            let mut k = argmax(row.data(), blank);
            if k != blank && out.labels.len() >= limit {
                k = blank;
                out.truncated = true;
            }
            out.log_prob += row.data()[k];
            out.alignment.push(k);
            if k == blank {
                break;
            }
            out.labels.push(k);
            let (h, next) = bound.predict_step(be, k, &state, None)?;
            pred = bound.project_prediction(be, &h)?;
            state = next;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    labels: Vec<usize>,
    score: f64,
    /// Best single alignment among merged paths.
    best_path: f64,
    alignment: Vec<usize>,
    truncated: bool,
    /// Finished the current frame (emitted blank).
    done: bool,
    state: CellState<Value>,
    pred: Value,
}

/// Score descending, then lower label index, then the shorter sequence,
/// then unfinished before finished. Plain lexicographic order on the
/// label vectors covers the middle two.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.cmp(&b.labels))
        .then_with(|| a.done.cmp(&b.done))
}

fn merge_into(pool: &mut Vec<Hyp>, hyp: Hyp) {
    if let Some(existing) = pool.iter_mut().find(|h| h.done == hyp.done && h.labels == hyp.labels) {
        existing.score = log_add_exp(existing.score, hyp.score);
        existing.truncated |= hyp.truncated;
        if hyp.best_path > existing.best_path {
            existing.best_path = hyp.best_path;
            existing.alignment = hyp.alignment;
        }
    } else {
        pool.push(hyp);
    }
}

pub fn beam_decode(model: &TransducerModel, features: &Tensor, width: usize) -> Result<DecodeResult> {
    beam_decode_with(&mut Eager::new(), model, features, width, None)
}

/// Beam search keeping `width` hypotheses. Label sequences reached by
/// different alignments are merged by summing their probabilities.
/// With `width = 1` this reproduces [`greedy_decode_with`] exactly.
pub fn beam_decode_with(
    be: &mut Eager,
    model: &TransducerModel,
    features: &Tensor,
    width: usize,
    max_symbols: Option<usize>,
) -> Result<DecodeResult> {
    if width == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let Prepared { bound, enc, limit } = prepare(be, model, features, max_symbols)?;
    let blank = bound.blank();
    let start = bound.prediction_start(be);
    let (h, state) = bound.predict_step(be, blank, &start, None)?;
    let pred = bound.project_prediction(be, &h)?;
    let mut beam = vec![Hyp {
        labels: Vec::new(),
        score: 0.0,
        best_path: 0.0,
        alignment: Vec::new(),
        truncated: false,
        done: false,
        state,
        pred,
    }];
    for e in &enc {
        let mut active = std::mem::take(&mut beam);
        let mut finished: Vec<Hyp> = Vec::new();
        while !active.is_empty() {
            let mut pool: Vec<Hyp> = Vec::new();
            for h in finished.drain(..) {
                merge_into(&mut pool, h);
            }
            for h in &active {
                let row = bound.joint_projected(be, e, &h.pred)?;
                let lp = row.data();
                let capped = h.labels.len() >= limit;
                let mut ended = h.clone();
                ended.score += lp[blank];
                ended.best_path += lp[blank];
                ended.alignment.push(blank);
                ended.done = true;
                if capped {
                    ended.truncated |= (0..blank).any(|k| lp[k] > lp[blank]);
                } else {
                    for (k, &p) in lp[..blank].iter().enumerate() {
                        let mut ext = h.clone();
                        ext.score += p;
                        ext.best_path += p;
                        ext.alignment.push(k);
                        ext.labels.push(k);
                        merge_into(&mut pool, ext);
                    }
                }
                merge_into(&mut pool, ended);
            }
            pool.sort_by(rank);
            pool.truncate(width);
            active.clear();
            for mut h in pool {
                if h.done {
                    finished.push(h);
                } else {
                    let last = *h.labels.last().expect("active hypotheses extend a label");
                    let (out, next) = bound.predict_step(be, last, &h.state, None)?;
                    h.pred = bound.project_prediction(be, &out)?;
                    h.state = next;
                    active.push(h);
                }
            }
        }
        beam = finished
            .into_iter()
            .map(|mut h| {
                h.done = false;
                h
            })
            .collect();
    }
    beam.sort_by(rank);
    let best = beam.into_iter().next().expect("beam is never empty");
    Ok(DecodeResult {
        labels: best.labels,
        log_prob: best.score,
        truncated: best.truncated,
        alignment: best.alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Variant;
    use crate::transducer::tests::tiny_config;
    use crate::transducer::{model_lattice, rnnt_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, 3, (0..t * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn width_one_matches_greedy() {
        for (i, v) in Variant::ALL.iter().enumerate() {
            let model = TransducerModel::new(tiny_config(*v), 10 + i as u64).unwrap();
            let x = features(5, i as u64);
            let g = greedy_decode(&model, &x).unwrap();
            let b = beam_decode(&model, &x, 1).unwrap();
            assert_eq!(g, b, "{v}");
        }
    }

    #[test]
    fn greedy_log_prob_is_sum_along_alignment() {
        let model = TransducerModel::new(tiny_config(Variant::SsnuOR), 7).unwrap();
        let x = features(4, 3);
        let g = greedy_decode(&model, &x).unwrap();
        assert_eq!(g.alignment.iter().filter(|&&k| k == 3).count(), 4);
        let lattice = model_lattice(&model, &x, &g.labels).unwrap();
        let (mut t, mut u, mut total) = (0, 0, 0.0);
        for &k in &g.alignment {
            total += lattice.get(t, u, k);
            if k == 3 {
                t += 1;
            } else {
                u += 1;
            }
        }
        assert!((total - g.log_prob).abs() < 1e-12);
    }

    fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for k in 0..vocab {
                    let mut e: Vec<usize> = s.clone();
                    e.push(k);
                    next.push(e);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn unpruned_beam_finds_most_probable_sequence() {
        // With an unbounded beam every alignment is explored, so the merged
        // score of each sequence is its exact likelihood.
        for seed in 0..4 {
            let mut config = tiny_config(Variant::SsnuAR);
            config.vocab_size = 2;
            config.blank_bias = -1.0;
            let model = TransducerModel::new(config, seed).unwrap();
            let x = features(2, 100 + seed);
            let limit = 3;
            let b = beam_decode_with(&mut Eager::new(), &model, &x, 10_000, Some(limit)).unwrap();
            let (best, score) = all_sequences(2, limit)
                .into_iter()
                .map(|s| {
                    let lattice = model_lattice(&model, &x, &s).unwrap();
                    let ll = -rnnt_loss(&lattice, &s).unwrap();
                    (s, ll)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert_eq!(b.labels, best, "seed {seed}");
            assert!((b.log_prob - score).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn symbol_cap_forces_blank() {
        let mut config = tiny_config(Variant::Ssnu);
        config.blank_bias = -50.0;
        let model = TransducerModel::new(config, 1).unwrap();
        let x = features(3, 9);
        let g = greedy_decode_with(&mut Eager::new(), &model, &x, Some(4)).unwrap();
        assert!(g.truncated);
        assert_eq!(g.labels.len(), 4);
        let g = greedy_decode(&model, &x).unwrap();
        assert_eq!(g.labels.len(), 30);
        let b = beam_decode_with(&mut Eager::new(), &model, &x, 3, Some(4)).unwrap();
        assert!(b.labels.len() <= 4);
    }

    #[test]
    fn zero_width_is_rejected() {
        let model = TransducerModel::new(tiny_config(Variant::Lstm), 0).unwrap();
        assert!(beam_decode(&model, &features(2, 0), 0).is_err());
    }

    #[test]
    fn wide_beam_scores_at_least_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..6 {
            let model = TransducerModel::new(tiny_config(Variant::SsnuO), rng.random()).unwrap();
            let x = features(4, i);
            let g = greedy_decode(&model, &x).unwrap();
            let b = beam_decode(&model, &x, 16).unwrap();
            assert!(b.log_prob >= g.log_prob - 1e-12);
        }
    }

    #[test]
    fn ties_prefer_blank_then_lowest_label() {
        assert_eq!(argmax(&[-1.0, -1.0, -1.0], 2), 2);
        assert_eq!(argmax(&[-0.5, -0.5, -1.0], 2), 0);
        assert_eq!(argmax(&[-2.0, -0.5, -0.5, -1.0], 3), 1);
    }
}
