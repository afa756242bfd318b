//! Synthetic sequential task streams.
//!
//! Each task owns a contiguous vocabulary window. Inside the window the
//! first `n_sym` ids are value symbols, the next id is the separator, and
//! the remaining ids are filler noise. Every sequence starts with
//! [`NOISE_PREFIX`] noise tokens so train and eval draws can be kept
//! disjoint at the sequence level while sharing the underlying rule.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_for};

pub const NOISE_PREFIX: usize = 3;
pub const MIN_WINDOW: usize = 8;
/// One in `EVAL_MODULUS` sequences (by hash) belongs to the eval split.
const EVAL_MODULUS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ModularSum,
    SequenceReverseProbe,
    Parity,
    PatternMatch,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::ModularSum,
        Family::SequenceReverseProbe,
        Family::Parity,
        Family::PatternMatch,
    ];

    pub fn prompt_len(self) -> usize {
        NOISE_PREFIX
            + match self {
                Family::ModularSum => 3,
                Family::SequenceReverseProbe => 6,
                Family::Parity => 4,
                Family::PatternMatch => 6,
            }
    }

    pub fn answer_len(self) -> usize {
        match self {
            Family::PatternMatch => 2,
            _ => 1,
        }
    }

    pub fn seq_len(self) -> usize {
        self.prompt_len() + self.answer_len()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::ModularSum => "modular-sum",
            Family::SequenceReverseProbe => "sequence-reverse-probe",
            Family::Parity => "parity",
            Family::PatternMatch => "pattern-match",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabWindow {
    pub start: usize,
    pub len: usize,
}

impl VocabWindow {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn n_symbols(&self) -> usize {
        8.min(self.len - 4)
    }

    pub fn symbol(&self, v: usize) -> usize {
        debug_assert!(v < self.n_symbols());
        self.start + v
    }

    pub fn separator(&self) -> usize {
        self.start + self.n_symbols()
    }

    pub fn noise(&self) -> std::ops::Range<usize> {
        self.separator() + 1..self.end()
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end()).contains(&token)
    }

    pub fn intersects(&self, other: &VocabWindow) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Disjoint,
    Overlapping,
    Duplicate,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Similarity::Disjoint),
            "overlapping" => Ok(Similarity::Overlapping),
            "duplicate" => Ok(Similarity::Duplicate),
            other => Err(Error::config("similarity", format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Disjoint => "disjoint",
            Similarity::Overlapping => "overlapping",
            Similarity::Duplicate => "duplicate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family: Family,
    pub vocab_window: VocabWindow,
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub similarity_key: String,
    pub seed: u64,
}

impl TaskSpec {
    pub fn answer_positions(&self) -> std::ops::Range<usize> {
        self.family.prompt_len()..self.seq_len
    }

    pub fn prompt<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        &seq[..self.family.prompt_len()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub similarity: Similarity,
    pub vocab_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            similarity: Similarity::Disjoint,
            vocab_size: 64,
            train_size: 2000,
            eval_size: 200,
        }
    }
}

/// Builds the task list for a stream.
pub fn generate_stream(cfg: &StreamConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    let n = cfg.n_tasks;
    if n < 2 {
        return Err(Error::config("stream.n_tasks", "a stream needs at least 2 tasks"));
    }
    let windows: Vec<VocabWindow> = match cfg.similarity {
        Similarity::Disjoint => {
            let len = cfg.vocab_size / n;
            if len < MIN_WINDOW {
                return Err(Error::config(
                    "stream.vocab_size",
                    format!(
                        "{} tokens cannot hold {n} disjoint windows of at least {MIN_WINDOW}",
                        cfg.vocab_size
                    ),
                ));
            }
            (0..n).map(|k| VocabWindow { start: k * len, len }).collect()
        }
        Similarity::Overlapping => {
            let len = (2 * cfg.vocab_size / (n + 1)).min(16) & !1;
            if len < MIN_WINDOW {
                return Err(Error::config(
                    "stream.vocab_size",
                    format!("{} tokens cannot hold {n} half-overlapping windows", cfg.vocab_size),
                ));
            }
            (0..n).map(|k| VocabWindow { start: k * len / 2, len }).collect()
        }
        Similarity::Duplicate => {
            let len = 16.min(cfg.vocab_size);
            if len < MIN_WINDOW {
                return Err(Error::config("stream.vocab_size", "vocabulary below one window"));
            }
            vec![VocabWindow { start: 0, len }; n]
        }
    };
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(k, w)| {
            let family = match cfg.similarity {
                Similarity::Duplicate => Family::ALL[0],
                _ => Family::ALL[k % Family::ALL.len()],
            };
            TaskSpec {
                task_id: k,
                family,
                vocab_window: w,
                seq_len: family.seq_len(),
                train_size: cfg.train_size,
                eval_size: cfg.eval_size,
                similarity_key: format!("{family}@{}..{}", w.start, w.end()),
                seed: derive_seed(seed, "task-spec", k as u64),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// A batch of equal-length sequences from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task_id: usize,
    pub seq_len: usize,
    /// Row-major `[batch, seq_len]`.
    pub tokens: Vec<usize>,
    /// True exactly at answer positions.
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn from_sequences(task_id: usize, seqs: &[&[usize]], answer: std::ops::Range<usize>) -> Result<Self> {
        let seq_len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if seqs.iter().any(|s| s.len() != seq_len) {
            return Err(Error::Contract("batch sequences must share one length".into()));
        }
        let tokens: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let loss_mask = (0..tokens.len())
            .map(|i| answer.contains(&(i % seq_len.max(1))))
            .collect();
        Ok(Self {
            task_id,
            seq_len,
            tokens,
            loss_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len().checked_div(self.seq_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Next-token targets and weights per `[batch * seq]` logit row: row
    /// `t - 1` predicts the answer token at `t`.
    pub fn targets(&self) -> (Vec<usize>, Vec<f64>) {
        let n = self.tokens.len();
        let mut targets = vec![0usize; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            if self.loss_mask[i] && i % self.seq_len > 0 {
                targets[i - 1] = self.tokens[i];
                weights[i - 1] = 1.0;
            }
        }
        (targets, weights)
    }
}

/// Family rule applied to a prompt's value symbols.
pub fn answer_values(family: Family, n_sym: usize, values: &[usize]) -> Vec<usize> {
    match family {
        Family::ModularSum => vec![(values[0] + values[1]) % n_sym],
        Family::SequenceReverseProbe => {
            let k = values[4];
            vec![values[3 - k]]
        }
        Family::Parity => vec![values.iter().sum::<usize>() % 2],
        Family::PatternMatch => vec![values[1], values[0]],
    }
}

fn draw_sequence<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Vec<usize> {
    let w = spec.vocab_window;
    let n_sym = w.n_symbols();
    let noise = w.noise();
    let mut seq: Vec<usize> = (0..NOISE_PREFIX).map(|_| rng.gen_range(noise.clone())).collect();
    let values: Vec<usize> = match spec.family {
        Family::ModularSum => vec![rng.gen_range(0..n_sym), rng.gen_range(0..n_sym)],
        Family::SequenceReverseProbe => {
            let mut v: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n_sym)).collect();
            v.push(rng.gen_range(0..4));
            v
        }
        Family::Parity => (0..3).map(|_| rng.gen_range(0..2)).collect(),
        Family::PatternMatch => {
            let a = rng.gen_range(0..n_sym);
            let mut b = rng.gen_range(0..n_sym - 1);
            if b >= a {
                b += 1;
            }
            vec![a, b]
        }
    };
    let prompt_values: Vec<usize> = match spec.family {
        Family::PatternMatch => vec![values[0], values[1], values[0], values[1], values[0]],
        _ => values.clone(),
    };
    match spec.family {
        Family::SequenceReverseProbe => {
            seq.extend(prompt_values[..4].iter().map(|&v| w.symbol(v)));
            seq.push(w.separator());
            seq.push(w.symbol(prompt_values[4]));
        }
        _ => {
            seq.extend(prompt_values.iter().map(|&v| w.symbol(v)));
            seq.push(w.separator());
        }
    }
    seq.extend(answer_values(spec.family, n_sym, &values).into_iter().map(|v| w.symbol(v)));
    debug_assert_eq!(seq.len(), spec.seq_len);
    seq
}

/// Split membership is a pure function of (task seed, sequence).
pub fn split_of(spec: &TaskSpec, seq: &[usize]) -> Split {
    let mut h = spec.seed;
    for &t in seq {
        h = derive_seed(h, "split", t as u64);
    }
    if h.is_multiple_of(EVAL_MODULUS) {
        Split::Eval
    } else {
        Split::Train
    }
}

pub fn sample_sequences<R: Rng + ?Sized>(spec: &TaskSpec, split: Split, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = draw_sequence(spec, rng);
        if split_of(spec, &s) == split {
            out.push(s);
        }
    }
    out
}

pub fn sample_batch<R: Rng + ?Sized>(spec: &TaskSpec, split: Split, batch_size: usize, rng: &mut R) -> Result<Batch> {
    let seqs = sample_sequences(spec, split, batch_size, rng);
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    Batch::from_sequences(spec.task_id, &refs, spec.answer_positions())
}

/// The full training set of a task, in training order.
pub fn train_set(spec: &TaskSpec) -> Vec<Vec<usize>> {
    let mut rng = rng_for(spec.seed, "train-set", 0);
    sample_sequences(spec, Split::Train, spec.train_size, &mut rng)
}

pub fn eval_set(spec: &TaskSpec) -> Vec<Vec<usize>> {
    let mut rng = rng_for(spec.seed, "eval-set", 0);
    sample_sequences(spec, Split::Eval, spec.eval_size, &mut rng)
}

/// Fraction of samples whose answer tokens all equal the greedy argmax of
/// the logits one position earlier. `logits` is row-major `[batch, seq, vocab]`.
pub fn exact_match_accuracy(logits: &[f64], vocab: usize, batch: &Batch) -> Result<f64> {
    Ok(exact_match_count(logits, vocab, batch)? as f64 / batch.len() as f64)
}

/// Number of exactly matched samples; see [`exact_match_accuracy`].
pub fn exact_match_count(logits: &[f64], vocab: usize, batch: &Batch) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Contract("accuracy over an empty batch".into()));
    }
    if logits.len() != batch.tokens.len() * vocab {
        return Err(Error::Dimension {
            op: "exact_match_accuracy",
            lhs: vec![logits.len()],
            rhs: vec![batch.tokens.len(), vocab],
        });
    }
    let s = batch.seq_len;
    let mut correct = 0usize;
    for b in 0..batch.len() {
        let ok = (1..s).filter(|&t| batch.loss_mask[b * s + t]).all(|t| {
            let row = &logits[(b * s + t - 1) * vocab..(b * s + t) * vocab];
            argmax(row) == batch.tokens[b * s + t]
        });
        correct += ok as usize;
    }
    Ok(correct)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub version: u32,
    pub seed: u64,
    pub config: StreamConfig,
    pub tasks: Vec<TaskSpec>,
}

impl StreamManifest {
    pub const VERSION: u32 = 1;

    pub fn build(cfg: &StreamConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            version: Self::VERSION,
            seed,
            config: cfg.clone(),
            tasks: generate_stream(cfg, seed)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::corrupt("stream manifest", e.to_string()))?;
        if m.version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: m.version,
            });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    fn spec(family: Family) -> TaskSpec {
        TaskSpec {
            task_id: 0,
            family,
            vocab_window: VocabWindow { start: 16, len: 16 },
            seq_len: family.seq_len(),
            train_size: 10,
            eval_size: 10,
            similarity_key: "k".into(),
            seed: 42,
        }
    }

    #[test]
    fn modular_sum_rule() {
        assert_eq!(answer_values(Family::ModularSum, 8, &[3, 7]), vec![2]);
    }

    #[test]
    fn parity_of_zeros_is_even() {
        assert_eq!(answer_values(Family::Parity, 8, &[0, 0, 0]), vec![0]);
    }

    #[test]
    fn mask_only_at_answers() {
        let s = spec(Family::PatternMatch);
        let b = sample_batch(&s, Split::Train, 3, &mut rng_for(1, "t", 0)).unwrap();
        for i in 0..b.tokens.len() {
            let pos = i % b.seq_len;
            assert_eq!(b.loss_mask[i], pos >= s.family.prompt_len());
        }
        assert!(b.tokens.iter().all(|&t| s.vocab_window.contains(t)));
    }

    #[test]
    fn disjoint_windows_partition_vocab() {
        let specs = generate_stream(&StreamConfig::default(), 3).unwrap();
        assert_eq!(specs.len(), 4);
        for (i, a) in specs.iter().enumerate() {
            assert_eq!(a.vocab_window.len, 16);
            for b in &specs[i + 1..] {
                assert!(!a.vocab_window.intersects(&b.vocab_window));
                assert_ne!(a.family, b.family);
            }
        }
    }

    #[test]
    fn overlapping_windows_half_overlap() {
        let cfg = StreamConfig {
            similarity: Similarity::Overlapping,
            ..Default::default()
        };
        let specs = generate_stream(&cfg, 3).unwrap();
        for w in specs.windows(2) {
            let (a, b) = (w[0].vocab_window, w[1].vocab_window);
            assert_eq!(a.end() - b.start, a.len / 2);
        }
    }

    #[test]
    fn duplicate_specs_differ_only_in_seed() {
        let cfg = StreamConfig {
            similarity: Similarity::Duplicate,
            ..Default::default()
        };
        let specs = generate_stream(&cfg, 3).unwrap();
        for s in &specs[1..] {
            let mut t = s.clone();
            t.task_id = 0;
            t.seed = specs[0].seed;
            assert_eq!(t, specs[0]);
            assert_ne!(s.seed, specs[0].seed);
        }
    }

    #[test]
    fn stream_is_seeded() {
        let cfg = StreamConfig::default();
        assert_eq!(generate_stream(&cfg, 9).unwrap(), generate_stream(&cfg, 9).unwrap());
        assert_ne!(generate_stream(&cfg, 9).unwrap(), generate_stream(&cfg, 10).unwrap());
    }

    #[test]
    fn small_vocab_rejected() {
        let cfg = StreamConfig {
            vocab_size: 20,
            ..Default::default()
        };
        assert!(matches!(generate_stream(&cfg, 0), Err(Error::Config { .. })));
        let cfg = StreamConfig {
            n_tasks: 1,
            ..Default::default()
        };
        assert!(generate_stream(&cfg, 0).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let s = spec(Family::ModularSum);
        let b = sample_batch(&s, Split::Train, 4, &mut rng_for(1, "t", 0)).unwrap();
        let vocab = 64;
        let mut logits = vec![0.0; b.tokens.len() * vocab];
        let (targets, weights) = b.targets();
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w > 0.0 {
                logits[r * vocab + t] = 1.0;
            }
        }
        assert_eq!(exact_match_accuracy(&logits, vocab, &b).unwrap(), 1.0);
        let empty = Batch {
            task_id: 0,
            seq_len: 4,
            tokens: vec![],
            loss_mask: vec![],
        };
        assert!(exact_match_accuracy(&[], vocab, &empty).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = StreamManifest::build(&StreamConfig::default(), 5).unwrap();
        assert_eq!(StreamManifest::from_json(&m.to_json()).unwrap(), m);
    }
}
