//! Synthetic dual-task benchmark with ground-truth task labels.
//!
//! Two deliberately opposed tasks share one token stream:
//!
//! - understanding: emit the majority content symbol of the input
//!   (compressive, order-invariant);
//! - generation: emit the input content reversed (expansive,
//!   order-sensitive; an MSE-mode regression target carries the same
//!   values normalized to `[0, 1]`).
//!
//! Sample generators are pure functions of `(seed, index)`, so datasets are
//! reproducible and parallel-safe. Export/import uses line-delimited JSON.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::TaskGroup;
use crate::transformer::{generate, ModelParams, TokenSequence};

/// Token-id layout: content symbols first, then the four specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSpec {
    pub content_symbols: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec { content_symbols: 32 }
    }
}

impl VocabSpec {
    pub fn und(&self) -> usize {
        self.content_symbols
    }

    pub fn gen(&self) -> usize {
        self.content_symbols + 1
    }

    pub fn sep(&self) -> usize {
        self.content_symbols + 2
    }

    pub fn pad(&self) -> usize {
        self.content_symbols + 3
    }

    /// Total vocabulary size (content + UND, GEN, SEP, PAD).
    pub fn total(&self) -> usize {
        self.content_symbols + 4
    }

    pub fn is_content(&self, token: usize) -> bool {
        token < self.content_symbols
    }
}

/// One labeled sample: prompt tokens, answer tokens, a 0/1 mask per answer
/// position, the ground-truth task group, and an optional regression target
/// (generation samples, for the MSE-mode loss).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<u8>,
    pub g_star: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regression: Option<Vec<f64>>,
}

impl TaskSample {
    pub fn group(&self) -> Result<TaskGroup> {
        TaskGroup::from_label(self.g_star)
    }

    /// Prompt and answer concatenated: the sequence the model trains on.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut seq = self.tokens.clone();
        seq.extend_from_slice(&self.target);
        seq
    }

    /// Next-token targets and answer mask aligned with `full_sequence`:
    /// position t predicts `full[t + 1]`; the mask selects positions whose
    /// successor is a masked-in answer token. The final position has no
    /// successor and is always masked out (targets use PAD there).
    pub fn ar_targets_and_mask(&self, vocab: &VocabSpec) -> (Vec<usize>, Vec<u8>) {
        let full = self.full_sequence();
        let n = full.len();
        let input_len = self.tokens.len();
        let mut targets = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for t in 0..n {
            if t + 1 < n {
                targets.push(full[t + 1]);
                let answer_pos = (t + 1).checked_sub(input_len);
                mask.push(match answer_pos {
                    Some(p) => self.mask[p],
                    None => 0,
                });
            } else {
                targets.push(vocab.pad());
                mask.push(0);
            }
        }
        (targets, mask)
    }

    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        TaskGroup::from_label(self.g_star)?;
        if self.tokens.is_empty() || self.target.is_empty() {
            return Err(Error::Parse("sample with empty tokens or target".into()));
        }
        if self.mask.len() != self.target.len() {
            return Err(Error::Parse(format!(
                "mask length {} != target length {}",
                self.mask.len(),
                self.target.len()
            )));
        }
        for &t in self.tokens.iter().chain(&self.target) {
            if t >= vocab.total() {
                return Err(Error::IndexOutOfRange(format!(
                    "token {t} outside vocabulary of {}",
                    vocab.total()
                )));
            }
        }
        if let Some(r) = &self.regression {
            if r.len() != self.target.len() {
                return Err(Error::Parse("regression target length mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Most frequent symbol; ties break toward the lowest symbol.
pub fn majority_symbol(content: &[usize], vocab: &VocabSpec) -> usize {
    let mut counts = vec![0usize; vocab.content_symbols];
    for &c in content {
        counts[c] += 1;
    }
    let mut best = 0;
    for (sym, &cnt) in counts.iter().enumerate() {
        if cnt > counts[best] {
            best = sym;
        }
    }
    best
}

/// Understanding sample: `[UND] + content + [SEP]`, answer = the majority
/// symbol. Content is built with a strict-majority guarantee (one symbol
/// repeated at least ceil(L/2) + 1 times).
pub fn make_understanding_sample<R: Rng>(
    rng: &mut R,
    len: usize,
    vocab: &VocabSpec,
) -> Result<TaskSample> {
    if len < 3 {
        return Err(Error::Config(format!(
            "understanding sample needs length >= 3, got {len}"
        )));
    }
    let majority = rng.gen_range(0..vocab.content_symbols);
    let min_count = len.div_ceil(2) + 1;
    let count = rng.gen_range(min_count..=len);
    let mut content = vec![majority; count];
    while content.len() < len {
        // Fillers never collide with the majority symbol.
        let mut sym = rng.gen_range(0..vocab.content_symbols - 1);
        if sym >= majority {
            sym += 1;
        }
        content.push(sym);
    }
    // Fisher-Yates shuffle, seeded.
    for i in (1..content.len()).rev() {
        let j = rng.gen_range(0..=i);
        content.swap(i, j);
    }
    let answer = majority_symbol(&content, vocab);
    let mut tokens = vec![vocab.und()];
    tokens.extend_from_slice(&content);
    tokens.push(vocab.sep());
    Ok(TaskSample {
        tokens,
        target: vec![answer],
        mask: vec![1],
        g_star: TaskGroup::Understanding.label(),
        regression: None,
    })
}

/// Generation sample: `[GEN] + content + [SEP]`, answer = content reversed.
/// The regression target carries the reversed symbols normalized to [0, 1].
pub fn make_generation_sample<R: Rng>(
    rng: &mut R,
    len: usize,
    vocab: &VocabSpec,
) -> Result<TaskSample> {
    if len < 2 {
        return Err(Error::Config(format!(
            "generation sample needs length >= 2, got {len}"
        )));
    }
    let content: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(0..vocab.content_symbols))
        .collect();
    let target: Vec<usize> = content.iter().rev().copied().collect();
    let norm = (vocab.content_symbols - 1) as f64;
    let regression = target.iter().map(|&s| s as f64 / norm).collect();
    let mut tokens = vec![vocab.gen()];
    tokens.extend_from_slice(&content);
    tokens.push(vocab.sep());
    Ok(TaskSample {
        tokens,
        mask: vec![1; len],
        target,
        g_star: TaskGroup::Generation.label(),
        regression: Some(regression),
    })
}

/// Dataset generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub len_min: usize,
    pub len_max: usize,
    /// Probability that a mixed-batch slot is an understanding sample.
    pub understanding_probability: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            len_min: 4,
            len_max: 12,
            understanding_probability: 0.5,
        }
    }
}

/// Pure `(seed, index)` sample generator for one task.
pub fn sample_at(
    task: TaskGroup,
    seed: u64,
    index: u64,
    cfg: &TaskConfig,
    vocab: &VocabSpec,
) -> Result<TaskSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    let len = rng.gen_range(cfg.len_min..=cfg.len_max);
    match task {
        TaskGroup::Understanding => make_understanding_sample(&mut rng, len, vocab),
        TaskGroup::Generation => make_generation_sample(&mut rng, len, vocab),
    }
}

/// Fixed dataset of one task.
pub fn make_dataset(
    task: TaskGroup,
    count: usize,
    seed: u64,
    cfg: &TaskConfig,
    vocab: &VocabSpec,
) -> Result<Vec<TaskSample>> {
    (0..count as u64)
        .map(|i| sample_at(task, seed, i, cfg, vocab))
        .collect()
}

/// Samples plus their padded batch views (full sequences, shifted targets,
/// loss masks). PAD positions carry mask 0 everywhere.
pub struct TaskBatch {
    pub samples: Vec<TaskSample>,
    pub padded_tokens: Vec<Vec<usize>>,
    pub padded_targets: Vec<Vec<usize>>,
    pub padded_mask: Vec<Vec<u8>>,
}

impl TaskBatch {
    /// Pads every sample's full sequence to the batch maximum.
    pub fn from_samples(samples: Vec<TaskSample>, vocab: &VocabSpec) -> TaskBatch {
        let width = samples
            .iter()
            .map(|s| s.full_sequence().len())
            .max()
            .unwrap_or(0);
        let mut padded_tokens = Vec::with_capacity(samples.len());
        let mut padded_targets = Vec::with_capacity(samples.len());
        let mut padded_mask = Vec::with_capacity(samples.len());
        for s in &samples {
            let mut seq = s.full_sequence();
            let (mut targets, mut mask) = s.ar_targets_and_mask(vocab);
            seq.resize(width, vocab.pad());
            targets.resize(width, vocab.pad());
            mask.resize(width, 0);
            padded_tokens.push(seq);
            padded_targets.push(targets);
            padded_mask.push(mask);
        }
        TaskBatch {
            samples,
            padded_tokens,
            padded_targets,
            padded_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Batch of fresh samples, each slot independently drawn as understanding
/// (with `understanding_probability`) or generation.
pub fn make_mixed_batch<R: Rng>(
    rng: &mut R,
    batch_size: usize,
    cfg: &TaskConfig,
    vocab: &VocabSpec,
) -> Result<TaskBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let len = rng.gen_range(cfg.len_min..=cfg.len_max);
        let s = if rng.gen::<f64>() < cfg.understanding_probability {
            make_understanding_sample(rng, len, vocab)?
        } else {
            make_generation_sample(rng, len, vocab)?
        };
        samples.push(s);
    }
    Ok(TaskBatch::from_samples(samples, vocab))
}

/// Per-task greedy-decode metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TaskMetrics {
    /// Fraction of understanding samples whose decoded majority token is
    /// correct (None when the split has no such samples).
    pub understanding_accuracy: Option<f64>,
    /// Fraction of generation samples decoded as the exact full reversal.
    pub generation_exact_match: Option<f64>,
    /// Mean per-token accuracy over all answer positions of both tasks.
    pub per_token_accuracy: Option<f64>,
    pub understanding_samples: usize,
    pub generation_samples: usize,
}

impl TaskMetrics {
    /// min(und, gen) when both tasks are present.
    pub fn joint_accuracy(&self) -> Option<f64> {
        match (self.understanding_accuracy, self.generation_exact_match) {
            (Some(u), Some(g)) => Some(u.min(g)),
            _ => None,
        }
    }
}

/// Scores precomputed continuations against sample answers.
pub fn score_predictions(samples: &[TaskSample], predictions: &[Vec<usize>]) -> Result<TaskMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyReduction("score_predictions: no samples".into()));
    }
    if samples.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut und_hits = 0usize;
    let mut und_total = 0usize;
    let mut gen_hits = 0usize;
    let mut gen_total = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    for (s, pred) in samples.iter().zip(predictions) {
        let exact = pred.len() >= s.target.len()
            && pred[..s.target.len()] == s.target[..];
        for (i, &t) in s.target.iter().enumerate() {
            tok_total += 1;
            if pred.get(i) == Some(&t) {
                tok_hits += 1;
            }
        }
        match s.group()? {
            TaskGroup::Understanding => {
                und_total += 1;
                if exact {
                    und_hits += 1;
                }
            }
            TaskGroup::Generation => {
                gen_total += 1;
                if exact {
                    gen_hits += 1;
                }
            }
        }
    }
    Ok(TaskMetrics {
        understanding_accuracy: (und_total > 0).then(|| und_hits as f64 / und_total as f64),
        generation_exact_match: (gen_total > 0).then(|| gen_hits as f64 / gen_total as f64),
        per_token_accuracy: (tok_total > 0).then(|| tok_hits as f64 / tok_total as f64),
        understanding_samples: und_total,
        generation_samples: gen_total,
    })
}

/// Greedy-decodes every sample's answer and scores it.
pub fn eval_task_accuracy(model: &ModelParams, samples: &[TaskSample]) -> Result<TaskMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyReduction("eval_task_accuracy: no samples".into()));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let prompt = TokenSequence::new(s.tokens.clone())?;
        let decoded = generate(model, &prompt, s.target.len())?;
        predictions.push(decoded.as_slice()[s.tokens.len()..].to_vec());
    }
    score_predictions(samples, &predictions)
}

/// Writes samples as line-delimited JSON.
pub fn export_jsonl<W: Write>(samples: &[TaskSample], mut w: W) -> Result<()> {
    for s in samples {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Parse(format!("jsonl encode: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads and validates line-delimited JSON samples.
pub fn import_jsonl<R: BufRead>(r: R, vocab: &VocabSpec) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("jsonl line {}: {e}", lineno + 1)))?;
        s.validate(vocab)
            .map_err(|e| Error::Parse(format!("jsonl line {}: {e}", lineno + 1)))?;
        out.push(s);
    }
    Ok(out)
}
