//! Perplexity evaluation and forward-pass micro-benchmarks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{batch_logits, next_token_targets, Weights};
use crate::rng::SplitMix64;
use crate::tape::log_sum_exp;

const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: u64,
    pub windows: usize,
    pub seq_len: usize,
}

/// Summed next-token NLL and the number of predicted tokens.
pub fn total_nll(weights: &Weights, windows: &[Vec<u32>]) -> Result<(f64, u64)> {
    let mut sum = 0f64;
    let mut count = 0u64;
    for chunk in windows.chunks(CHUNK) {
        let logits = batch_logits(weights, chunk)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite { op: "eval logits" });
        }
        let v = logits.cols();
        for (row, target) in logits.data().chunks_exact(v).zip(next_token_targets(chunk)) {
            if let Some(t) = target {
                sum += log_sum_exp(row) - row[t] as f64;
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// `exp(mean NLL)` over the given windows.
pub fn perplexity(weights: &Weights, windows: &[Vec<u32>]) -> Result<PplReport> {
    let seq_len = windows.first().map_or(0, Vec::len);
    let (sum, tokens) = total_nll(weights, windows)?;
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    let mean_nll = sum / tokens as f64;
    Ok(PplReport {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
        windows: windows.len(),
        seq_len,
    })
}

/// Perplexity over non-overlapping windows of a split, optionally capped to
/// the first `max_windows`.
pub fn eval_ppl(
    weights: &Weights,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<PplReport> {
    if seq_len < 2 || seq_len > weights.config.max_seq {
        return Err(Error::invalid(
            "seq-len",
            format!("{seq_len} must be in 2..={}", weights.config.max_seq),
        ));
    }
    let mut windows = corpus.windows(split, seq_len);
    if let Some(cap) = max_windows {
        windows.truncate(cap);
    }
    if windows.is_empty() {
        return Err(Error::SplitTooSmall {
            split: split.name(),
            available: corpus.split(split).len(),
            needed: seq_len,
        });
    }
    perplexity(weights, &windows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub seq_len: usize,
    pub rounds: usize,
    /// Median seconds per batch over the timed rounds.
    pub latency_s: f64,
    pub throughput_tok_s: f64,
    pub params: u64,
    pub flops_per_seq: u64,
}

/// Times forward passes over a random batch. The first round is a warm-up
/// and is not counted.
pub fn bench(
    weights: &Weights,
    batch: usize,
    seq_len: usize,
    rounds: usize,
    seed: u64,
) -> Result<BenchReport> {
    if rounds < 3 {
        return Err(Error::invalid("rounds", "at least 3 rounds are required"));
    }
    if batch == 0 || seq_len == 0 || seq_len > weights.config.max_seq {
        return Err(Error::invalid("batch", "batch and seq-len must fit the model"));
    }
    let mut rng = SplitMix64::new(seed);
    let vocab = weights.config.vocab as u64;
    let samples: Vec<Vec<u32>> = (0..batch)
        .map(|_| (0..seq_len).map(|_| rng.below(vocab) as u32).collect())
        .collect();
    let mut times = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let start = Instant::now();
        std::hint::black_box(batch_logits(weights, &samples)?);
        times.push(start.elapsed().as_secs_f64());
    }
    let mut timed = times.split_off(1);
    timed.sort_by(f64::total_cmp);
    let n = timed.len();
    let latency_s = if n % 2 == 1 {
        timed[n / 2]
    } else {
        0.5 * (timed[n / 2 - 1] + timed[n / 2])
    };
    Ok(BenchReport {
        batch,
        seq_len,
        rounds,
        latency_s,
        throughput_tok_s: (batch * seq_len) as f64 / latency_s,
        params: weights.param_counts().total,
        flops_per_seq: weights.config.flops_estimate(seq_len),
    })
}
