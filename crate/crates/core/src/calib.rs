//! KL-based calibration batch selection.
//!
//! Each candidate seed draws a batch from the calibration pool, prunes a
//! masked copy of the model with it and measures the forward KL
//! `KL(original || pruned)` on a fixed evaluation batch. The candidate with
//! the smallest divergence wins.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Batch, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{batch_logits, Weights};
use crate::saliency::BatchProvenance;
use crate::tape::log_sum_exp;

/// Log-softmax rows of a model's logits on a fixed batch, computed once.
#[derive(Debug, Clone)]
pub struct ReferenceOutputs {
    log_probs: Vec<f64>,
    vocab: usize,
    samples: Vec<Vec<u32>>,
}

fn log_softmax(weights: &Weights, samples: &[Vec<u32>]) -> Result<(Vec<f64>, usize)> {
    let logits = batch_logits(weights, samples)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "kl logits" });
    }
    let v = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(v) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&x| x as f64 - lse));
    }
    Ok((out, v))
}

impl ReferenceOutputs {
    pub fn new(original: &Weights, eval_set: &Batch) -> Result<Self> {
        let (log_probs, vocab) = log_softmax(original, &eval_set.samples)?;
        Ok(Self {
            log_probs,
            vocab,
            samples: eval_set.samples.clone(),
        })
    }

    /// Mean over every (sample, position) of `sum_l p_l (ln p_l - ln q_l)`.
    pub fn kl(&self, pruned: &Weights) -> Result<f64> {
        let (q, vocab) = log_softmax(pruned, &self.samples)?;
        if vocab != self.vocab {
            return Err(Error::shape(
                "kl_divergence",
                format!("vocab {vocab} vs {}", self.vocab),
            ));
        }
        let rows = q.len() / vocab;
        let total: f64 = self
            .log_probs
            .chunks_exact(vocab)
            .zip(q.chunks_exact(vocab))
            .map(|(lp, lq)| {
                lp.iter()
                    .zip(lq)
                    .map(|(&a, &b)| a.exp() * (a - b))
                    .sum::<f64>()
            })
            .sum();
        Ok(total / rows as f64)
    }
}

pub fn kl_divergence(original: &Weights, pruned: &Weights, eval_set: &Batch) -> Result<f64> {
    ReferenceOutputs::new(original, eval_set)?.kl(pruned)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSetup {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<Candidate>,
    pub chosen_seed: u64,
    pub chosen_kl: f64,
    pub eval_set: BatchProvenance,
    pub trials: usize,
    pub n: usize,
    pub seq_len: usize,
}

/// Tolerance for float noise in the non-negativity check.
pub const KL_FLOOR: f64 = -1e-7;

/// Runs one trial per seed and returns the report with the argmin.
///
/// `prune` turns a calibration batch into a masked copy of `weights`. When
/// `diagnostic` windows are given, each pruned candidate's perplexity on
/// them is recorded as well.
pub fn select_calibration(
    weights: &Weights,
    corpus: &Corpus,
    setup: &SelectionSetup,
    eval_set: &Batch,
    diagnostic: Option<&[Vec<u32>]>,
    mut prune: impl FnMut(&Batch) -> Result<Weights>,
) -> Result<SelectionReport> {
    if setup.seeds.is_empty() {
        return Err(Error::invalid("trials", "at least one candidate is required"));
    }
    let reference = ReferenceOutputs::new(weights, eval_set)?;
    let mut candidates = Vec::with_capacity(setup.seeds.len());
    for &seed in &setup.seeds {
        let mut trial = || -> Result<Candidate> {
            let batch = sample_batch(corpus, Split::CalibPool, seed, setup.n, setup.seq_len)?;
            let pruned = prune(&batch)?;
            let kl = reference.kl(&pruned)?;
            if !(kl >= KL_FLOOR) {
                return Err(Error::Degenerate(format!("negative KL {kl}")));
            }
            let eval_ppl = diagnostic
                .map(|w| perplexity(&pruned, w).map(|r| r.perplexity))
                .transpose()?;
            Ok(Candidate { seed, kl, eval_ppl })
        };
        let c = trial().map_err(|e| Error::Trial {
            seed,
            source: Box::new(e),
        })?;
        candidates.push(c);
    }
    let best = candidates
        .iter()
        .min_by(|a, b| a.kl.total_cmp(&b.kl).then(a.seed.cmp(&b.seed)))
        .copied()
        .expect("non-empty");
    assert!(candidates.iter().all(|c| best.kl <= c.kl));
    Ok(SelectionReport {
        candidates,
        chosen_seed: best.seed,
        chosen_kl: best.kl,
        eval_set: eval_set.into(),
        trials: setup.seeds.len(),
        n: setup.n,
        seq_len: setup.seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitRatios;
    use crate::model::{ModelConfig, BYTE_VOCAB};

    fn setup() -> (Weights, Corpus, Batch) {
        let w = Weights::init(&ModelConfig::uniform(16, 16, 2, 1, 1, 32).unwrap(), 5).unwrap();
        let text = crate::data::synthetic::generate(2, 80);
        let c = Corpus::from_bytes("s", &text, SplitRatios::default()).unwrap();
        let eval = sample_batch(&c, Split::Eval, 9, 2, 16).unwrap();
        (w, c, eval)
    }

    #[test]
    fn identical_models_have_zero_kl() {
        let (w, _, eval) = setup();
        assert!(kl_divergence(&w, &w, &eval).unwrap().abs() < 1e-12);
    }

    #[test]
    fn peaked_versus_uniform() {
        let (w, _, eval) = setup();
        let mut uniform = w.clone();
        uniform.head.data_mut().fill(0.0);
        let kl = kl_divergence(&w, &uniform, &eval).unwrap();
        // KL(p || uniform) = ln V - H(p)
        let r = ReferenceOutputs::new(&w, &eval).unwrap();
        let rows = r.log_probs.len() / BYTE_VOCAB;
        let entropy: f64 = -r.log_probs.iter().map(|&l| l.exp() * l).sum::<f64>() / rows as f64;
        assert!((kl - ((BYTE_VOCAB as f64).ln() - entropy)).abs() < 1e-9);
        assert!(kl > 0.0);
    }

    #[test]
    fn single_trial_is_chosen() {
        let (w, c, eval) = setup();
        let setup = SelectionSetup { seeds: vec![42], n: 2, seq_len: 16 };
        let r = select_calibration(&w, &c, &setup, &eval, None, |_| Ok(w.map(|x| x * 0.5))).unwrap();
        assert_eq!(r.chosen_seed, 42);
        assert_eq!(r.candidates.len(), 1);
    }

    #[test]
    fn ties_break_to_lowest_seed() {
        let (w, c, eval) = setup();
        let setup = SelectionSetup { seeds: vec![7, 3, 5], n: 2, seq_len: 16 };
        let r = select_calibration(&w, &c, &setup, &eval, None, |_| Ok(w.clone())).unwrap();
        assert_eq!(r.chosen_seed, 3);
        assert_eq!(r.candidates.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![7, 3, 5]);
    }

    #[test]
    fn failing_trial_names_seed() {
        let (w, c, eval) = setup();
        let setup = SelectionSetup { seeds: vec![1, 2], n: 2, seq_len: 16 };
        let err = select_calibration(&w, &c, &setup, &eval, None, |b| {
            if b.seed == 2 {
                Err(Error::Degenerate("boom".into()))
            } else {
                Ok(w.clone())
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("seed 2"), "{err}");
    }
}
