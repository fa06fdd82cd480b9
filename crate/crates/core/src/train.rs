//! AdamW pre-training and recovery fine-tuning.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::eval_ppl;
use crate::model::{output_f_gradient, Weights};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch: 8,
            seq_len: 128,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Cosine-decayed learning rate for a zero-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Training loss (mean next-token NLL) before each update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(weights: &Weights) -> Self {
        let zeros: Vec<Vec<f32>> = weights
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One AdamW step descending the gradient `grad` at rate `lr`.
    fn step(&mut self, weights: &mut Weights, grad: &Weights, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let grads = grad.named_tensors();
        for (i, (_, w)) in weights.named_tensors_mut().into_iter().enumerate() {
            let decay = if w.shape().len() == 2 && w.rows() > 1 {
                cfg.weight_decay
            } else {
                0.0
            };
            let g = grads[i].1.data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in w.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + cfg.eps) + decay * *p as f64;
                *p = (*p as f64 - lr * update) as f32;
            }
        }
    }
}

fn diverged(step: usize, last_good: &Weights) -> Error {
    Error::Diverged {
        step,
        last_good: Box::new(last_good.clone()),
    }
}

fn validate(cfg: &TrainConfig, weights: &Weights) -> Result<()> {
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::invalid("lr", "must be a non-negative number"));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::invalid("beta", "betas must lie in [0, 1)"));
    }
    if !(cfg.eps > 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::invalid("eps", "eps must be positive and decay non-negative"));
    }
    if cfg.batch == 0 || cfg.seq_len < 2 || cfg.seq_len > weights.config.max_seq {
        return Err(Error::invalid(
            "seq-len",
            format!("batch must be positive and seq-len in 2..={}", weights.config.max_seq),
        ));
    }
    Ok(())
}

/// Trains `weights` in place. On a non-finite loss or gradient the weights
/// from before the failing step are returned inside the error.
pub fn train(weights: &mut Weights, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    validate(cfg, weights)?;
    if cfg.steps > 0 && corpus.split(Split::Train).len() < cfg.batch * cfg.seq_len {
        return Err(Error::SplitTooSmall {
            split: Split::Train.name(),
            available: corpus.split(Split::Train).len(),
            needed: cfg.batch * cfg.seq_len,
        });
    }
    let mut adam = Adam::new(weights);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seed = SplitMix64::derive(cfg.seed, step as u64).next_u64();
        let batch = sample_batch(corpus, Split::Train, seed, cfg.batch, cfg.seq_len)?;
        let (f, grad) = match output_f_gradient(weights, &batch.samples) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(diverged(step, weights)),
            Err(e) => return Err(e),
        };
        if !f.is_finite() || !grad.is_finite() {
            return Err(diverged(step, weights));
        }
        let loss = -f;
        losses.push(loss);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step:>6}  loss {loss:.4}  lr {:.2e}", cfg.lr_at(step));
        }
        // `grad` is the gradient of f = -loss; descend the loss.
        let grad = grad.map(|g| -g);
        let before = weights.clone();
        adam.step(weights, &grad, cfg.lr_at(step), cfg);
        if !weights.is_finite() {
            *weights = before;
            return Err(diverged(step, weights));
        }
    }
    Ok(TrainReport {
        steps: cfg.steps,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub ppl_before: f64,
    pub ppl_after: f64,
    pub train: TrainReport,
}

/// Recovery tuning with the same optimizer, reporting eval-split
/// perplexity before and after.
pub fn finetune(
    weights: &mut Weights,
    corpus: &Corpus,
    cfg: &TrainConfig,
    eval_windows: Option<usize>,
) -> Result<FinetuneReport> {
    let ppl = |w: &Weights| {
        eval_ppl(w, corpus, Split::Eval, cfg.seq_len, eval_windows).map(|r| r.perplexity)
    };
    let ppl_before = ppl(weights)?;
    let train = train(weights, corpus, cfg)?;
    Ok(FinetuneReport {
        ppl_before,
        ppl_after: ppl(weights)?,
        train,
    })
}
