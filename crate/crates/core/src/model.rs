//! Decoder-only transformer with SwiGLU MLP blocks and grouped-query
//! attention.
//!
//! Blocks are pre-norm: `x += attn(rmsnorm(x))`, then
//! `x += (swish(h W_gate) * h W_up) W_down` with `h = rmsnorm(x)`. Positions
//! use a learned absolute embedding. No layer carries a bias.
//!
//! Layers may have different MLP widths and head counts once pruned; the
//! query-to-KV-group size `heads / kv_heads` is fixed per layer.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{AttnGeometry, Tape, Var};
use crate::tensor::Tensor;

/// Byte tokens plus BOS and EOS.
pub const BYTE_VOCAB: usize = 258;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    /// MLP intermediate width `m`.
    pub d_ff: usize,
    pub heads: usize,
    pub kv_heads: usize,
}

impl LayerDims {
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub layers: Vec<LayerDims>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub mlp: u64,
    pub attn: u64,
    pub total: u64,
}

impl ParamCounts {
    pub fn prunable(&self) -> u64 {
        self.mlp + self.attn
    }
}

impl ModelConfig {
    /// A model whose layers all share the same dimensions, with
    /// `head_dim = d_model / heads`.
    pub fn uniform(
        d_model: usize,
        d_ff: usize,
        heads: usize,
        kv_heads: usize,
        n_layers: usize,
        max_seq: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not a multiple of {heads} heads"
            )));
        }
        let cfg = ModelConfig {
            d_model,
            head_dim: d_model / heads,
            vocab: BYTE_VOCAB,
            max_seq,
            layers: vec![
                LayerDims {
                    d_ff,
                    heads,
                    kv_heads,
                };
                n_layers
            ],
        };
        cfg.validate()?;
        if d_ff < 8 {
            return Err(Error::Config(format!("d_ff {d_ff} must be at least 8")));
        }
        Ok(cfg)
    }

    /// d=64, m=256, h=8, h_kv=4, d_h=8, 4 layers, L=128.
    pub fn toy() -> Self {
        Self::uniform(64, 256, 8, 4, 4, 128).expect("toy config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.head_dim == 0 || self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.d_ff == 0 {
                return Err(Error::Config(format!("layer {i}: empty MLP")));
            }
            if l.kv_heads == 0 || l.heads == 0 || l.heads % l.kv_heads != 0 {
                return Err(Error::Config(format!(
                    "layer {i}: {} heads not divisible into {} kv heads",
                    l.heads, l.kv_heads
                )));
            }
            if l.heads * self.head_dim > self.d_model {
                return Err(Error::Config(format!(
                    "layer {i}: {} heads of {} exceed d_model {}",
                    l.heads, self.head_dim, self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `#_MLP = sum 3 d m`, `#_Attn = sum d d_h (2h + 2h_kv)`; embeddings,
    /// output head and norm scales only count toward the total.
    pub fn param_counts(&self) -> ParamCounts {
        let d = self.d_model as u64;
        let dh = self.head_dim as u64;
        let mut mlp = 0;
        let mut attn = 0;
        for l in &self.layers {
            mlp += 3 * d * l.d_ff as u64;
            attn += d * dh * (2 * l.heads as u64 + 2 * l.kv_heads as u64);
        }
        let v = self.vocab as u64;
        let other = v * d + self.max_seq as u64 * d + d * v + d * (2 * self.layers.len() as u64 + 1);
        ParamCounts {
            mlp,
            attn,
            total: mlp + attn + other,
        }
    }

    /// Forward FLOPs for one sequence: `2 * (matmul params) * seq_len` plus
    /// `2 * seq_len^2 * (h * d_h)` per layer for the attention scores.
    /// Embedding lookups are free.
    pub fn flops_estimate(&self, seq_len: usize) -> u64 {
        let counts = self.param_counts();
        let head = (self.d_model * self.vocab) as u64;
        let t = seq_len as u64;
        let scores: u64 = self
            .layers
            .iter()
            .map(|l| 2 * t * t * (l.heads * self.head_dim) as u64)
            .sum();
        2 * (counts.mlp + counts.attn + head) * t + scores
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Names of the seven per-layer matrices that are scored and pruned.
pub const PRUNABLE: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

impl LayerWeights {
    pub fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }

    pub fn prunable(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn prunable_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// Named parameters of a model. Tensor names are `tok_emb`, `pos_emb`,
/// `layers.{i}.{attn_norm,wq,wk,wv,wo,mlp_norm,w_gate,w_up,w_down}`,
/// `final_norm` and `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl Weights {
    /// Normal initialization with standard deviation `d_model^-1/2`; norm
    /// scales start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.head_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::derive(seed, 0x1417);
        let mut randn = |shape: &[usize]| Tensor::randn(shape, std, &mut rng);
        let tok_emb = randn(&[config.vocab, d]);
        let pos_emb = randn(&[config.max_seq, d]);
        let mut layers = Vec::with_capacity(config.layers.len());
        for l in &config.layers {
            layers.push(LayerWeights {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: randn(&[d, l.heads * dh]),
                wk: randn(&[d, l.kv_heads * dh]),
                wv: randn(&[d, l.kv_heads * dh]),
                wo: randn(&[l.heads * dh, d]),
                mlp_norm: Tensor::full(&[d], 1.0),
                w_gate: randn(&[d, l.d_ff]),
                w_up: randn(&[d, l.d_ff]),
                w_down: randn(&[l.d_ff, d]),
            });
        }
        let head = randn(&[d, config.vocab]);
        Ok(Weights {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            head,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(
                l.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Applies `f` to every entry, keeping shapes and config.
    pub fn map(&self, f: impl Fn(f32) -> f32 + Copy) -> Weights {
        let mut out = self.clone();
        for (_, t) in out.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        }
        out
    }

    /// Entrywise combination of two weight sets with identical shapes.
    pub fn zip_map(&self, other: &Weights, f: impl Fn(f32, f32) -> f32 + Copy) -> Result<Weights> {
        self.check_same_shapes(other)?;
        let mut out = self.clone();
        for ((_, t), (_, o)) in out.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            t.data_mut()
                .iter_mut()
                .zip(o.data())
                .for_each(|(a, &b)| *a = f(*a, b));
        }
        Ok(out)
    }

    pub fn check_same_shapes(&self, other: &Weights) -> Result<()> {
        let a = self.named_tensors();
        let b = other.named_tensors();
        if a.len() != b.len() {
            return Err(Error::shape("weights", "different tensor counts"));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape(
                    "weights",
                    format!("{na} {:?} vs {nb} {:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let dh = c.head_dim;
        let expect = |name: String, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(
                    "weights",
                    format!("{name} is {:?}, config implies {shape:?}", t.shape()),
                ));
            }
            Ok(())
        };
        if self.layers.len() != c.layers.len() {
            return Err(Error::shape("weights", "layer count differs from config"));
        }
        expect("tok_emb".into(), &self.tok_emb, &[c.vocab, d])?;
        expect("pos_emb".into(), &self.pos_emb, &[c.max_seq, d])?;
        expect("final_norm".into(), &self.final_norm, &[d])?;
        expect("head".into(), &self.head, &[d, c.vocab])?;
        for (i, (lw, ld)) in self.layers.iter().zip(&c.layers).enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            expect(n("attn_norm"), &lw.attn_norm, &[d])?;
            expect(n("mlp_norm"), &lw.mlp_norm, &[d])?;
            expect(n("wq"), &lw.wq, &[d, ld.heads * dh])?;
            expect(n("wk"), &lw.wk, &[d, ld.kv_heads * dh])?;
            expect(n("wv"), &lw.wv, &[d, ld.kv_heads * dh])?;
            expect(n("wo"), &lw.wo, &[ld.heads * dh, d])?;
            expect(n("w_gate"), &lw.w_gate, &[d, ld.d_ff])?;
            expect(n("w_up"), &lw.w_up, &[d, ld.d_ff])?;
            expect(n("w_down"), &lw.w_down, &[ld.d_ff, d])?;
        }
        Ok(())
    }

    pub fn param_counts(&self) -> ParamCounts {
        self.config.param_counts()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<[Var; 9]>,
    pub final_norm: Var,
    pub head: Var,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, weights: &Weights, requires_grad: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), requires_grad);
        let tok_emb = leaf(&weights.tok_emb);
        let pos_emb = leaf(&weights.pos_emb);
        let layers = weights
            .layers
            .iter()
            .map(|l| l.named().map(|(_, t)| leaf(t)))
            .collect();
        let final_norm = leaf(&weights.final_norm);
        let head = leaf(&weights.head);
        ParamVars {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        }
    }

    /// Collects leaf gradients into a weight-shaped container.
    pub fn gradients(&self, tape: &Tape, like: &Weights) -> Result<Weights> {
        let mut out = like.clone();
        let vars = self.ordered();
        for ((name, t), v) in out.named_tensors_mut().into_iter().zip(vars) {
            let g = tape
                .grad(v)
                .ok_or_else(|| Error::shape("gradients", format!("{name} has no gradient")))?;
            t.data_mut().copy_from_slice(g);
        }
        Ok(out)
    }

    fn ordered(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v.push(self.final_norm);
        v.push(self.head);
        v
    }
}

/// Intermediate activations of one block, kept for statistics.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// `rmsnorm(x) W^V`, `[rows, h_kv * d_h]`.
    pub values: Var,
    /// Attention output before `W^O`; carries the saved probabilities.
    pub attention: Var,
    /// `swish(h W_gate) * h W_up`, `[rows, m]`.
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch * seq, vocab]`, sequence-major.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
    pub batch: usize,
    pub seq: usize,
}

fn check_tokens(config: &ModelConfig, samples: &[Vec<u32>]) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let seq = first.len();
    if seq == 0 {
        return Err(Error::EmptyBatch);
    }
    if seq > config.max_seq {
        return Err(Error::SequenceTooLong {
            len: seq,
            max: config.max_seq,
        });
    }
    for s in samples {
        if s.len() != seq {
            return Err(Error::shape(
                "forward",
                format!("ragged batch: {} vs {seq} tokens", s.len()),
            ));
        }
        if let Some(&id) = s.iter().find(|&&id| id as usize >= config.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab,
            });
        }
    }
    Ok(seq)
}

/// Records the forward pass of equal-length sequences on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    samples: &[Vec<u32>],
) -> Result<ForwardTrace> {
    let seq = check_tokens(config, samples)?;
    let batch = samples.len();
    let ids: Vec<usize> = samples.iter().flatten().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embed(params.tok_emb, &ids)?;
    let pos = tape.embed(params.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut traces = Vec::with_capacity(config.layers.len());
    for (dims, p) in config.layers.iter().zip(&params.layers) {
        let [attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down] = *p;
        let h = tape.rmsnorm(x, attn_norm)?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let geom = AttnGeometry {
            batch,
            seq,
            heads: dims.heads,
            kv_heads: dims.kv_heads,
            head_dim: config.head_dim,
        };
        let att = tape.causal_attention(q, k, v, geom)?;
        let o = tape.matmul(att, wo)?;
        x = tape.add(x, o)?;

        let h = tape.rmsnorm(x, mlp_norm)?;
        let gate = tape.matmul(h, w_gate)?;
        let up = tape.matmul(h, w_up)?;
        let act = tape.swish(gate)?;
        let hidden = tape.mul(act, up)?;
        let down = tape.matmul(hidden, w_down)?;
        x = tape.add(x, down)?;
        traces.push(LayerTrace {
            values: v,
            attention: att,
            hidden,
        });
    }
    let h = tape.rmsnorm(x, params.final_norm)?;
    let logits = tape.matmul(h, params.head)?;
    Ok(ForwardTrace {
        logits,
        layers: traces,
        batch,
        seq,
    })
}

/// Next-token targets for sequence-major rows: position `t` predicts
/// token `t + 1`; the last position of each sequence has no target.
pub fn next_token_targets(samples: &[Vec<u32>]) -> Vec<Option<usize>> {
    samples
        .iter()
        .flat_map(|s| {
            (0..s.len()).map(move |t| s.get(t + 1).map(|&id| id as usize))
        })
        .collect()
}

/// Logits `[seq, vocab]` for a single sequence.
pub fn forward_logits(weights: &Weights, tokens: &[u32]) -> Result<Tensor> {
    batch_logits(weights, &[tokens.to_vec()])
}

/// Logits `[batch * seq, vocab]` for equal-length sequences.
pub fn batch_logits(weights: &Weights, samples: &[Vec<u32>]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, weights, false);
    let trace = forward(&mut tape, &params, &weights.config, samples)?;
    Ok(tape.value(trace.logits).clone())
}

/// Mean next-token log-likelihood over every (sample, position) pair.
pub fn scalar_output_f(weights: &Weights, batch: &Batch) -> Result<f64> {
    output_f_of(weights, &batch.samples)
}

/// `f` over raw token sequences.
pub fn output_f_of(weights: &Weights, samples: &[Vec<u32>]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, weights, false);
    let trace = forward(&mut tape, &params, &weights.config, samples)?;
    let ce = tape.cross_entropy_mean(trace.logits, &next_token_targets(samples))?;
    Ok(-(tape.value(ce).data()[0] as f64))
}

/// `f` and its gradient with respect to every parameter, from one forward
/// and one backward pass over the whole batch.
pub fn output_f_gradient(weights: &Weights, samples: &[Vec<u32>]) -> Result<(f64, Weights)> {
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, weights, true);
    let trace = forward(&mut tape, &params, &weights.config, samples)?;
    let ce = tape.cross_entropy_mean(trace.logits, &next_token_targets(samples))?;
    let f = tape.scale(ce, -1.0)?;
    tape.backward(f)?;
    let grads = params.gradients(&tape, weights)?;
    Ok((tape.value(f).data()[0] as f64, grads))
}
