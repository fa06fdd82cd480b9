//! Shared helpers for the integration tests: a naive f64 forward pass used
//! as an oracle, and small fixtures.
#![allow(dead_code)]

use ntk_prune::allocator::PruneSpec;
use ntk_prune::data::{synthetic, Corpus, SplitRatios};
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::rng::SplitMix64;
use ntk_prune::tensor::Tensor;

fn row(t: &Tensor, r: usize) -> Vec<f64> {
    let c = t.cols();
    t.data()[r * c..(r + 1) * c].iter().map(|&v| v as f64).collect()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    assert_eq!(x.len(), k);
    let mut out = vec![0f64; n];
    for (i, &xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.data()[i * n + j] as f64;
        }
    }
    out
}

fn rmsnorm(x: &[f64], scale: &Tensor) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(scale.data()).map(|(&v, &g)| v * r * g as f64).collect()
}

/// Logits `[seq][vocab]` computed position by position in f64.
pub fn reference_logits(w: &Weights, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let dh = cfg.head_dim;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            row(&w.tok_emb, id as usize)
                .iter()
                .zip(row(&w.pos_emb, t))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    for (dims, lw) in cfg.layers.iter().zip(&w.layers) {
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| rmsnorm(x, &lw.attn_norm)).collect();
        let qs: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, &lw.wq)).collect();
        let ks: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, &lw.wk)).collect();
        let vs: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, &lw.wv)).collect();
        for t in 0..tokens.len() {
            let mut concat = vec![0f64; dims.heads * dh];
            for a in 0..dims.heads {
                let g = a * dims.kv_heads / dims.heads;
                let q = &qs[t][a * dh..(a + 1) * dh];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = &ks[s][g * dh..(g + 1) * dh];
                        q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, p) in e.iter().enumerate() {
                    for i in 0..dh {
                        concat[a * dh + i] += p / z * vs[s][g * dh + i];
                    }
                }
            }
            let o = vecmat(&concat, &lw.wo);
            xs[t].iter_mut().zip(o).for_each(|(x, v)| *x += v);
        }
        for x in xs.iter_mut() {
            let h = rmsnorm(x, &lw.mlp_norm);
            let gate = vecmat(&h, &lw.w_gate);
            let up = vecmat(&h, &lw.w_up);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = vecmat(&act, &lw.w_down);
            x.iter_mut().zip(down).for_each(|(x, v)| *x += v);
        }
    }
    xs.iter()
        .map(|x| vecmat(&rmsnorm(x, &w.final_norm), &w.head))
        .collect()
}

/// Mean next-token log-likelihood over a batch, in f64.
pub fn reference_f(w: &Weights, samples: &[Vec<u32>]) -> f64 {
    let mut total = 0f64;
    let mut count = 0usize;
    for s in samples {
        let logits = reference_logits(w, s);
        for t in 0..s.len() - 1 {
            let row = &logits[t];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += row[s[t + 1] as usize] - lse;
            count += 1;
        }
    }
    total / count as f64
}

pub fn small_config() -> ModelConfig {
    ModelConfig::uniform(16, 32, 4, 2, 2, 32).unwrap()
}

pub fn corpus(docs: usize) -> Corpus {
    Corpus::from_bytes("synthetic", &synthetic::generate(7, docs), SplitRatios::default()).unwrap()
}

pub fn random_tokens(rng: &mut SplitMix64, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab as u64) as u32).collect()
}

/// A random spec honouring the per-layer floors.
pub fn random_spec(config: &ModelConfig, rng: &mut SplitMix64) -> PruneSpec {
    let mut spec = PruneSpec::keep_all(config);
    for l in spec.layers.iter_mut() {
        let keep_mlp = 8.max(rng.below(l.d_ff as u64 + 1) as usize).min(l.d_ff);
        l.kept_mlp = sample_sorted(rng, l.d_ff, keep_mlp);
        l.target_mlp = keep_mlp;
        let keep_kv = 1 + rng.below(l.kv_heads as u64) as usize;
        l.kept_kv = sample_sorted(rng, l.kv_heads, keep_kv);
    }
    spec
}

fn sample_sorted(rng: &mut SplitMix64, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0f64; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
