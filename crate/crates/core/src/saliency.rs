//! Weight saliency, unit-level aggregation and the sign-gradient NTK.
//!
//! The saliency of a weight is `|df/dW_ij * W_ij|`, the first-order change
//! of the scalar output `f` when that weight is zeroed. Scores are summed
//! over structural units: MLP hidden unit `u` owns column `u` of `W_gate`
//! and `W_up` and row `u` of `W_down`; KV group `g` owns its K and V column
//! slices plus the Q column slices and O row slices of every query head
//! mapped to it.
//!
//! The kernel `Theta = <grad f, sign(grad f)>` reduces to `||grad f||_1`
//! taken over the seven prunable matrix families.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{output_f_gradient, LayerWeights, ModelConfig, Weights};
use crate::prune::MaskSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchProvenance {
    pub seed: u64,
    pub n: usize,
    pub seq_len: usize,
}

impl From<&Batch> for BatchProvenance {
    fn from(b: &Batch) -> Self {
        Self {
            seed: b.seed,
            n: b.n(),
            seq_len: b.seq_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaliencyField {
    /// `|grad * weight|` per entry, shaped like the model.
    pub scores: Weights,
    /// Batch-mean gradient of `f`.
    pub gradient: Weights,
    pub f_value: f64,
    pub provenance: BatchProvenance,
}

/// One forward and one backward pass of `f` over the whole batch. The
/// gradient is averaged over the batch before the product with the weight.
pub fn compute_saliency(weights: &Weights, batch: &Batch) -> Result<SaliencyField> {
    let (f_value, gradient) = output_f_gradient(weights, &batch.samples)?;
    if !gradient.is_finite() {
        return Err(Error::NonFinite { op: "saliency gradient" });
    }
    let scores = gradient.zip_map(weights, |g, w| (g * w).abs())?;
    Ok(SaliencyField {
        scores,
        gradient,
        f_value,
        provenance: batch.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    MlpUnit,
    KvGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub kind: UnitKind,
    pub layer: usize,
    /// Hidden-unit index for MLP units, KV-head index for groups.
    pub index: usize,
    pub score: f64,
    pub params: u64,
}

/// Sums `values` (any weight-shaped field) over every structural unit.
/// MLP units come first within each layer, then KV groups.
pub fn aggregate(values: &Weights) -> Result<Vec<UnitScore>> {
    values.validate()?;
    let cfg = &values.config;
    let d = cfg.d_model;
    let dh = cfg.head_dim;
    let mut out = Vec::new();
    for (layer, (lw, dims)) in values.layers.iter().zip(&cfg.layers).enumerate() {
        let m = dims.d_ff;
        let mut mlp = vec![0f64; m];
        for i in 0..d {
            let gate = &lw.w_gate.data()[i * m..(i + 1) * m];
            let up = &lw.w_up.data()[i * m..(i + 1) * m];
            for u in 0..m {
                mlp[u] += gate[u] as f64 + up[u] as f64;
            }
        }
        for (u, acc) in mlp.iter_mut().enumerate() {
            *acc += lw.w_down.data()[u * d..(u + 1) * d]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        out.extend(mlp.into_iter().enumerate().map(|(u, score)| UnitScore {
            kind: UnitKind::MlpUnit,
            layer,
            index: u,
            score,
            params: 3 * d as u64,
        }));

        let group = dims.group_size();
        let group_params = (d * dh * (2 * group + 2)) as u64;
        for g in 0..dims.kv_heads {
            let mut score = col_block_sum(&lw.wk, g * dh, dh) + col_block_sum(&lw.wv, g * dh, dh);
            for a in (0..dims.heads).filter(|a| a * dims.kv_heads / dims.heads == g) {
                score += col_block_sum(&lw.wq, a * dh, dh);
                score += row_block_sum(&lw.wo, a * dh, dh);
            }
            out.push(UnitScore {
                kind: UnitKind::KvGroup,
                layer,
                index: g,
                score,
                params: group_params,
            });
        }
    }
    Ok(out)
}

fn col_block_sum(t: &crate::tensor::Tensor, start: usize, width: usize) -> f64 {
    let c = t.cols();
    t.data()
        .chunks(c)
        .map(|row| row[start..start + width].iter().map(|&v| v as f64).sum::<f64>())
        .sum()
}

fn row_block_sum(t: &crate::tensor::Tensor, start: usize, height: usize) -> f64 {
    let c = t.cols();
    t.data()[start * c..(start + height) * c]
        .iter()
        .map(|&v| v as f64)
        .sum()
}

/// Aggregated saliency per MLP unit and KV group.
pub fn group_scores(saliency: &SaliencyField, config: &ModelConfig) -> Result<Vec<UnitScore>> {
    if &saliency.scores.config != config {
        return Err(Error::shape("group_scores", "saliency field does not match config"));
    }
    aggregate(&saliency.scores)
}

/// Ablation baseline: the same grouping applied to `|W|`.
pub fn magnitude_scores(weights: &Weights) -> Result<Vec<UnitScore>> {
    aggregate(&weights.map(f32::abs))
}

/// Sum of a weight-shaped field over the prunable families, in `f64`.
pub fn prunable_sum(values: &Weights, f: impl Fn(f32) -> f64) -> f64 {
    values
        .layers
        .iter()
        .flat_map(LayerWeights::prunable)
        .map(|(_, t)| t.data().iter().map(|&v| f(v)).sum::<f64>())
        .sum()
}

/// `Theta = <grad f, sign(grad f)>` over the prunable families.
pub fn ntk_diag(weights: &Weights, batch: &Batch) -> Result<f64> {
    let (_, g) = output_f_gradient(weights, &batch.samples)?;
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "ntk gradient" });
    }
    Ok(prunable_sum(&g, |v| v as f64 * sign(v)))
}

fn sign(v: f32) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn theta_of(gradient: &Weights) -> f64 {
    prunable_sum(gradient, |v| (v as f64).abs())
}

/// Kernel stability diagnostics for one pruning decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkReport {
    pub theta_before: f64,
    pub theta_after: f64,
    /// `|theta_after - theta_before|`.
    pub theta_gap: f64,
    /// Pruned saliency mass `sum_P |grad * W|`.
    pub epsilon: f64,
    /// Smallest non-zero `|W|` over the pruned set.
    pub c: f64,
    /// `||grad f||_2` of the dense model.
    pub g_norm: f64,
    /// Number of parameters in the scored families.
    pub dm: u64,
    pub bound: f64,
    pub holds: bool,
    /// `theta_gap / bound`.
    pub slack: f64,
    pub pruned_params: u64,
    /// Pruned entries that were already zero and are left out of `epsilon / c`.
    pub degenerate: u64,
    /// `sum_P |grad|` measured directly.
    pub pruned_grad_l1: f64,
    /// `||grad_pruned - grad_dense||_2` over all prunable coordinates.
    pub grad_shift_l2: f64,
}

/// Evaluates `|Theta~ - Theta| <= sqrt(2 dm) (epsilon / c + G)` on one batch.
pub fn ntk_stability_check(
    weights: &Weights,
    pruned_weights: &Weights,
    masks: &MaskSet,
    batch: &Batch,
) -> Result<NtkReport> {
    let expected = masks.apply(weights)?;
    if &expected != pruned_weights {
        return Err(Error::SpecMismatch(
            "pruned weights are not the masked dense weights".into(),
        ));
    }
    let (_, g) = output_f_gradient(weights, &batch.samples)?;
    let (_, g_pruned) = output_f_gradient(pruned_weights, &batch.samples)?;
    if !g.is_finite() || !g_pruned.is_finite() {
        return Err(Error::NonFinite { op: "ntk gradient" });
    }
    let theta_before = theta_of(&g);
    let theta_after = theta_of(&g_pruned);

    let mut epsilon = 0f64;
    let mut c = f64::INFINITY;
    let mut pruned_params = 0u64;
    let mut degenerate = 0u64;
    let mut pruned_grad_l1 = 0f64;
    let mut shift_sq = 0f64;
    for (layer, ((lw, lg), lgp)) in weights
        .layers
        .iter()
        .zip(&g.layers)
        .zip(&g_pruned.layers)
        .enumerate()
    {
        for (fam, (((_, w), (_, gr)), (_, gp))) in lw
            .prunable()
            .into_iter()
            .zip(lg.prunable())
            .zip(lgp.prunable())
            .enumerate()
        {
            let mask = masks.family(layer, fam);
            for (i, ((&wv, &gv), &gpv)) in w.data().iter().zip(gr.data()).zip(gp.data()).enumerate() {
                shift_sq += (gpv as f64 - gv as f64).powi(2);
                if mask.data()[i] != 0.0 {
                    continue;
                }
                pruned_params += 1;
                if wv == 0.0 {
                    degenerate += 1;
                    continue;
                }
                epsilon += (gv as f64 * wv as f64).abs();
                pruned_grad_l1 += (gv as f64).abs();
                c = c.min((wv as f64).abs());
            }
        }
    }
    let g_norm = prunable_sum(&g, |v| (v as f64).powi(2)).sqrt();
    let dm = weights.param_counts().prunable();
    let ratio = if c.is_finite() { epsilon / c } else { 0.0 };
    let bound = (2.0 * dm as f64).sqrt() * (ratio + g_norm);
    let theta_gap = (theta_after - theta_before).abs();
    Ok(NtkReport {
        theta_before,
        theta_after,
        theta_gap,
        epsilon,
        c: if c.is_finite() { c } else { 0.0 },
        g_norm,
        dm,
        bound,
        holds: theta_gap <= bound,
        slack: if bound > 0.0 { theta_gap / bound } else { 0.0 },
        pruned_params,
        degenerate,
        pruned_grad_l1,
        grad_shift_l2: shift_sq.sqrt(),
    })
}
