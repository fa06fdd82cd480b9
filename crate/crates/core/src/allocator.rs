//! Sparsity allocation between MLP and attention, unit ranking, width
//! alignment and the analytic allocation ratio.
//!
//! Budgets are parameter-weighted. For a global target `v` and ratio
//! `gamma`:
//!
//! ```text
//! v_attn = v (#mlp + #attn) / (#attn + gamma #mlp),   v_mlp = gamma v_attn
//! ```
//!
//! which removes exactly `v (#mlp + #attn)` parameters in total.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ParamCounts, ParamVars, Weights};
use crate::saliency::{UnitKind, UnitScore};
use crate::tape::{AttnGeometry, Tape};

/// Minimum MLP units kept per layer; also the alignment granularity.
pub const MLP_FLOOR: usize = 8;
/// Minimum KV groups kept per layer.
pub const KV_FLOOR: usize = 1;
pub const ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub v: f64,
    pub gamma: f64,
    pub v_mlp: f64,
    pub v_attn: f64,
    pub counts: ParamCounts,
    pub kappa: f64,
}

impl AllocationPlan {
    pub fn mlp_budget(&self) -> f64 {
        self.v_mlp * self.counts.mlp as f64
    }

    pub fn attn_budget(&self) -> f64 {
        self.v_attn * self.counts.attn as f64
    }
}

pub fn allocate(v: f64, gamma: f64, counts: ParamCounts) -> Result<AllocationPlan> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::invalid("sparsity", format!("{v} is outside [0, 1)")));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid("gamma", format!("{gamma} must be positive")));
    }
    if counts.mlp == 0 || counts.attn == 0 {
        return Err(Error::invalid("counts", "MLP and attention counts must be positive"));
    }
    let (m, a) = (counts.mlp as f64, counts.attn as f64);
    let v_attn = v * (m + a) / (a + gamma * m);
    let v_mlp = gamma * v_attn;
    if v_mlp > 1.0 || v_attn > 1.0 {
        return Err(Error::Infeasible(format!(
            "v={v}, gamma={gamma} gives v_mlp={v_mlp:.4}, v_attn={v_attn:.4}"
        )));
    }
    Ok(AllocationPlan {
        v,
        gamma,
        v_mlp,
        v_attn,
        counts,
        kappa: 1.0 - v,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Width of the layer the spec applies to.
    pub d_ff: usize,
    pub kv_heads: usize,
    /// Kept MLP units before alignment.
    pub target_mlp: usize,
    pub kept_mlp: Vec<usize>,
    pub kept_kv: Vec<usize>,
}

/// Per-layer kept MLP units and KV groups, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub layers: Vec<LayerSpec>,
}

impl PruneSpec {
    pub fn keep_all(config: &ModelConfig) -> Self {
        PruneSpec {
            layers: config
                .layers
                .iter()
                .map(|l| LayerSpec {
                    d_ff: l.d_ff,
                    kv_heads: l.kv_heads,
                    target_mlp: l.d_ff,
                    kept_mlp: (0..l.d_ff).collect(),
                    kept_kv: (0..l.kv_heads).collect(),
                })
                .collect(),
        }
    }

    /// Builds a spec from sets of pruned units.
    pub fn from_pruned(config: &ModelConfig, pruned: &[(UnitKind, usize, usize)]) -> Self {
        let mut spec = Self::keep_all(config);
        for &(kind, layer, index) in pruned {
            let l = &mut spec.layers[layer];
            match kind {
                UnitKind::MlpUnit => l.kept_mlp.retain(|&u| u != index),
                UnitKind::KvGroup => l.kept_kv.retain(|&g| g != index),
            }
        }
        for l in &mut spec.layers {
            l.target_mlp = l.kept_mlp.len();
        }
        spec
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.layers.len() {
            return Err(Error::SpecMismatch(format!(
                "{} layers in spec, {} in model",
                self.layers.len(),
                config.layers.len()
            )));
        }
        for (i, (s, l)) in self.layers.iter().zip(&config.layers).enumerate() {
            if s.d_ff != l.d_ff || s.kv_heads != l.kv_heads {
                return Err(Error::SpecMismatch(format!(
                    "layer {i}: spec for d_ff={} kv={}, model has d_ff={} kv={}",
                    s.d_ff, s.kv_heads, l.d_ff, l.kv_heads
                )));
            }
            let sorted = |v: &[usize], max: usize| {
                v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&x| x < max)
            };
            if !sorted(&s.kept_mlp, s.d_ff) || !sorted(&s.kept_kv, s.kv_heads) {
                return Err(Error::SpecMismatch(format!(
                    "layer {i}: kept indices must be strictly increasing and in range"
                )));
            }
        }
        Ok(())
    }

    /// Parameters removed from the prunable families.
    pub fn pruned_params(&self, config: &ModelConfig) -> (u64, u64) {
        let d = config.d_model as u64;
        let dh = config.head_dim as u64;
        let mut mlp = 0;
        let mut attn = 0;
        for (s, l) in self.layers.iter().zip(&config.layers) {
            mlp += 3 * d * (s.d_ff - s.kept_mlp.len()) as u64;
            let group = (2 * l.group_size() + 2) as u64;
            attn += d * dh * group * (s.kv_heads - s.kept_kv.len()) as u64;
        }
        (mlp, attn)
    }

    /// Text form: a header line, then one line per layer.
    ///
    /// ```text
    /// prune-spec v1 layers=2
    /// layer 0 d_ff=16 kv_heads=2 target_mlp=8 mlp=0,2,3,5,8,9,12,15 kv=1
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = format!("prune-spec v1 layers={}\n", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let join = |v: &[usize]| {
                v.iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(
                out,
                "layer {i} d_ff={} kv_heads={} target_mlp={} mlp={} kv={}",
                l.d_ff,
                l.kv_heads,
                l.target_mlp,
                join(&l.kept_mlp),
                join(&l.kept_kv)
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty prune spec".into()))?;
        let n: usize = header
            .strip_prefix("prune-spec v1 layers=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad header `{header}`")))?;
        let mut layers = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split_whitespace();
            let bad = || Error::Parse(format!("bad layer line `{line}`"));
            if parts.next() != Some("layer") || parts.next() != Some(&i.to_string()) {
                return Err(bad());
            }
            let mut field = |key: &str| -> Result<&str> {
                parts
                    .next()
                    .and_then(|p| p.strip_prefix(key))
                    .and_then(|p| p.strip_prefix('='))
                    .ok_or_else(bad)
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let list = |s: &str| -> Result<Vec<usize>> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(',').map(num).collect()
            };
            let d_ff = num(field("d_ff")?)?;
            let kv_heads = num(field("kv_heads")?)?;
            let target_mlp = num(field("target_mlp")?)?;
            let kept_mlp = list(field("mlp")?)?;
            let kept_kv = list(field("kv")?)?;
            layers.push(LayerSpec {
                d_ff,
                kv_heads,
                target_mlp,
                kept_mlp,
                kept_kv,
            });
        }
        if layers.len() != n {
            return Err(Error::Parse(format!(
                "header promises {n} layers, found {}",
                layers.len()
            )));
        }
        Ok(PruneSpec { layers })
    }
}

fn rank_order(a: &UnitScore, b: &UnitScore) -> std::cmp::Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
}

/// Prunes the lowest-ranked units until `budget` parameters are removed,
/// skipping units whose layer is at its floor. Returns the pruned units.
fn select_lowest(
    units: &mut [&UnitScore],
    budget: f64,
    tolerance: f64,
    remaining: &mut [usize],
    floors: &[usize],
) -> Option<Vec<(usize, usize)>> {
    units.sort_by(|a, b| rank_order(a, b));
    let mut removed = 0u64;
    let mut pruned = Vec::new();
    for u in units.iter() {
        if removed as f64 >= budget - tolerance {
            break;
        }
        if remaining[u.layer] > floors[u.layer] {
            remaining[u.layer] -= 1;
            removed += u.params;
            pruned.push((u.layer, u.index));
        }
    }
    (removed as f64 >= budget - tolerance).then_some(pruned)
}

/// How units are ranked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    /// All layers ranked jointly within each module type.
    Global,
    /// Each layer pruned by the same per-module ratio.
    Local,
}

/// Joint ranking of all MLP units (and separately all KV groups) across
/// layers, lowest scores pruned first. Equal scores break by
/// `(layer, index)` ascending.
pub fn global_rank_select(
    scores: &[UnitScore],
    plan: &AllocationPlan,
    config: &ModelConfig,
) -> Result<PruneSpec> {
    rank_select(scores, plan, config, Ranking::Global)
}

pub fn rank_select(
    scores: &[UnitScore],
    plan: &AllocationPlan,
    config: &ModelConfig,
    ranking: Ranking,
) -> Result<PruneSpec> {
    check_coverage(scores, config)?;
    let tol = 1e-9 * plan.counts.prunable() as f64;
    let mut pruned = Vec::new();
    for (kind, floor, v) in [
        (UnitKind::MlpUnit, MLP_FLOOR, plan.v_mlp),
        (UnitKind::KvGroup, KV_FLOOR, plan.v_attn),
    ] {
        let sizes: Vec<usize> = config
            .layers
            .iter()
            .map(|l| match kind {
                UnitKind::MlpUnit => l.d_ff,
                UnitKind::KvGroup => l.kv_heads,
            })
            .collect();
        let mut remaining = sizes.clone();
        let floors: Vec<usize> = sizes.iter().map(|&n| floor.min(n)).collect();
        let mut units: Vec<&UnitScore> = scores.iter().filter(|s| s.kind == kind).collect();
        match ranking {
            Ranking::Global => {
                let total: u64 = units.iter().map(|u| u.params).sum();
                let budget = v * total as f64;
                let chosen = select_lowest(&mut units, budget, tol, &mut remaining, &floors)
                    .ok_or_else(|| {
                        Error::Infeasible(format!(
                            "{kind:?} budget of {budget:.0} parameters cannot be met above the per-layer floor"
                        ))
                    })?;
                pruned.extend(chosen.into_iter().map(|(l, i)| (kind, l, i)));
            }
            Ranking::Local => {
                for layer in 0..config.layers.len() {
                    let mut mine: Vec<&UnitScore> =
                        units.iter().copied().filter(|u| u.layer == layer).collect();
                    let total: u64 = mine.iter().map(|u| u.params).sum();
                    let budget = v * total as f64;
                    let chosen = select_lowest(
                        &mut mine,
                        budget,
                        tol,
                        &mut remaining,
                        &floors,
                    )
                    .ok_or_else(|| {
                        Error::Infeasible(format!("layer {layer} {kind:?} budget below floor"))
                    })?;
                    pruned.extend(chosen.into_iter().map(|(l, i)| (kind, l, i)));
                }
            }
        }
    }
    Ok(PruneSpec::from_pruned(config, &pruned))
}

fn check_coverage(scores: &[UnitScore], config: &ModelConfig) -> Result<()> {
    let mut seen_mlp: Vec<Vec<bool>> = config.layers.iter().map(|l| vec![false; l.d_ff]).collect();
    let mut seen_kv: Vec<Vec<bool>> =
        config.layers.iter().map(|l| vec![false; l.kv_heads]).collect();
    for s in scores {
        let slot = match s.kind {
            UnitKind::MlpUnit => seen_mlp.get_mut(s.layer).and_then(|v| v.get_mut(s.index)),
            UnitKind::KvGroup => seen_kv.get_mut(s.layer).and_then(|v| v.get_mut(s.index)),
        };
        match slot {
            Some(seen) if !*seen => *seen = true,
            _ => {
                return Err(Error::SpecMismatch(format!(
                    "unexpected or duplicate score for {:?} {}:{}",
                    s.kind, s.layer, s.index
                )))
            }
        }
    }
    if seen_mlp.iter().chain(&seen_kv).flatten().any(|s| !s) {
        return Err(Error::SpecMismatch("scores do not cover every unit".into()));
    }
    Ok(())
}

/// Rounds every pruned layer's kept MLP width to a multiple of 8.
///
/// Layers are rounded to the nearest multiple with ties going up, except
/// that the number of layers rounded up is chosen so the total kept width
/// stays within four units of the unrounded total (largest remainders
/// round up first, lower layer index first on ties). Rounding up restores
/// the highest-scored pruned units; rounding down drops the lowest-scored
/// kept ones. Untouched layers and attention are left as they are.
pub fn align_dims(spec: &PruneSpec, scores: &[UnitScore]) -> Result<PruneSpec> {
    let mut out = spec.clone();
    let mut targets = Vec::new();
    let mut free = Vec::new();
    let mut total_rem = 0;
    let mut forced_up = 0;
    for (i, l) in spec.layers.iter().enumerate() {
        let k = l.kept_mlp.len();
        if k == l.d_ff || k % ALIGN == 0 {
            continue;
        }
        let rem = k % ALIGN;
        let lo = k - rem;
        let can_up = lo + ALIGN <= l.d_ff;
        let can_down = lo >= MLP_FLOOR.min(l.d_ff);
        total_rem += rem;
        match (can_down, can_up) {
            (true, true) => {
                free.push((i, rem));
                targets.push((i, lo));
            }
            (true, false) => targets.push((i, lo)),
            (false, true) => {
                forced_up += 1;
                targets.push((i, lo + ALIGN));
            }
            (false, false) => {}
        }
    }
    let mut ups = ((total_rem + ALIGN / 2) / ALIGN).saturating_sub(forced_up);
    free.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(layer, _) in &free {
        if ups == 0 {
            break;
        }
        if let Some(t) = targets.iter_mut().find(|t| t.0 == layer) {
            t.1 += ALIGN;
        }
        ups -= 1;
    }
    for (layer, target) in targets {
        let layer_scores = mlp_scores_of(scores, layer, spec.layers[layer].d_ff)?;
        resize_layer(&mut out.layers[layer], target, &layer_scores);
    }
    Ok(out)
}

fn mlp_scores_of(scores: &[UnitScore], layer: usize, d_ff: usize) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; d_ff];
    for s in scores
        .iter()
        .filter(|s| s.kind == UnitKind::MlpUnit && s.layer == layer)
    {
        if s.index < d_ff {
            out[s.index] = s.score;
        }
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::SpecMismatch(format!(
            "missing MLP scores for layer {layer}"
        )));
    }
    Ok(out)
}

fn resize_layer(layer: &mut LayerSpec, target: usize, scores: &[f64]) {
    let by_rank = |a: &usize, b: &usize| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b));
    let k = layer.kept_mlp.len();
    if target > k {
        let mut pruned: Vec<usize> = (0..layer.d_ff)
            .filter(|u| layer.kept_mlp.binary_search(u).is_err())
            .collect();
        pruned.sort_by(by_rank);
        layer
            .kept_mlp
            .extend(pruned.iter().rev().take(target - k).copied());
    } else if target < k {
        let mut kept = layer.kept_mlp.clone();
        kept.sort_by(by_rank);
        let drop: Vec<usize> = kept[..k - target].to_vec();
        layer.kept_mlp.retain(|u| !drop.contains(u));
    }
    layer.kept_mlp.sort_unstable();
}

/// Measured activation statistics and the ratio they imply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    /// Variance of the V projections.
    pub sigma_v_sq: f64,
    /// Variance of the gated MLP activation `swish(x W_gate) * x W_up`.
    pub sigma_phi_sq: f64,
    /// Mean over attention rows of the sum of squared attention weights.
    pub s: f64,
    pub kv_heads: f64,
    pub head_dim: usize,
    /// `h_kv s d_h sigma_v^2 / sigma_phi^2`: output influence of one head
    /// relative to one MLP neuron.
    pub influence_ratio: f64,
    pub params_per_head: f64,
    pub params_per_neuron: f64,
    /// `(I_attn / params_per_head) / (I_mlp / params_per_neuron)`.
    pub gamma: f64,
}

pub fn gamma_from_stats(
    sigma_v_sq: f64,
    sigma_phi_sq: f64,
    s: f64,
    kv_heads: f64,
    head_dim: usize,
    params_per_head: f64,
    params_per_neuron: f64,
) -> Result<GammaEstimate> {
    if !(sigma_phi_sq > 1e-12) {
        return Err(Error::Degenerate(format!(
            "MLP activation variance {sigma_phi_sq:e} is zero"
        )));
    }
    if !(sigma_v_sq > 1e-12) {
        return Err(Error::Degenerate(format!(
            "value activation variance {sigma_v_sq:e} is zero"
        )));
    }
    let influence_ratio = kv_heads * s * head_dim as f64 * sigma_v_sq / sigma_phi_sq;
    let gamma = influence_ratio * params_per_neuron / params_per_head;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Degenerate(format!("gamma {gamma}")));
    }
    Ok(GammaEstimate {
        sigma_v_sq,
        sigma_phi_sq,
        s,
        kv_heads,
        head_dim,
        influence_ratio,
        params_per_head,
        params_per_neuron,
        gamma,
    })
}

/// Mean over every attention row of `sum_s alpha_ts^2`.
pub fn mean_row_square_sum(geom: &AttnGeometry, probs: &[f32]) -> f64 {
    let rows = probs.chunks(geom.seq);
    let n = rows.len();
    rows.map(|r| r.iter().map(|&p| (p as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push_all(&mut self, xs: &[f32]) {
        for &x in xs {
            self.n += 1.0;
            self.sum += x as f64;
            self.sum_sq += (x as f64).powi(2);
        }
    }

    fn variance(&self) -> f64 {
        let mean = self.sum / self.n;
        (self.sum_sq / self.n - mean * mean).max(0.0)
    }
}

/// One forward pass over `batch`, pooling statistics over all layers.
pub fn derive_gamma(weights: &Weights, batch: &Batch) -> Result<GammaEstimate> {
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, weights, false);
    let trace = forward(&mut tape, &params, &weights.config, &batch.samples)?;
    let mut v = Moments::default();
    let mut phi = Moments::default();
    let mut s_total = 0.0;
    for lt in &trace.layers {
        v.push_all(tape.value(lt.values).data());
        phi.push_all(tape.value(lt.hidden).data());
        let (geom, probs) = tape
            .attention_probs(lt.attention)
            .ok_or_else(|| Error::shape("derive_gamma", "attention node lost its probabilities"))?;
        s_total += mean_row_square_sum(geom, probs);
    }
    let cfg = &weights.config;
    let layers = cfg.layers.len().max(1) as f64;
    let d = cfg.d_model as f64;
    let dh = cfg.head_dim as f64;
    let kv_heads = cfg.layers.iter().map(|l| l.kv_heads as f64).sum::<f64>() / layers;
    let params_per_head = cfg
        .layers
        .iter()
        .map(|l| d * dh * (2.0 + 2.0 * l.kv_heads as f64 / l.heads as f64))
        .sum::<f64>()
        / layers;
    gamma_from_stats(
        v.variance(),
        phi.variance(),
        s_total / layers,
        kv_heads,
        cfg.head_dim,
        params_per_head,
        3.0 * d,
    )
}
