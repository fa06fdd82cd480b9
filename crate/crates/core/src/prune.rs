//! Applying prune decisions and the end-to-end pruning pipeline.
//!
//! A [`PruneSpec`] is realized either as masks (shapes unchanged, used for
//! calibration trials and kernel checks) or by [`shrink_model`], which
//! copies the kept rows and columns into a genuinely smaller model. The two
//! realizations compute the same function.

use serde::{Deserialize, Serialize};

use crate::allocator::{
    align_dims, allocate, derive_gamma, rank_select, AllocationPlan, GammaEstimate, PruneSpec,
    Ranking, KV_FLOOR, MLP_FLOOR,
};
use crate::calib::{select_calibration, SelectionReport, SelectionSetup};
use crate::data::{sample_batch, Batch, Corpus, Split};
use crate::error::{Error, Result, StageExt};
use crate::model::{LayerDims, ModelConfig, Weights};
use crate::saliency::{
    compute_saliency, group_scores, magnitude_scores, ntk_stability_check, NtkReport, UnitScore,
};
use crate::tensor::Tensor;

/// Binary masks over the seven prunable matrices of every layer, in the
/// order `wq, wk, wv, wo, w_gate, w_up, w_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    layers: Vec<[Tensor; 7]>,
}

impl MaskSet {
    /// Expands unit-level decisions so every member weight of a unit shares
    /// its fate.
    pub fn from_spec(spec: &PruneSpec, config: &ModelConfig) -> Result<Self> {
        spec.check(config)?;
        let d = config.d_model;
        let dh = config.head_dim;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (s, l) in spec.layers.iter().zip(&config.layers) {
            let mut mlp_keep = vec![0f32; l.d_ff];
            for &u in &s.kept_mlp {
                mlp_keep[u] = 1.0;
            }
            let mut kv_keep = vec![0f32; l.kv_heads];
            for &g in &s.kept_kv {
                kv_keep[g] = 1.0;
            }
            let head_keep: Vec<f32> = (0..l.heads)
                .map(|a| kv_keep[a * l.kv_heads / l.heads])
                .collect();
            let cols = |rows: usize, keep: &[f32], width: usize| {
                let row: Vec<f32> = keep
                    .iter()
                    .flat_map(|&k| std::iter::repeat(k).take(width))
                    .collect();
                let data = row.iter().copied().cycle().take(rows * row.len()).collect();
                Tensor::new(vec![rows, row.len()], data).expect("mask shape")
            };
            let rows_of = |keep: &[f32], height: usize, cols: usize| {
                let data = keep
                    .iter()
                    .flat_map(|&k| std::iter::repeat(k).take(height * cols))
                    .collect();
                Tensor::new(vec![keep.len() * height, cols], data).expect("mask shape")
            };
            layers.push([
                cols(d, &head_keep, dh),
                cols(d, &kv_keep, dh),
                cols(d, &kv_keep, dh),
                rows_of(&head_keep, dh, d),
                cols(d, &mlp_keep, 1),
                cols(d, &mlp_keep, 1),
                rows_of(&mlp_keep, 1, d),
            ]);
        }
        Ok(MaskSet { layers })
    }

    pub fn family(&self, layer: usize, family: usize) -> &Tensor {
        &self.layers[layer][family]
    }

    pub fn pruned_count(&self) -> u64 {
        self.layers
            .iter()
            .flatten()
            .map(|t| t.data().iter().filter(|&&m| m == 0.0).count() as u64)
            .sum()
    }

    pub fn apply(&self, weights: &Weights) -> Result<Weights> {
        if self.layers.len() != weights.layers.len() {
            return Err(Error::SpecMismatch("mask layer count".into()));
        }
        let mut out = weights.clone();
        for (lw, masks) in out.layers.iter_mut().zip(&self.layers) {
            for ((name, t), m) in lw.prunable_mut().into_iter().zip(masks) {
                if t.shape() != m.shape() {
                    return Err(Error::SpecMismatch(format!(
                        "{name}: mask {:?} vs weight {:?}",
                        m.shape(),
                        t.shape()
                    )));
                }
                t.data_mut()
                    .iter_mut()
                    .zip(m.data())
                    .for_each(|(w, &k)| *w *= k);
            }
        }
        Ok(out)
    }
}

/// Zeroes every pruned unit; shapes are unchanged.
pub fn apply_masks(weights: &Weights, spec: &PruneSpec) -> Result<Weights> {
    MaskSet::from_spec(spec, &weights.config)?.apply(weights)
}

/// Copies kept units into a smaller model, preserving their relative order.
pub fn shrink_model(weights: &Weights, spec: &PruneSpec) -> Result<Weights> {
    let config = &weights.config;
    spec.check(config)?;
    let dh = config.head_dim;
    let mut new_cfg = config.clone();
    let mut out = weights.clone();
    for (i, ((s, dims), lw)) in spec
        .layers
        .iter()
        .zip(&config.layers)
        .zip(out.layers.iter_mut())
        .enumerate()
    {
        if s.kept_mlp.len() < MLP_FLOOR.min(dims.d_ff) || s.kept_kv.len() < KV_FLOOR {
            return Err(Error::SpecMismatch(format!(
                "layer {i} keeps {} MLP units and {} KV groups, below the floor",
                s.kept_mlp.len(),
                s.kept_kv.len()
            )));
        }
        let group = dims.group_size();
        let kept_heads: Vec<usize> = s
            .kept_kv
            .iter()
            .flat_map(|&g| g * group..(g + 1) * group)
            .collect();
        let head_cols: Vec<usize> = kept_heads
            .iter()
            .flat_map(|&a| a * dh..(a + 1) * dh)
            .collect();
        let kv_cols: Vec<usize> = s
            .kept_kv
            .iter()
            .flat_map(|&g| g * dh..(g + 1) * dh)
            .collect();
        lw.wq = lw.wq.select_cols(&head_cols)?;
        lw.wk = lw.wk.select_cols(&kv_cols)?;
        lw.wv = lw.wv.select_cols(&kv_cols)?;
        lw.wo = lw.wo.select_rows(&head_cols)?;
        lw.w_gate = lw.w_gate.select_cols(&s.kept_mlp)?;
        lw.w_up = lw.w_up.select_cols(&s.kept_mlp)?;
        lw.w_down = lw.w_down.select_rows(&s.kept_mlp)?;
        new_cfg.layers[i] = LayerDims {
            d_ff: s.kept_mlp.len(),
            heads: kept_heads.len(),
            kv_heads: s.kept_kv.len(),
        };
    }
    out.config = new_cfg;
    out.validate()?;
    Ok(out)
}

/// Which variant of the pipeline runs. Everything except `Ntk` is an
/// ablation that changes exactly one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Gradient saliency, global ranking, configured gamma, KL-selected data.
    Ntk,
    /// Unit scores from `|W|` alone.
    Magnitude,
    /// Per-layer ranking with a uniform per-layer ratio.
    Local,
    /// Gamma fixed to 1.
    GammaOff,
    /// One random calibration batch instead of KL selection.
    RandomCalib,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GammaSetting {
    Fixed(f64),
    Analytic,
}

impl std::str::FromStr for GammaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "analytic" {
            return Ok(GammaSetting::Analytic);
        }
        match s.parse::<f64>() {
            Ok(g) if g.is_finite() && g > 0.0 => Ok(GammaSetting::Fixed(g)),
            _ => Err(Error::invalid(
                "gamma",
                format!("`{s}` is neither `analytic` nor a positive number"),
            )),
        }
    }
}

impl TryFrom<String> for GammaSetting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GammaSetting> for String {
    fn from(g: GammaSetting) -> String {
        g.to_string()
    }
}

impl std::fmt::Display for GammaSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GammaSetting::Fixed(g) => write!(f, "{g}"),
            GammaSetting::Analytic => f.write_str("analytic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSettings {
    /// Candidate batches tried by the selector.
    pub trials: usize,
    pub n: usize,
    pub seq_len: usize,
    /// Candidate `t` uses seed `seed + t`.
    pub seed: u64,
    pub eval_n: usize,
    pub eval_seq_len: usize,
    pub eval_seed: u64,
}

impl Default for CalibSettings {
    fn default() -> Self {
        Self {
            trials: 50,
            n: 32,
            seq_len: 128,
            seed: 0,
            eval_n: 8,
            eval_seq_len: 128,
            eval_seed: EVAL_SEED,
        }
    }
}

/// Default seed of the fixed KL evaluation set.
pub const EVAL_SEED: u64 = 0x5EED_0E7A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub v: f64,
    pub gamma: GammaSetting,
    pub mode: Mode,
    pub calib: CalibSettings,
}

impl PipelineConfig {
    pub fn new(v: f64, gamma: GammaSetting, mode: Mode) -> Self {
        Self {
            v,
            gamma,
            mode,
            calib: CalibSettings::default(),
        }
    }

    fn ranking(&self) -> Ranking {
        if self.mode == Mode::Local {
            Ranking::Local
        } else {
            Ranking::Global
        }
    }
}

/// Achieved sparsity of a finished pruning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub target: f64,
    pub gamma: f64,
    pub planned_v_mlp: f64,
    pub planned_v_attn: f64,
    pub achieved_v_mlp: f64,
    pub achieved_v_attn: f64,
    /// Fraction of prunable parameters removed.
    pub achieved: f64,
    pub params_before: u64,
    pub params_after: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub pruned: Weights,
    pub spec: PruneSpec,
    pub plan: AllocationPlan,
    pub gamma: Option<GammaEstimate>,
    pub selection: Option<SelectionReport>,
    pub ntk: NtkReport,
    pub sparsity: SparsityReport,
    pub calibration: Batch,
}

/// Scores units for one calibration batch according to `mode`.
pub fn unit_scores(weights: &Weights, batch: &Batch, mode: Mode) -> Result<Vec<UnitScore>> {
    match mode {
        Mode::Magnitude => magnitude_scores(weights),
        _ => {
            let field = compute_saliency(weights, batch)?;
            group_scores(&field, &weights.config)
        }
    }
}

/// The allocation ratio a config resolves to, with the measurement when
/// it is analytic.
pub fn resolve_gamma(
    config: &PipelineConfig,
    weights: &Weights,
    corpus: &Corpus,
) -> Result<(f64, Option<GammaEstimate>)> {
    if config.mode == Mode::GammaOff {
        return Ok((1.0, None));
    }
    match config.gamma {
        GammaSetting::Fixed(g) => Ok((g, None)),
        GammaSetting::Analytic => {
            let c = &config.calib;
            let batch = sample_batch(corpus, Split::CalibPool, c.seed, c.n, c.seq_len)?;
            let est = derive_gamma(weights, &batch)?;
            Ok((est.gamma, Some(est)))
        }
    }
}

/// Prune-and-mask for one calibration batch, without alignment.
pub fn trial_prune(
    weights: &Weights,
    batch: &Batch,
    plan: &AllocationPlan,
    mode: Mode,
    ranking: Ranking,
) -> Result<Weights> {
    let scores = unit_scores(weights, batch, mode)?;
    let spec = rank_select(&scores, plan, &weights.config, ranking)?;
    apply_masks(weights, &spec)
}

/// Scores, ranks and aligns with one fixed calibration batch.
pub fn spec_for_batch(
    weights: &Weights,
    batch: &Batch,
    plan: &AllocationPlan,
    mode: Mode,
) -> Result<PruneSpec> {
    let ranking = if mode == Mode::Local {
        Ranking::Local
    } else {
        Ranking::Global
    };
    let scores = unit_scores(weights, batch, mode)?;
    let spec = rank_select(&scores, plan, &weights.config, ranking)?;
    align_dims(&spec, &scores)
}

/// Kernel stability of the pruning a single batch induces at sparsity `v`.
pub fn ntk_check(
    weights: &Weights,
    batch: &Batch,
    v: f64,
    gamma: f64,
    mode: Mode,
) -> Result<(PruneSpec, NtkReport)> {
    let plan = allocate(v, gamma, weights.param_counts())?;
    let spec = spec_for_batch(weights, batch, &plan, mode)?;
    let masks = MaskSet::from_spec(&spec, &weights.config)?;
    let masked = masks.apply(weights)?;
    let report = ntk_stability_check(weights, &masked, &masks, batch)?;
    Ok((spec, report))
}

/// Calibration selection, scoring, allocation, ranking, alignment and
/// structural removal, with kernel and sparsity reports.
pub fn prune_pipeline(
    config: &PipelineConfig,
    corpus: &Corpus,
    weights: &Weights,
) -> Result<PipelineOutput> {
    weights.validate().stage("load")?;
    let c = config.calib;
    let (gamma, estimate) = resolve_gamma(config, weights, corpus).stage("gamma")?;
    let plan = allocate(config.v, gamma, weights.param_counts()).stage("allocate")?;
    let ranking = config.ranking();

    let (calibration, selection) = match config.mode {
        _ if config.v == 0.0 => (
            sample_batch(corpus, Split::CalibPool, c.seed, c.n, c.seq_len).stage("calibration")?,
            None,
        ),
        Mode::Magnitude => (
            sample_batch(corpus, Split::CalibPool, c.seed, c.n, c.seq_len).stage("calibration")?,
            None,
        ),
        Mode::RandomCalib => (
            sample_batch(
                corpus,
                Split::CalibPool,
                c.seed.wrapping_add(c.trials as u64),
                c.n,
                c.seq_len,
            )
            .stage("calibration")?,
            None,
        ),
        mode => {
            let eval = sample_batch(corpus, Split::Eval, c.eval_seed, c.eval_n, c.eval_seq_len)
                .stage("calibration")?;
            let setup = SelectionSetup {
                seeds: (0..c.trials as u64).map(|t| c.seed.wrapping_add(t)).collect(),
                n: c.n,
                seq_len: c.seq_len,
            };
            let report = select_calibration(weights, corpus, &setup, &eval, None, |batch| {
                trial_prune(weights, batch, &plan, mode, ranking)
            })
            .stage("calibration")?;
            let batch = sample_batch(corpus, Split::CalibPool, report.chosen_seed, c.n, c.seq_len)
                .stage("calibration")?;
            (batch, Some(report))
        }
    };

    let scores = unit_scores(weights, &calibration, config.mode).stage("score")?;
    let spec = rank_select(&scores, &plan, &weights.config, ranking).stage("rank")?;
    let spec = align_dims(&spec, &scores).stage("align")?;
    let masks = MaskSet::from_spec(&spec, &weights.config).stage("mask")?;
    let masked = masks.apply(weights).stage("mask")?;
    let ntk = ntk_stability_check(weights, &masked, &masks, &calibration).stage("ntk")?;
    let pruned = shrink_model(weights, &spec).stage("shrink")?;

    let before = weights.param_counts();
    let after = pruned.param_counts();
    let sparsity = SparsityReport {
        target: config.v,
        gamma,
        planned_v_mlp: plan.v_mlp,
        planned_v_attn: plan.v_attn,
        achieved_v_mlp: 1.0 - after.mlp as f64 / before.mlp as f64,
        achieved_v_attn: 1.0 - after.attn as f64 / before.attn as f64,
        achieved: 1.0 - after.prunable() as f64 / before.prunable() as f64,
        params_before: before.total,
        params_after: after.total,
    };
    Ok(PipelineOutput {
        pruned,
        spec,
        plan,
        gamma: estimate,
        selection,
        ntk,
        sparsity,
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_logits;
    use crate::saliency::UnitKind;

    fn weights() -> Weights {
        Weights::init(&ModelConfig::uniform(16, 16, 4, 2, 2, 8).unwrap(), 11).unwrap()
    }

    #[test]
    fn empty_prune_set_is_identity() {
        let w = weights();
        let spec = PruneSpec::keep_all(&w.config);
        assert_eq!(apply_masks(&w, &spec).unwrap(), w);
        assert_eq!(shrink_model(&w, &spec).unwrap(), w);
    }

    #[test]
    fn masks_cover_whole_units() {
        let w = weights();
        let spec = PruneSpec::from_pruned(
            &w.config,
            &[(UnitKind::MlpUnit, 0, 3), (UnitKind::KvGroup, 1, 0)],
        );
        let m = apply_masks(&w, &spec).unwrap();
        let l0 = &m.layers[0];
        for i in 0..16 {
            assert_eq!(l0.w_gate.at(i, 3), 0.0);
            assert_eq!(l0.w_up.at(i, 3), 0.0);
            assert_eq!(l0.w_down.at(3, i), 0.0);
            assert_ne!(l0.w_gate.at(i, 4), 0.0);
        }
        let l1 = &m.layers[1];
        // group 0 owns query heads 0 and 1 (columns 0..8) and kv columns 0..4
        for i in 0..16 {
            assert!((0..8).all(|j| l1.wq.at(i, j) == 0.0 && l1.wo.at(j, i) == 0.0));
            assert!((8..16).all(|j| l1.wq.at(i, j) != 0.0));
            assert!((0..4).all(|j| l1.wk.at(i, j) == 0.0 && l1.wv.at(i, j) == 0.0));
        }
        let masks = MaskSet::from_spec(&spec, &w.config).unwrap();
        assert_eq!(masks.pruned_count(), 3 * 16 + 16 * 4 * 6);
    }

    #[test]
    fn shrink_shapes() {
        let w = weights();
        let mut pruned: Vec<_> = (0..8).map(|u| (UnitKind::MlpUnit, 0, u)).collect();
        pruned.push((UnitKind::KvGroup, 0, 1));
        let spec = PruneSpec::from_pruned(&w.config, &pruned);
        let s = shrink_model(&w, &spec).unwrap();
        assert_eq!(s.config.layers[0].d_ff, 8);
        assert_eq!(s.layers[0].w_gate.shape(), &[16, 8]);
        assert_eq!(s.config.layers[0].heads, 2);
        assert_eq!(s.config.layers[0].kv_heads, 1);
        assert_eq!(s.config.layers[1], w.config.layers[1]);
    }

    #[test]
    fn shrink_rejects_empty_layer() {
        let w = weights();
        let pruned: Vec<_> = (0..2).map(|g| (UnitKind::KvGroup, 0, g)).collect();
        let spec = PruneSpec::from_pruned(&w.config, &pruned);
        assert!(shrink_model(&w, &spec).is_err());
    }

    #[test]
    fn zeroed_mlp_contributes_nothing() {
        let w = weights();
        let pruned: Vec<_> = (0..16).map(|u| (UnitKind::MlpUnit, 1, u)).collect();
        let spec = PruneSpec::from_pruned(&w.config, &pruned);
        let masked = apply_masks(&w, &spec).unwrap();
        let mut no_mlp = w.clone();
        no_mlp.layers[1].w_down.data_mut().fill(0.0);
        let a = forward_logits(&masked, &[1, 2, 3]).unwrap();
        let b = forward_logits(&no_mlp, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_setting_parses() {
        assert_eq!("analytic".parse::<GammaSetting>().unwrap(), GammaSetting::Analytic);
        assert_eq!("3".parse::<GammaSetting>().unwrap(), GammaSetting::Fixed(3.0));
        assert!("-1".parse::<GammaSetting>().is_err());
    }
}
