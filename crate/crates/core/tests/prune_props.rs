//! Mask/shrink equivalence, dependency consistency and pipeline
//! determinism.

mod common;

use common::{corpus, random_spec, random_tokens, small_config};
use ntk_prune::allocator::{align_dims, allocate, global_rank_select, PruneSpec};
use ntk_prune::data::{sample_batch, Split};
use ntk_prune::model::{forward_logits, Weights};
use ntk_prune::prune::{
    apply_masks, prune_pipeline, shrink_model, unit_scores, CalibSettings, GammaSetting, MaskSet,
    Mode, PipelineConfig,
};
use ntk_prune::rng::SplitMix64;
use proptest::prelude::*;

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_and_shrunk_models_agree(seed in any::<u64>()) {
        let w = Weights::init(&small_config(), seed).unwrap();
        let mut rng = SplitMix64::new(seed);
        let spec = random_spec(&w.config, &mut rng);
        let masked = apply_masks(&w, &spec).unwrap();
        let shrunk = shrink_model(&w, &spec).unwrap();
        for _ in 0..3 {
            let tokens = random_tokens(&mut rng, 12, 258);
            let a = forward_logits(&masked, &tokens).unwrap();
            let b = forward_logits(&shrunk, &tokens).unwrap();
            prop_assert!(max_diff(a.data(), b.data()) < 1e-5);
        }
    }

    #[test]
    fn masks_never_split_a_unit(seed in any::<u64>()) {
        let w = Weights::init(&small_config(), seed).unwrap();
        let spec = random_spec(&w.config, &mut SplitMix64::new(seed));
        let masks = MaskSet::from_spec(&spec, &w.config).unwrap();
        let dh = w.config.head_dim;
        let d = w.config.d_model;
        for (layer, dims) in w.config.layers.iter().enumerate() {
            let [q, k, v, o, gate, up, down] =
                std::array::from_fn(|f| masks.family(layer, f).clone());
            for u in 0..dims.d_ff {
                let g = gate.at(0, u);
                for i in 0..d {
                    prop_assert_eq!(gate.at(i, u), g);
                    prop_assert_eq!(up.at(i, u), g);
                    prop_assert_eq!(down.at(u, i), g);
                }
            }
            for a in 0..dims.heads {
                let grp = a * dims.kv_heads / dims.heads;
                let kept = k.at(0, grp * dh);
                for i in 0..d {
                    for j in 0..dh {
                        prop_assert_eq!(q.at(i, a * dh + j), kept);
                        prop_assert_eq!(o.at(a * dh + j, i), kept);
                        prop_assert_eq!(k.at(i, grp * dh + j), kept);
                        prop_assert_eq!(v.at(i, grp * dh + j), kept);
                    }
                }
            }
        }
    }

    #[test]
    fn spec_text_roundtrip(seed in any::<u64>()) {
        let spec = random_spec(&small_config(), &mut SplitMix64::new(seed));
        prop_assert_eq!(PruneSpec::from_text(&spec.to_text()).unwrap(), spec);
    }
}

#[test]
fn shrunk_parameter_counts_match_spec() {
    let w = Weights::init(&small_config(), 1).unwrap();
    let spec = random_spec(&w.config, &mut SplitMix64::new(1));
    let shrunk = shrink_model(&w, &spec).unwrap();
    let (mlp, attn) = spec.pruned_params(&w.config);
    let before = w.param_counts();
    let after = shrunk.param_counts();
    assert_eq!(before.mlp - after.mlp, mlp);
    assert_eq!(before.attn - after.attn, attn);
    assert_eq!(shrunk.named_tensors().iter().map(|(_, t)| t.len() as u64).sum::<u64>(), after.total);
}

#[test]
fn pruning_a_pruned_model_at_zero_is_identity() {
    let w = Weights::init(&small_config(), 2).unwrap();
    let spec = random_spec(&w.config, &mut SplitMix64::new(2));
    let shrunk = shrink_model(&w, &spec).unwrap();
    let keep = PruneSpec::keep_all(&shrunk.config);
    assert_eq!(shrink_model(&shrunk, &keep).unwrap(), shrunk);
}

fn tiny_calib() -> CalibSettings {
    CalibSettings {
        trials: 3,
        n: 4,
        seq_len: 32,
        seed: 0,
        eval_n: 2,
        eval_seq_len: 32,
        ..CalibSettings::default()
    }
}

#[test]
fn pipeline_at_zero_sparsity_keeps_weights() {
    let w = Weights::init(&small_config(), 3).unwrap();
    let c = corpus(300);
    let mut config = PipelineConfig::new(0.0, GammaSetting::Fixed(1.0), Mode::Ntk);
    config.calib = tiny_calib();
    let out = prune_pipeline(&config, &c, &w).unwrap();
    assert_eq!(out.pruned, w);
    assert_eq!(out.sparsity.achieved, 0.0);
}

#[test]
fn pipeline_is_deterministic() {
    let w = Weights::init(&small_config(), 4).unwrap();
    let c = corpus(300);
    for mode in [Mode::Ntk, Mode::Magnitude, Mode::Local, Mode::GammaOff, Mode::RandomCalib] {
        let mut config = PipelineConfig::new(0.4, GammaSetting::Analytic, mode);
        config.calib = tiny_calib();
        let a = prune_pipeline(&config, &c, &w).unwrap();
        let b = prune_pipeline(&config, &c, &w).unwrap();
        assert_eq!(a.spec.to_text(), b.spec.to_text(), "{mode:?}");
        assert_eq!(a.pruned, b.pruned);
        assert!(a.pruned.config.layers.iter().all(|l| l.d_ff % 8 == 0));
        if mode == Mode::GammaOff {
            assert_eq!(a.plan.gamma, 1.0);
        }
        assert_eq!(a.selection.is_some(), !matches!(mode, Mode::Magnitude | Mode::RandomCalib));
    }
}

#[test]
fn pipeline_prunes_exactly_the_aligned_global_selection() {
    let w = Weights::init(&small_config(), 5).unwrap();
    let c = corpus(300);
    let mut config = PipelineConfig::new(0.3, GammaSetting::Fixed(2.0), Mode::Ntk);
    config.calib = tiny_calib();
    let out = prune_pipeline(&config, &c, &w).unwrap();
    let batch = sample_batch(&c, Split::CalibPool, out.calibration.seed, 4, 32).unwrap();
    let scores = unit_scores(&w, &batch, Mode::Ntk).unwrap();
    let plan = allocate(0.3, 2.0, w.param_counts()).unwrap();
    let spec = align_dims(&global_rank_select(&scores, &plan, &w.config).unwrap(), &scores).unwrap();
    assert_eq!(spec, out.spec);
}
