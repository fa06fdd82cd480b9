//! Allocation identities, ranking floors and alignment.

mod common;

use common::small_config;
use ntk_prune::allocator::{align_dims, allocate, rank_select, Ranking, ALIGN, MLP_FLOOR};
use ntk_prune::model::{ModelConfig, ParamCounts};
use ntk_prune::saliency::{UnitKind, UnitScore};
use ntk_prune::rng::SplitMix64;
use proptest::prelude::*;

fn toy_counts() -> ParamCounts {
    ModelConfig::toy().param_counts()
}

#[test]
fn gamma_one_collapses_to_uniform() {
    for v in [0.0, 0.1, 0.37, 0.5, 0.9] {
        let p = allocate(v, 1.0, toy_counts()).unwrap();
        assert_eq!(p.v_attn, v);
        assert_eq!(p.v_mlp, v);
    }
}

#[test]
fn conservation_on_grid() {
    let c = toy_counts();
    let (m, a) = (c.mlp as f64, c.attn as f64);
    let mut checked = 0;
    for i in 0..10 {
        for j in 0..10 {
            let v = 0.05 + 0.09 * i as f64;
            let gamma = 0.25 + 0.5 * j as f64;
            match allocate(v, gamma, c) {
                Ok(p) => {
                    let lhs = p.v_mlp * m + p.v_attn * a;
                    let rhs = v * (m + a);
                    assert!((lhs - rhs).abs() <= 1e-9 * rhs, "v={v} gamma={gamma}");
                    assert!((p.v_mlp - gamma * p.v_attn).abs() < 1e-12);
                }
                Err(ntk_prune::Error::Infeasible(_)) => {
                    let v_attn = v * (m + a) / (a + gamma * m);
                    assert!(gamma * v_attn > 1.0 || v_attn > 1.0);
                }
                Err(e) => panic!("{e}"),
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
}

#[test]
fn monotone_in_gamma() {
    let c = toy_counts();
    let mut prev = allocate(0.4, 0.5, c).unwrap();
    for k in 1..60 {
        let gamma = 0.5 + 0.05 * k as f64;
        let Ok(p) = allocate(0.4, gamma, c) else { break };
        assert!(p.v_mlp >= prev.v_mlp && p.v_attn <= prev.v_attn);
        prev = p;
    }
}

#[test]
fn scale_invariant_in_counts() {
    let c = toy_counts();
    let scaled = ParamCounts {
        mlp: c.mlp * 7,
        attn: c.attn * 7,
        total: c.total * 7,
    };
    let a = allocate(0.5, 3.0, c).unwrap();
    let b = allocate(0.5, 3.0, scaled).unwrap();
    assert!((a.v_mlp - b.v_mlp).abs() < 1e-12 && (a.v_attn - b.v_attn).abs() < 1e-12);
}

#[test]
fn rejects_invalid_inputs() {
    assert!(allocate(1.0, 1.0, toy_counts()).is_err());
    assert!(allocate(-0.1, 1.0, toy_counts()).is_err());
    assert!(allocate(0.5, 0.0, toy_counts()).is_err());
    assert!(allocate(0.5, f64::NAN, toy_counts()).is_err());
}

fn random_scores(config: &ModelConfig, seed: u64) -> Vec<UnitScore> {
    let mut rng = SplitMix64::new(seed);
    let d = config.d_model as u64;
    let dh = config.head_dim as u64;
    let mut out = Vec::new();
    for (layer, l) in config.layers.iter().enumerate() {
        for index in 0..l.d_ff {
            // coarse scores force plenty of ties
            let score = rng.below(20) as f64;
            out.push(UnitScore { kind: UnitKind::MlpUnit, layer, index, score, params: 3 * d });
        }
        let group = (l.heads / l.kv_heads) as u64;
        for index in 0..l.kv_heads {
            let score = rng.next_f64() * 10.0;
            out.push(UnitScore {
                kind: UnitKind::KvGroup,
                layer,
                index,
                score,
                params: d * dh * (2 + 2 * group),
            });
        }
    }
    out
}

fn layered_config(seed: u64) -> ModelConfig {
    let mut rng = SplitMix64::new(seed);
    let mut c = ModelConfig::uniform(16, 64, 4, 2, 3, 16).unwrap();
    for l in c.layers.iter_mut() {
        l.d_ff = 16 + 8 * rng.below(7) as usize + rng.below(2) as usize * 3;
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selection_respects_floors_and_budget(seed in any::<u64>(), v in 0.0f64..0.85, gamma in 0.3f64..4.0, local in any::<bool>()) {
        let config = layered_config(seed);
        let scores = random_scores(&config, seed);
        let Ok(plan) = allocate(v, gamma, config.param_counts()) else { return Ok(()) };
        let ranking = if local { Ranking::Local } else { Ranking::Global };
        let Ok(spec) = rank_select(&scores, &plan, &config, ranking) else { return Ok(()) };
        spec.check(&config).unwrap();
        for (l, dims) in spec.layers.iter().zip(&config.layers) {
            prop_assert!(l.kept_mlp.len() >= MLP_FLOOR.min(dims.d_ff));
            prop_assert!(!l.kept_kv.is_empty());
        }
        let (mlp, attn) = spec.pruned_params(&config);
        prop_assert!(mlp as f64 >= plan.mlp_budget() - 1e-6 * plan.counts.prunable() as f64);
        prop_assert!(attn as f64 >= plan.attn_budget() - 1e-6 * plan.counts.prunable() as f64);
        // at most one unit of overshoot per selection pass
        let passes = if local { config.layers.len() as f64 } else { 1.0 };
        prop_assert!((mlp as f64) < plan.mlp_budget() + passes * 3.0 * 16.0 + 1e-6);

        let aligned = align_dims(&spec, &scores).unwrap();
        let before: usize = spec.layers.iter().map(|l| l.kept_mlp.len()).sum();
        let after: usize = aligned.layers.iter().map(|l| l.kept_mlp.len()).sum();
        for (a, dims) in aligned.layers.iter().zip(&config.layers) {
            prop_assert!(a.kept_mlp.len() % ALIGN == 0 || a.kept_mlp.len() == dims.d_ff);
            prop_assert!(a.kept_mlp.len() >= MLP_FLOOR);
        }
        prop_assert!((after as i64 - before as i64).abs() <= (ALIGN / 2) as i64 + ALIGN as i64);
        prop_assert_eq!(&aligned.layers.iter().map(|l| &l.kept_kv).collect::<Vec<_>>(),
                        &spec.layers.iter().map(|l| &l.kept_kv).collect::<Vec<_>>());
    }

    #[test]
    fn global_prefers_lower_scores(seed in any::<u64>()) {
        let config = small_config();
        let scores = random_scores(&config, seed);
        let plan = allocate(0.3, 1.0, config.param_counts()).unwrap();
        let spec = rank_select(&scores, &plan, &config, Ranking::Global).unwrap();
        // every pruned unit in a layer above its floor scores no higher than every kept one
        let kept_min = scores.iter().filter(|s| s.kind == UnitKind::MlpUnit
            && spec.layers[s.layer].kept_mlp.contains(&s.index)
            && spec.layers[s.layer].kept_mlp.len() > MLP_FLOOR)
            .map(|s| s.score).fold(f64::INFINITY, f64::min);
        for s in scores.iter().filter(|s| s.kind == UnitKind::MlpUnit
            && !spec.layers[s.layer].kept_mlp.contains(&s.index)) {
            prop_assert!(s.score <= kept_min);
        }
    }
}
