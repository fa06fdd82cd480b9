//! End-to-end structured pruning at 50% sparsity, then a short recovery
//! fine-tune.
//!
//! `cargo run --release --example prune_pipeline`

use ntk_prune::data::{synthetic, Corpus, Split, SplitRatios};
use ntk_prune::eval::eval_ppl;
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::prune::{prune_pipeline, CalibSettings, GammaSetting, Mode, PipelineConfig};
use ntk_prune::train::{finetune, train, TrainConfig};

fn main() -> ntk_prune::Result<()> {
    let corpus = Corpus::from_bytes("synthetic", &synthetic::generate(0, 400), SplitRatios::default())?;
    let mut w = Weights::init(&ModelConfig::toy(), 0)?;
    train(&mut w, &corpus, &TrainConfig { steps: 60, log_every: 0, ..TrainConfig::default() })?;
    let mut config = PipelineConfig::new(0.5, GammaSetting::Analytic, Mode::Ntk);
    config.calib = CalibSettings { trials: 4, n: 8, ..CalibSettings::default() };
    let out = prune_pipeline(&config, &corpus, &w)?;
    let s = out.sparsity;
    println!(
        "gamma {:.3}: planned mlp {:.3} attn {:.3}, achieved {:.4} ({} -> {} params)",
        s.gamma, s.planned_v_mlp, s.planned_v_attn, s.achieved, s.params_before, s.params_after
    );
    for (l, dims) in out.pruned.config.layers.iter().enumerate() {
        println!("layer {l}: d_ff {} kv_heads {} heads {}", dims.d_ff, dims.kv_heads, dims.heads);
    }
    let ppl = |w: &Weights| eval_ppl(w, &corpus, Split::Eval, 128, Some(16)).map(|r| r.perplexity);
    println!("eval ppl dense {:.3}, pruned {:.3}", ppl(&w)?, ppl(&out.pruned)?);
    let mut pruned = out.pruned;
    let cfg = TrainConfig { steps: 30, log_every: 0, seed: 1, ..TrainConfig::default() };
    let ft = finetune(&mut pruned, &corpus, &cfg, Some(16))?;
    println!("after 30 recovery steps {:.3}", ft.ppl_after);
    Ok(())
}
