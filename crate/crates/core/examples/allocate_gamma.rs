//! Measures the analytic allocation ratio and shows how it splits a global
//! budget between MLP and attention.
//!
//! `cargo run --release --example allocate_gamma`

use ntk_prune::allocator::{allocate, derive_gamma};
use ntk_prune::data::{sample_batch, synthetic, Corpus, Split, SplitRatios};
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::train::{train, TrainConfig};

fn main() -> ntk_prune::Result<()> {
    let corpus = Corpus::from_bytes("synthetic", &synthetic::generate(0, 400), SplitRatios::default())?;
    let mut w = Weights::init(&ModelConfig::toy(), 0)?;
    train(&mut w, &corpus, &TrainConfig { steps: 30, log_every: 0, ..TrainConfig::default() })?;
    let batch = sample_batch(&corpus, Split::CalibPool, 0, 8, 128)?;
    let g = derive_gamma(&w, &batch)?;
    println!(
        "sigma_v^2 {:.4e}  sigma_phi^2 {:.4e}  s {:.4}  influence ratio {:.4}  gamma {:.4}",
        g.sigma_v_sq, g.sigma_phi_sq, g.s, g.influence_ratio, g.gamma
    );
    let counts = w.param_counts();
    println!("{:>6} {:>6} {:>8} {:>8}", "v", "gamma", "v_mlp", "v_attn");
    for gamma in [0.5, 1.0, g.gamma, 2.0, 3.0] {
        match allocate(0.4, gamma, counts) {
            Ok(p) => println!("{:>6} {gamma:>6.3} {:>8.4} {:>8.4}", 0.4, p.v_mlp, p.v_attn),
            Err(e) => println!("{:>6} {gamma:>6.3} infeasible: {e}", 0.4),
        }
    }
    Ok(())
}
