//! Measures the kernel-trace gap after pruning and the bound it must obey.
//!
//! `cargo run --release --example ntk_bound`

use ntk_prune::data::{sample_batch, synthetic, Corpus, Split, SplitRatios};
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::prune::{ntk_check, Mode};
use ntk_prune::saliency::ntk_diag;
use ntk_prune::train::{train, TrainConfig};

fn main() -> ntk_prune::Result<()> {
    let corpus = Corpus::from_bytes("synthetic", &synthetic::generate(0, 400), SplitRatios::default())?;
    let mut w = Weights::init(&ModelConfig::toy(), 0)?;
    train(&mut w, &corpus, &TrainConfig { steps: 30, log_every: 0, ..TrainConfig::default() })?;
    let batch = sample_batch(&corpus, Split::CalibPool, 0, 8, 128)?;
    println!("Theta of the dense model: {:.4}", ntk_diag(&w, &batch)?);
    println!("{:>5} {:>12} {:>12} {:>12} {:>6}", "v", "theta after", "gap", "bound", "holds");
    for v in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let (_, r) = ntk_check(&w, &batch, v, 1.0, Mode::Ntk)?;
        println!("{v:>5} {:>12.4} {:>12.4} {:>12.4e} {:>6}", r.theta_after, r.theta_gap, r.bound, r.holds);
    }
    Ok(())
}
