//! Picks the calibration batch whose pruned model stays closest (in KL) to
//! the dense model.
//!
//! `cargo run --release --example calibration_select`

use ntk_prune::allocator::{allocate, Ranking};
use ntk_prune::calib::{select_calibration, SelectionSetup};
use ntk_prune::data::{sample_batch, synthetic, Corpus, Split, SplitRatios};
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::prune::{trial_prune, Mode};
use ntk_prune::train::{train, TrainConfig};

fn main() -> ntk_prune::Result<()> {
    let corpus = Corpus::from_bytes("synthetic", &synthetic::generate(0, 400), SplitRatios::default())?;
    let mut w = Weights::init(&ModelConfig::toy(), 0)?;
    train(&mut w, &corpus, &TrainConfig { steps: 30, log_every: 0, ..TrainConfig::default() })?;
    let plan = allocate(0.5, 1.0, w.param_counts())?;
    let eval = sample_batch(&corpus, Split::Eval, 99, 4, 128)?;
    let setup = SelectionSetup { seeds: (0..6).collect(), n: 8, seq_len: 128 };
    let report = select_calibration(&w, &corpus, &setup, &eval, None, |b| {
        trial_prune(&w, b, &plan, Mode::Ntk, Ranking::Global)
    })?;
    for c in &report.candidates {
        let mark = if c.seed == report.chosen_seed { "  <- chosen" } else { "" };
        println!("seed {:>2}  KL {:.6}{mark}", c.seed, c.kl);
    }
    Ok(())
}
