//! Trains the toy model on the synthetic corpus and reports perplexity.
//!
//! `cargo run --release --example train_toy -- [steps]`

use std::time::Instant;

use ntk_prune::data::{synthetic, Corpus, Split, SplitRatios};
use ntk_prune::eval::eval_ppl;
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::train::{train, TrainConfig};

fn main() -> ntk_prune::Result<()> {
    let steps = std::env::args().nth(1).map_or(200, |s| s.parse().expect("steps"));
    let text = synthetic::generate(0, 2000);
    let corpus = Corpus::from_bytes("synthetic", &text, SplitRatios::default())?;
    println!("corpus: {} tokens", corpus.tokens.len());
    let mut w = Weights::init(&ModelConfig::toy(), 0)?;
    let cfg = TrainConfig { steps, log_every: 0, ..TrainConfig::default() };
    let start = Instant::now();
    let report = train(&mut w, &corpus, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{steps} steps in {secs:.1}s ({:.3}s/step), loss {:.3} -> {:.3}",
        secs / steps.max(1) as f64,
        report.first_loss().unwrap_or(f64::NAN),
        report.last_loss().unwrap_or(f64::NAN)
    );
    let ppl = eval_ppl(&w, &corpus, Split::Eval, 128, Some(32))?;
    println!("eval perplexity {:.2} over {} tokens", ppl.perplexity, ppl.tokens);
    Ok(())
}
