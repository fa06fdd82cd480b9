//! Scores MLP units and KV groups of a briefly trained model by gradient
//! saliency and lists the least and most important.
//!
//! `cargo run --release --example saliency_scores`

use ntk_prune::data::{sample_batch, synthetic, Corpus, Split, SplitRatios};
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::saliency::{compute_saliency, group_scores, UnitKind};
use ntk_prune::train::{train, TrainConfig};

fn main() -> ntk_prune::Result<()> {
    let corpus = Corpus::from_bytes("synthetic", &synthetic::generate(0, 400), SplitRatios::default())?;
    let mut w = Weights::init(&ModelConfig::toy(), 0)?;
    train(&mut w, &corpus, &TrainConfig { steps: 30, log_every: 0, ..TrainConfig::default() })?;
    let batch = sample_batch(&corpus, Split::CalibPool, 0, 8, 128)?;
    let field = compute_saliency(&w, &batch)?;
    let mut units = group_scores(&field, &w.config)?;
    units.sort_by(|a, b| a.score.total_cmp(&b.score));
    for kind in [UnitKind::MlpUnit, UnitKind::KvGroup] {
        let of_kind: Vec<_> = units.iter().filter(|u| u.kind == kind).collect();
        let per_param = |u: &&ntk_prune::saliency::UnitScore| u.score / u.params as f64;
        println!("{kind:?}: {} units", of_kind.len());
        for u in of_kind.iter().take(3) {
            println!("  low   layer {} #{:<3} score {:.3e} ({:.2e}/param)", u.layer, u.index, u.score, per_param(u));
        }
        for u in of_kind.iter().rev().take(3) {
            println!("  high  layer {} #{:<3} score {:.3e} ({:.2e}/param)", u.layer, u.index, u.score, per_param(u));
        }
    }
    Ok(())
}
