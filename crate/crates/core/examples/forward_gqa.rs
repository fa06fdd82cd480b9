//! Runs a grouped-query model forward and shows causality: changing a late
//! token leaves earlier logits untouched.
//!
//! `cargo run --release --example forward_gqa`

use ntk_prune::data::tokenize;
use ntk_prune::model::{forward_logits, output_f_of, ModelConfig, Weights};

fn main() -> ntk_prune::Result<()> {
    let config = ModelConfig::toy();
    let w = Weights::init(&config, 0)?;
    let l = &config.layers[0];
    println!(
        "toy model: d={} d_ff={} heads={} kv_heads={} layers={} params={}",
        config.d_model,
        l.d_ff,
        l.heads,
        l.kv_heads,
        config.n_layers(),
        w.param_counts().total
    );
    let a = tokenize(b"the quick brown fox");
    let mut b = a.clone();
    *b.last_mut().unwrap() = b'X' as u32;
    let (la, lb) = (forward_logits(&w, &a)?, forward_logits(&w, &b)?);
    println!("logits shape {:?}", la.shape());
    let prefix = (a.len() - 1) * config.vocab;
    let same = la.data()[..prefix] == lb.data()[..prefix];
    println!("earlier positions unchanged after editing the last token: {same}");
    println!("f (mean next-token log-likelihood) at init: {:.4}", output_f_of(&w, &[a])?);
    Ok(())
}
