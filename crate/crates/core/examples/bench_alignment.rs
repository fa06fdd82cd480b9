//! Times forward passes of MLP widths that are and are not multiples of 8.
//!
//! `cargo run --release --example bench_alignment`

use ntk_prune::eval::bench;
use ntk_prune::model::{ModelConfig, Weights};

fn main() -> ntk_prune::Result<()> {
    println!("{:>6} {:>12} {:>14}", "d_ff", "latency ms", "tokens/s");
    for d_ff in [120, 125, 128, 131, 136] {
        let w = Weights::init(&ModelConfig::uniform(64, d_ff, 8, 4, 4, 128)?, 0)?;
        let r = bench(&w, 8, 128, 7, 0)?;
        println!("{d_ff:>6} {:>12.2} {:>14.0}", r.latency_s * 1e3, r.throughput_tok_s);
    }
    Ok(())
}
