//! Saves a shrunk model with provenance and loads it back bit-exactly.
//!
//! `cargo run --release --example checkpoint_roundtrip`

use ntk_prune::allocator::PruneSpec;
use ntk_prune::checkpoint::Checkpoint;
use ntk_prune::model::{ModelConfig, Weights};
use ntk_prune::prune::shrink_model;

fn main() -> ntk_prune::Result<()> {
    let config = ModelConfig::toy();
    let w = Weights::init(&config, 3)?;
    let mut spec = PruneSpec::keep_all(&config);
    spec.layers[1].kept_mlp.truncate(128);
    spec.layers[1].target_mlp = 128;
    spec.layers[2].kept_kv.truncate(2);
    let shrunk = shrink_model(&w, &spec)?;
    let dir = std::env::temp_dir().join("ntk-prune-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("shrunk.nrvk");
    Checkpoint::new(shrunk.clone()).with("source", "example").save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    println!("layer dims {:?}", back.weights.config.layers);
    println!("provenance {:?}", back.provenance);
    println!("bit-exact: {}", back.weights == shrunk);
    Ok(())
}
