//! Save a model as a GAG1 checkpoint, load it back and compare hashes; a
//! projector file offered as an expert is rejected.

use gag::checkpoint::{self, CheckpointKind};
use gag::lm::{LmConfig, ToyLm};
use gag::pipeline::{load_base, save_base};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("base.gag");
    let mut m = ToyLm::<f32>::new(LmConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..LmConfig::default()
    })?;
    m.freeze();
    let hash = save_base(&path, &m, 7)?;
    let back = load_base(&path)?;
    println!("saved {hash}");
    println!("loaded {}", back.content_hash());
    println!("bytes on disk: {}", std::fs::metadata(&path)?.len());
    match checkpoint::load(&path, CheckpointKind::Expert) {
        Err(e) => println!("as expert: {e}"),
        Ok(_) => println!("as expert: unexpectedly accepted"),
    }
    Ok(())
}
