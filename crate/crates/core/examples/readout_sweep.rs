//! Readout-layer sweep with a deeper expert on the tiny setup.

use gag::config::RunConfig;
use gag::pipeline::{generate_corpus, sweep_readout, train_base};

fn main() -> anyhow::Result<()> {
    let mut cfg = RunConfig::tiny();
    cfg.expert.n_layers = 4;
    let corpus = generate_corpus(&cfg)?;
    let (base, _) = train_base(&cfg, &corpus)?;
    let rows = sweep_readout(&cfg, &base, &corpus, 1, &[1, 2, 3, 4])?;
    println!("layer,em");
    for r in rows {
        println!("{},{:.1}", r.layer, r.score);
    }
    Ok(())
}
