//! Full system versus no Stage I and no Stage II, oracle routing.

use gag::config::RunConfig;
use gag::pipeline::{generate_corpus, run_ablation, train_base};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::tiny();
    let corpus = generate_corpus(&cfg)?;
    let (base, _) = train_base(&cfg, &corpus)?;
    let report = run_ablation(&cfg, &corpus, &base)?;
    for row in &report.rows {
        println!(
            "{:<10} {:>6.1} (full minus this: {:+.1})",
            row.variant.name(),
            row.private_em,
            row.delta_from_full
        );
    }
    Ok(())
}
