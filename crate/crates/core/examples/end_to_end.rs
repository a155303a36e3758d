//! Full pipeline on the tiny config and evaluation under every routing mode.
//! Pass `default` to run the default configuration instead.

use gag::config::RunConfig;
use gag::pipeline::{run_pipeline, Variant};
use gag::system::RoutingMode;

fn main() -> anyhow::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("default") => RunConfig::default(),
        Some(path) => RunConfig::load(std::path::Path::new(path))?,
        None => RunConfig::tiny(),
    };
    let run = run_pipeline(&cfg, Variant::Full)?;
    for audit in &run.audits {
        println!("{:<10} unchanged: {}", audit.name, audit.before == audit.after);
    }
    for mode in [RoutingMode::None, RoutingMode::Oracle, RoutingMode::Ppr] {
        let r = run.evaluate(mode, cfg.eval.regression_epsilon)?;
        println!(
            "{mode:<6} em {:?} routing {:?} general delta {:+.2}",
            r.em,
            r.routing.as_ref().map(|s| s.micro),
            r.regression_delta
        );
    }
    Ok(())
}
