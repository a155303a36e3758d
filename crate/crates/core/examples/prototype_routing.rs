//! Build one prototype bank per route with the frozen encoder, route a few
//! queries, then detach and re-attach a bank without touching the others.

use std::sync::Arc;

use gag::config::RunConfig;
use gag::pipeline::{build_banks, generate_corpus, init_encoder};
use gag::router::{embed_query, BankRegistry};

fn main() -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.domains = 3;
    cfg.data.train_per_fact = 3;
    let corpus = generate_corpus(&cfg)?;
    let encoder = init_encoder(&cfg)?;
    let banks = build_banks(&cfg, &encoder, &corpus)?;
    let mut registry = Arc::new(BankRegistry::new(encoder.content_hash()));
    for b in banks.iter().cloned() {
        registry = Arc::new(registry.attach(b)?);
    }
    let mut correct = 0;
    for q in &corpus.pool {
        let d = registry.route(&embed_query(&encoder, &q.question)?)?;
        correct += usize::from(Some(d.route) == q.gold_route);
    }
    println!(
        "micro routing accuracy {:.2}% over {}",
        100.0 * correct as f64 / corpus.pool.len() as f64,
        corpus.pool.len()
    );

    let q = &corpus.route(2).expect("route 2").test[0].question;
    let before = registry.route(&embed_query(&encoder, q)?)?;
    let detached = registry.detach(2)?;
    let after = detached.route(&embed_query(&encoder, q)?)?;
    println!(
        "{q:?}: route {} with bank 2, route {} without",
        before.route, after.route
    );
    let again = detached.attach(banks[2].clone())?;
    println!("re-attached, routes: {:?}", again.route_ids());
    Ok(())
}
