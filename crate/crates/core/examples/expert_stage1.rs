//! Stage I: adapt a small expert to one private route, then inspect its
//! background and readout for a test question.

use gag::config::RunConfig;
use gag::pipeline::{generate_corpus, train_expert};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::tiny();
    let corpus = generate_corpus(&cfg)?;
    let route = corpus.route(1).expect("route 1");
    let (expert, report) = train_expert(&cfg, route, true)?;
    println!("stage I epoch losses: {:?}", report.map(|r| r.epoch_losses));
    let q = &route.test[0];
    let b = expert.synthesize_background(&q.question, &cfg.stage2.background)?;
    let k = expert.readout(&q.question, &b)?;
    println!("question   {:?}", q.question);
    println!("background {:?} (gold {:?})", b.to_text()?, q.answer);
    println!("readout    layer {} width {}", k.source_layer, k.vector.len());
    Ok(())
}
