//! Stage II on a tiny setup, then one injected answer. The prompt with the
//! knowledge slot is as long as the prompt without knowledge plus one token.

use gag::config::RunConfig;
use gag::injection::{build_injected_embeddings, injected_decode, project};
use gag::pipeline::{generate_corpus, train_base, train_expert, train_projector};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::tiny();
    let corpus = generate_corpus(&cfg)?;
    let (base, _) = train_base(&cfg, &corpus)?;
    let route = corpus.route(1).expect("route 1");
    let (expert, _) = train_expert(&cfg, route, true)?;
    let before = base.content_hash();
    let (projector, report) = train_projector(&cfg, &base, &expert, route)?;
    println!(
        "stage II loss {:.3} -> {:?}",
        report.initial_loss,
        report.epoch_losses.last()
    );
    println!("base unchanged: {}", before == base.content_hash());

    let q = &route.test[0].question;
    let k = expert.read(q, &cfg.stage2.background)?;
    let z = project(&projector, &k)?;
    let e = build_injected_embeddings(&base, &cfg.templates.answer, q, Some(&z.vector))?;
    let plain = cfg.templates.answer.without_slot(q).len();
    println!("prompt rows {} vs {} without knowledge", e.shape()[0], plain);
    println!(
        "answer {:?}",
        injected_decode(&base, &e, &cfg.answer_decoding)?.to_text()?
    );
    Ok(())
}
