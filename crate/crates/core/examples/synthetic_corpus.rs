//! Generate the synthetic general and private routes and print a sample.

use gag::config::RunConfig;
use gag::pipeline::generate_corpus;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::default();
    let corpus = generate_corpus(&cfg)?;
    for r in &corpus.routes {
        println!(
            "route {} {:<10} train {:>5} test {:>4}",
            r.route,
            r.name,
            r.train.len(),
            r.test.len()
        );
        for q in r.train.iter().take(2) {
            println!("    {:?} -> {:?}", q.question, q.answer);
        }
    }
    println!("pool {}", corpus.pool.len());
    if let Some(dir) = std::env::args().nth(1) {
        for p in corpus.write(std::path::Path::new(&dir))? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
