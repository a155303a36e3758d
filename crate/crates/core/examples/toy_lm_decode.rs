//! Byte tokenizer, a tiny decoder-only model and a short fit on one string.

use gag::lm::tokenizer::{detokenize, tokenize};
use gag::lm::{train_lm, DecodingConfig, LmConfig, LmInput, LossMask, ToyLm, TrainConfig, TrainExample};
use gag::numerics::AdamWConfig;

fn main() -> anyhow::Result<()> {
    let ids = tokenize("Capital of Oz?");
    println!("tokens: {ids:?}");
    println!("round trip: {}", detokenize(&ids)?);

    let mut lm = ToyLm::<f32>::new(LmConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        ..LmConfig::default()
    })?;
    let prompt = tokenize("Q: Capital of Oz?\nA: ");
    let example = TrainExample {
        prompt: prompt.clone(),
        answer: tokenize("Emerald City"),
    };
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        epochs: 150,
        batch_size: 1,
        grad_accum: 1,
        seed: 0,
        loss_mask: LossMask::AnswerOnly,
    };
    let report = train_lm(&mut lm, &[example], &cfg)?;
    println!(
        "loss {:.3} -> {:.3}",
        report.epoch_losses[0],
        report.final_loss().unwrap_or(f64::NAN)
    );
    let out = lm.decode(LmInput::Tokens(&prompt), &DecodingConfig::greedy(16))?;
    println!("greedy: {:?}", out.to_text()?);
    Ok(())
}
