use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::numerics::{accumulate_grads, AdamW, AdamWConfig, Scalar, Segment, Tape, Tensor};

use super::model::ToyLm;
use super::tokenizer::EOS;

/// One supervised sequence: `prompt` (already including BOS) followed by
/// `answer`; an EOS is appended during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Which target positions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only answer tokens and the closing EOS.
    AnswerOnly,
    /// Every next-token prediction.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Micro-batch size; one optimizer step covers `grad_accum` of them.
    pub batch_size: usize,
    #[serde(default = "one")]
    pub grad_accum: usize,
    pub seed: u64,
    pub loss_mask: LossMask,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

pub(crate) struct PackedBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

pub(crate) fn pack(examples: &[&TrainExample], policy: LossMask) -> Result<PackedBatch> {
    let mut b = PackedBatch {
        inputs: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
        segments: Vec::new(),
    };
    for ex in examples {
        if ex.prompt.is_empty() {
            return Err(GagError::Input("empty prompt".into()));
        }
        let mut seq = ex.prompt.clone();
        seq.extend_from_slice(&ex.answer);
        seq.push(EOS);
        let start = b.inputs.len();
        let n = seq.len() - 1;
        b.inputs.extend_from_slice(&seq[..n]);
        for t in 0..n {
            b.targets.push(seq[t + 1] as usize);
            b.mask.push(match policy {
                LossMask::All => true,
                LossMask::AnswerOnly => t + 1 >= ex.prompt.len(),
            });
        }
        b.segments.push(Segment { start, len: n });
    }
    Ok(b)
}

impl<F: Scalar> ToyLm<F> {
    /// Mean next-token loss of `examples` under `policy`, without updating.
    pub fn eval_loss(&self, examples: &[TrainExample], policy: LossMask) -> Result<f64> {
        let refs: Vec<&TrainExample> = examples.iter().collect();
        let batch = pack(&refs, policy)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.tape_embed(&mut tape, &bound, &batch.inputs)?;
        let trace = self.tape_forward(&mut tape, &bound, x, &batch.segments, &[])?;
        let loss = tape.cross_entropy(trace.logits, &batch.targets, &batch.mask)?;
        Ok(tape.value(loss).item().to_f64().unwrap_or(f64::NAN))
    }
}

/// Minimizes next-token loss over `examples` with AdamW. Question positions
/// are excluded from the loss under [`LossMask::AnswerOnly`].
pub fn train_lm<F: Scalar>(model: &mut ToyLm<F>, examples: &[TrainExample], cfg: &TrainConfig) -> Result<TrainReport> {
    if model.is_frozen() {
        return Err(GagError::Frozen("cannot train a frozen model".into()));
    }
    if examples.is_empty() {
        return Err(GagError::Input("empty training corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.grad_accum == 0 {
        return Err(GagError::Config("batch_size and grad_accum must be positive".into()));
    }
    let micro_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum);
    let mut opt = AdamW::<F>::new(cfg.optimizer.clone(), per_epoch * cfg.epochs)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let micro: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micro.chunks(cfg.grad_accum) {
            let mut acc: Option<BTreeMap<String, Tensor<F>>> = None;
            for chunk in group {
                let refs: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let batch = pack(&refs, cfg.loss_mask)?;
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let x = model.tape_embed(&mut tape, &bound, &batch.inputs)?;
                let trace = model.tape_forward(&mut tape, &bound, x, &batch.segments, &[])?;
                let loss = tape.cross_entropy(trace.logits, &batch.targets, &batch.mask)?;
                let loss = tape.scale(loss, F::c(1.0 / group.len() as f64));
                total += tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
                let grads = tape.backward(loss)?;
                let named: BTreeMap<String, Tensor<F>> = bound.grads(&tape, &grads);
                match acc.as_mut() {
                    None => acc = Some(named),
                    Some(a) => accumulate_grads(a, named),
                }
            }
            opt.step(model.params_mut(), &acc.expect("non-empty group"))?;
        }
        let mean = total / per_epoch as f64;
        tracing::debug!(epoch, loss = mean, "epoch done");
        report.epoch_losses.push(mean);
    }
    report.steps = opt.steps_taken();
    Ok(report)
}
