//! Base-model pretraining on the general corpus.
//!
//! Besides plain general question answering, a share of every batch are
//! slot-reading drills: the answer prompt's knowledge slot holds one
//! continuous vector that spells a random syllable code, and the target is
//! that code. The vectors come from a codebook trained alongside the base and
//! discarded afterwards; private answers are never used as drill codes.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QaRecord;
use crate::error::{GagError, Result};
use crate::lm::tokenizer::{tokenize, EOS};
use crate::lm::ToyLm;
use crate::numerics::{AdamW, AdamWConfig, ParamSet, Schedule, Segment, Tape, Tensor};
use crate::template::AnswerTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Share of each batch given to slot-reading drills.
    pub drill_fraction: f64,
    pub drill_min_syllables: usize,
    pub drill_max_syllables: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                schedule: Schedule::Cosine,
                warmup_ratio: 0.05,
                ..AdamWConfig::default()
            },
            drill_fraction: 0.5,
            drill_min_syllables: 2,
            drill_max_syllables: 4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss over consecutive windows of 100 steps.
    pub window_losses: Vec<f64>,
    pub steps: usize,
}

struct Drill<'a> {
    syllables: &'a [String],
    reserved: &'a BTreeSet<String>,
    general: &'a [QaRecord],
}

impl Drill<'_> {
    fn question(&self, rng: &mut ChaCha8Rng) -> String {
        if rng.gen_bool(0.5) && !self.general.is_empty() {
            self.general[rng.gen_range(0..self.general.len())].question.clone()
        } else {
            let n = rng.gen_range(3..9);
            let words: Vec<String> = (0..n)
                .map(|_| {
                    let len = rng.gen_range(2..8);
                    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
                })
                .collect();
            format!("{}?", words.join(" "))
        }
    }

    /// Syllable indices of a random code that is not reserved.
    fn code(&self, rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<usize> {
        loop {
            let len = rng.gen_range(min..=max);
            let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.syllables.len())).collect();
            let text: String = idx.iter().map(|&i| self.syllables[i].as_str()).collect();
            if !self.reserved.contains(&text) {
                return idx;
            }
        }
    }
}

/// Trains `base` in place on `general` question/answer pairs and
/// slot-reading drills spelled with `syllables`.
pub fn pretrain_base(
    base: &mut ToyLm<f32>,
    general: &[QaRecord],
    template: &AnswerTemplate,
    syllables: &[String],
    reserved: &BTreeSet<String>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if base.is_frozen() {
        return Err(GagError::Frozen("cannot pretrain a frozen base".into()));
    }
    if general.is_empty() || syllables.is_empty() {
        return Err(GagError::Input("pretraining needs general data and syllables".into()));
    }
    if cfg.batch_size == 0 || cfg.drill_min_syllables == 0 || cfg.drill_min_syllables > cfg.drill_max_syllables {
        return Err(GagError::Config("invalid pretraining batch or drill lengths".into()));
    }
    if !(0.0..=1.0).contains(&cfg.drill_fraction) {
        return Err(GagError::Config("drill_fraction must be in [0, 1]".into()));
    }
    let d = base.d_model();
    let stride = syllables.len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codebook = ParamSet::<f32>::new();
    let init = (0..(cfg.drill_max_syllables + 1) * stride * d)
        .map(|_| rng.gen_range(-0.02f32..0.02))
        .collect();
    codebook.insert(
        "codebook",
        Tensor::new(vec![(cfg.drill_max_syllables + 1) * stride, d], init)?,
    );

    let mut opt = AdamW::new(cfg.optimizer.clone(), cfg.steps)?;
    let mut opt_cb = AdamW::new(cfg.optimizer.clone(), cfg.steps)?;
    let drill = Drill {
        syllables,
        reserved,
        general,
    };
    let mut report = PretrainReport {
        window_losses: Vec::new(),
        steps: 0,
    };
    let mut window = Vec::new();
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bb = base.bind(&mut tape, true);
        let bc = codebook.bind(&mut tape, true);
        let mut parts = Vec::new();
        let mut segments = Vec::new();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        let mut start = 0;
        for _ in 0..cfg.batch_size {
            let (prefix_len, seq) = if rng.gen_bool(cfg.drill_fraction) {
                let code = drill.code(&mut rng, cfg.drill_min_syllables, cfg.drill_max_syllables);
                let prompt = template.with_slot(&drill.question(&mut rng))?;
                let mut seq = prompt.ids.clone();
                for &c in &code {
                    seq.extend(tokenize(&syllables[c]));
                }
                seq.push(EOS);
                let mut rows: Vec<usize> = code.iter().enumerate().map(|(i, &c)| i * stride + c).collect();
                rows.push(code.len() * stride + syllables.len());
                let picked = tape.gather(bc.var("codebook"), &rows)?;
                let ones = tape.constant(Tensor::full(vec![1, rows.len()], 1.0));
                let slot = tape.matmul(ones, picked)?;
                if prompt.anchor > 0 {
                    parts.push(base.tape_embed(&mut tape, &bb, &seq[..prompt.anchor])?);
                }
                parts.push(slot);
                parts.push(base.tape_embed(&mut tape, &bb, &seq[prompt.anchor + 1..seq.len() - 1])?);
                (prompt.len(), seq)
            } else {
                let r = &general[rng.gen_range(0..general.len())];
                let mut seq = template.without_slot(&r.question);
                let n = seq.len();
                seq.extend(tokenize(&r.answer));
                seq.push(EOS);
                parts.push(base.tape_embed(&mut tape, &bb, &seq[..seq.len() - 1])?);
                (n, seq)
            };
            let n = seq.len() - 1;
            for t in 0..n {
                targets.push(seq[t + 1] as usize);
                mask.push(t + 1 >= prefix_len);
            }
            segments.push(Segment { start, len: n });
            start += n;
        }
        let x = tape.concat_rows(&parts)?;
        let trace = base.tape_forward(&mut tape, &bb, x, &segments, &[])?;
        let loss = tape.cross_entropy(trace.logits, &targets, &mask)?;
        window.push(tape.value(loss).item() as f64);
        let grads = tape.backward(loss)?;
        let gb: BTreeMap<String, Tensor<f32>> = bb.grads(&tape, &grads);
        let gc = bc.grads(&tape, &grads);
        opt.step(base.params_mut(), &gb)?;
        opt_cb.step(&mut codebook, &gc)?;
        if window.len() == 100 || step + 1 == cfg.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            tracing::debug!(step, loss = mean, "pretraining");
            report.window_losses.push(mean);
            window.clear();
        }
    }
    report.steps = cfg.steps;
    tracing::info!(
        steps = cfg.steps,
        last = report.window_losses.last().copied(),
        "base pretrained"
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    #[test]
    fn short_run_lowers_loss_and_respects_freezing() {
        let mut m = ToyLm::new(LmConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
            ..Default::default()
        })
        .unwrap();
        let general = vec![QaRecord {
            id: "g".into(),
            route: 0,
            question: "What is x?".into(),
            answer: "y".into(),
            gold_route: None,
        }];
        let t = AnswerTemplate::new("Knowledge: {knowledge}\nQuestion: {query}\nAnswer: ").unwrap();
        let syl: Vec<String> = ["ka", "ri"].iter().map(|s| s.to_string()).collect();
        let cfg = PretrainConfig {
            steps: 200,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let r = pretrain_base(&mut m, &general, &t, &syl, &BTreeSet::new(), &cfg).unwrap();
        assert_eq!(r.window_losses.len(), 2);
        assert!(r.window_losses[1] < r.window_losses[0]);
        m.freeze();
        assert!(pretrain_base(&mut m, &general, &t, &syl, &BTreeSet::new(), &cfg).is_err());
    }

    #[test]
    fn drill_codes_avoid_reserved_answers() {
        let syl: Vec<String> = ["ka", "ri"].iter().map(|s| s.to_string()).collect();
        let reserved: BTreeSet<String> = ["kaka", "kari", "rika"].iter().map(|s| s.to_string()).collect();
        let d = Drill {
            syllables: &syl,
            reserved: &reserved,
            general: &[],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let c = d.code(&mut rng, 2, 2);
            assert_eq!(c, vec![1, 1]);
        }
    }
}
