use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::numerics::{Scalar, Tensor};

use super::model::{LmInput, ToyLm};
use super::tokenizer::{TokenSeq, ANCHOR, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    /// EOS is suppressed until this many tokens have been produced.
    #[serde(default)]
    pub min_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 0.7,
            top_p: 0.8,
            top_k: 20,
            max_new_tokens: 16,
            min_new_tokens: 0,
            seed: 0,
        }
    }
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            return Err(GagError::Config("sampling needs temperature > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GagError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(GagError::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Picks the next token from one row of logits.
pub(crate) fn choose_token<F: Scalar>(
    logits: &[F],
    cfg: &DecodingConfig,
    allow_eos: bool,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let banned = |id: usize| {
        id == PAD as usize || id == BOS as usize || id == ANCHOR as usize || (!allow_eos && id == EOS as usize)
    };
    let scores: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| !banned(*i))
        .map(|(i, v)| (i, v.to_f64().unwrap_or(f64::NEG_INFINITY)))
        .collect();
    match cfg.mode {
        DecodeMode::Greedy => {
            let mut best = scores[0];
            for &s in &scores[1..] {
                if s.1 > best.1 {
                    best = s;
                }
            }
            best.0 as u32
        }
        DecodeMode::Sample => {
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<(usize, f64)> = scores
                .iter()
                .map(|&(i, v)| (i, ((v - max) / cfg.temperature).exp()))
                .collect();
            // stable sort keeps lower ids first among equal probabilities
            probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            probs.truncate(cfg.top_k.max(1));
            let total: f64 = probs.iter().map(|p| p.1).sum();
            let mut cum = 0.0;
            let mut keep = probs.len();
            for (n, p) in probs.iter().enumerate() {
                cum += p.1 / total;
                if cum >= cfg.top_p {
                    keep = n + 1;
                    break;
                }
            }
            probs.truncate(keep);
            let total: f64 = probs.iter().map(|p| p.1).sum();
            let mut u = rng.gen::<f64>() * total;
            for p in &probs {
                if u < p.1 {
                    return p.0 as u32;
                }
                u -= p.1;
            }
            probs[probs.len() - 1].0 as u32
        }
    }
}

impl<F: Scalar> ToyLm<F> {
    /// Autoregressive continuation of `prefix`. Stops at EOS (not included
    /// in the result), after `max_new_tokens`, or at `max_seq_len`.
    pub fn decode(&self, prefix: LmInput<'_, F>, cfg: &DecodingConfig) -> Result<TokenSeq> {
        cfg.validate()?;
        let mut rows = match prefix {
            LmInput::Tokens(ids) => self.embed(ids)?,
            LmInput::Embeddings(e) => e.clone(),
        };
        if rows.rows() == 0 {
            return Err(GagError::Input("decode needs a non-empty prefix".into()));
        }
        let table = self.params().get("tok_emb")?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut out = Vec::new();
        while out.len() < cfg.max_new_tokens && rows.rows() < self.config().max_seq_len {
            let trace = self.forward(LmInput::Embeddings(&rows), &[])?;
            let allow_eos = out.len() >= cfg.min_new_tokens;
            let next = choose_token(trace.last_logits(), cfg, allow_eos, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
            let mut data = rows.into_vec();
            data.extend_from_slice(table.row(next as usize));
            rows = Tensor::new(vec![data.len() / self.d_model(), self.d_model()], data)?;
        }
        Ok(TokenSeq(out))
    }
}
