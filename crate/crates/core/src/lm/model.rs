use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::numerics::{Bound, ParamSet, Scalar, Segment, Tape, Tensor, Var};

use super::tokenizer::VOCAB_SIZE;

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            seed: 42,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < VOCAB_SIZE {
            return Err(GagError::Config(format!(
                "vocab_size {} is smaller than the byte vocabulary ({VOCAB_SIZE})",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len < 2 {
            return Err(GagError::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(GagError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Model input: token ids, or rows already in embedding space.
#[derive(Debug, Clone, Copy)]
pub enum LmInput<'a, F: Scalar> {
    Tokens(&'a [u32]),
    Embeddings(&'a Tensor<F>),
}

/// Hidden states for the requested layers plus logits at every position.
/// Layer 0 is the input to the first block (token plus position embedding);
/// layer `l` is the residual stream after block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<F: Scalar> {
    pub layers: BTreeMap<usize, Tensor<F>>,
    pub logits: Tensor<F>,
}

impl<F: Scalar> HiddenTrace<F> {
    pub fn layer(&self, l: usize) -> Option<&Tensor<F>> {
        self.layers.get(&l)
    }

    pub fn last_logits(&self) -> &[F] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Tape handles produced by [`ToyLm::tape_forward`].
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub logits: Var,
    pub hidden: BTreeMap<usize, Var>,
}

/// Decoder-only causal transformer with pre-norm blocks, RMS normalization,
/// learned absolute positions and a GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm<F: Scalar = f32> {
    config: LmConfig,
    params: ParamSet<F>,
}

fn block_key(layer: usize, name: &str) -> String {
    format!("blocks.{layer}.{name}")
}

impl<F: Scalar> ToyLm<F> {
    /// Seeded initialization: N(0, 0.02) weights, residual output projections
    /// scaled by `1/sqrt(2L)`, unit norm gains, zero biases.
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = ParamSet::new();
        let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
        let mut normal = |shape: Vec<usize>, s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| F::c(dist.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("init shape")
        };
        params.insert("tok_emb", normal(vec![v, d], std));
        params.insert("pos_emb", normal(vec![config.max_seq_len, d], std));
        for l in 0..config.n_layers {
            params.insert(block_key(l, "attn_norm"), Tensor::full(vec![d], F::one()));
            params.insert(block_key(l, "wq"), normal(vec![d, d], std));
            params.insert(block_key(l, "wk"), normal(vec![d, d], std));
            params.insert(block_key(l, "wv"), normal(vec![d, d], std));
            params.insert(block_key(l, "wo"), normal(vec![d, d], resid_std));
            params.insert(block_key(l, "mlp_norm"), Tensor::full(vec![d], F::one()));
            params.insert(block_key(l, "w_up"), normal(vec![d, ff], std));
            params.insert(block_key(l, "b_up"), Tensor::zeros(vec![ff]));
            params.insert(block_key(l, "w_down"), normal(vec![ff, d], resid_std));
            params.insert(block_key(l, "b_down"), Tensor::zeros(vec![d]));
        }
        params.insert("final_norm", Tensor::full(vec![d], F::one()));
        params.insert("lm_head", normal(vec![d, v], std));
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every expected name and shape.
    pub fn from_params(config: LmConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let reference = ToyLm::<F>::new(LmConfig {
            seed: 0,
            ..config.clone()
        })?;
        if reference.params.len() != params.len() {
            return Err(GagError::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(GagError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.params.unfreeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn cast<G: Scalar>(&self) -> ToyLm<G> {
        ToyLm {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Copy of the model keeping only the first `layers` blocks.
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.config.n_layers {
            return Err(GagError::Config(format!(
                "cannot truncate {} layers to {layers}",
                self.config.n_layers
            )));
        }
        let mut params = ParamSet::new();
        for (name, t) in self.params.iter() {
            let keep = match name.strip_prefix("blocks.") {
                Some(rest) => rest
                    .split('.')
                    .next()
                    .and_then(|l| l.parse::<usize>().ok())
                    .is_some_and(|l| l < layers),
                None => true,
            };
            if keep {
                params.insert(name.clone(), t.clone());
            }
        }
        if self.params.is_frozen() {
            params.freeze();
        }
        Ok(Self {
            config: LmConfig {
                n_layers: layers,
                ..self.config.clone()
            },
            params,
        })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(GagError::TokenRange {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Pure token-embedding rows (no positional component).
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor<F>> {
        self.check_ids(ids)?;
        let table = self.params.get("tok_emb")?;
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(table.row(id as usize));
        }
        Tensor::new(vec![ids.len(), d], out)
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Embedding lookup recorded on the tape.
    pub fn tape_embed(&self, tape: &mut Tape<F>, bound: &Bound, ids: &[u32]) -> Result<Var> {
        self.check_ids(ids)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.gather(bound.var("tok_emb"), &idx)
    }

    /// Runs the stack over packed sequences whose input embeddings are the
    /// rows of `x`. Positions restart at zero in every segment.
    pub fn tape_forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        segments: &[Segment],
        capture: &[usize],
    ) -> Result<TapeTrace> {
        let (rows, cols) = {
            let t = tape.value(x);
            (t.rows(), t.cols())
        };
        if cols != self.config.d_model {
            return Err(GagError::Dimension(format!(
                "input width {cols}, model width {}",
                self.config.d_model
            )));
        }
        if let Some(&l) = capture.iter().find(|&&l| l > self.config.n_layers) {
            return Err(GagError::Config(format!(
                "layer {l} outside 0..={}",
                self.config.n_layers
            )));
        }
        for seg in segments {
            if seg.len > self.config.max_seq_len {
                return Err(GagError::Length {
                    len: seg.len,
                    max: self.config.max_seq_len,
                });
            }
            if seg.len == 0 {
                return Err(GagError::Input("empty sequence".into()));
            }
        }
        if segments.iter().map(|s| s.len).sum::<usize>() != rows {
            return Err(GagError::Dimension("segments do not cover the input".into()));
        }
        let positions: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        let pos = tape.gather(bound.var("pos_emb"), &positions)?;
        let mut h = tape.add(x, pos)?;
        let mut hidden = BTreeMap::new();
        if capture.contains(&0) {
            hidden.insert(0, h);
        }
        let heads = self.config.n_heads;
        for l in 0..self.config.n_layers {
            let v = |name: &str| bound.var(&block_key(l, name));
            let n = tape.rms_norm(h, v("attn_norm"))?;
            let q = tape.matmul(n, v("wq"))?;
            let k = tape.matmul(n, v("wk"))?;
            let val = tape.matmul(n, v("wv"))?;
            let a = tape.causal_attention(q, k, val, heads, segments)?;
            let a = tape.matmul(a, v("wo"))?;
            h = tape.add(h, a)?;
            let n = tape.rms_norm(h, v("mlp_norm"))?;
            let up = tape.matmul(n, v("w_up"))?;
            let up = tape.add_bias(up, v("b_up"))?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, v("w_down"))?;
            let down = tape.add_bias(down, v("b_down"))?;
            h = tape.add(h, down)?;
            if capture.contains(&(l + 1)) {
                hidden.insert(l + 1, h);
            }
        }
        let n = tape.rms_norm(h, bound.var("final_norm"))?;
        let logits = tape.matmul(n, bound.var("lm_head"))?;
        Ok(TapeTrace { logits, hidden })
    }

    /// Inference forward pass for one sequence.
    pub fn forward(&self, input: LmInput<'_, F>, capture: &[usize]) -> Result<HiddenTrace<F>> {
        let embeddings = match input {
            LmInput::Tokens(ids) => self.embed(ids)?,
            LmInput::Embeddings(e) => e.clone(),
        };
        let len = embeddings.rows();
        if len == 0 {
            return Err(GagError::Input("empty input".into()));
        }
        if len > self.config.max_seq_len {
            return Err(GagError::Length {
                len,
                max: self.config.max_seq_len,
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(embeddings);
        let trace = self.tape_forward(&mut tape, &bound, x, &[Segment { start: 0, len }], capture)?;
        Ok(HiddenTrace {
            layers: trace.hidden.iter().map(|(&l, &v)| (l, tape.value(v).clone())).collect(),
            logits: tape.value(trace.logits).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::{tokenize, BOS, PAD};

    fn tiny() -> ToyLm<f32> {
        ToyLm::new(LmConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 24,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn embedding_input_matches_token_input_bit_exactly() {
        let m = tiny();
        let ids = tokenize("hello there");
        let a = m.forward(LmInput::Tokens(&ids), &[0, 1, 2, 3]).unwrap();
        let e = m.embed(&ids).unwrap();
        let b = m.forward(LmInput::Embeddings(&e), &[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_bos_shapes() {
        let m = tiny();
        let t = m.forward(LmInput::Tokens(&[BOS]), &[0]).unwrap();
        assert_eq!(t.logits.shape(), &[1, VOCAB_SIZE]);
        assert_eq!(t.layer(0).unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn layer_zero_is_token_plus_position() {
        let m = tiny();
        let ids = tokenize("ab");
        let t = m.forward(LmInput::Tokens(&ids), &[0]).unwrap();
        let tok = m.embed(&ids).unwrap();
        let pos = m.params().get("pos_emb").unwrap();
        for r in 0..2 {
            for c in 0..16 {
                assert_eq!(t.layer(0).unwrap().row(r)[c], tok.row(r)[c] + pos.row(r)[c]);
            }
        }
    }

    #[test]
    fn embed_is_a_table_lookup() {
        let m = tiny();
        let e = m.embed(&[PAD, 7, 7]).unwrap();
        assert_eq!(e.shape(), &[3, 16]);
        assert_eq!(e.row(0), m.params().get("tok_emb").unwrap().row(PAD as usize));
        assert_eq!(e.row(1), e.row(2));
    }

    #[test]
    fn causal_positions_ignore_the_future() {
        let m = tiny();
        let mut ids = tokenize("abcdefgh");
        let a = m.forward(LmInput::Tokens(&ids), &[]).unwrap();
        ids[5] = tokenize("z")[0];
        ids[7] = BOS;
        let b = m.forward(LmInput::Tokens(&ids), &[]).unwrap();
        for t in 0..5 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(5), b.logits.row(5));
    }

    #[test]
    fn captured_layers_match_truncated_stacks() {
        let m = tiny();
        let ids = tokenize("capture");
        let full = m.forward(LmInput::Tokens(&ids), &[0, 1, 2, 3]).unwrap();
        for l in 1..=3 {
            let t = m.truncated(l).unwrap();
            let tr = t.forward(LmInput::Tokens(&ids), &[l]).unwrap();
            assert_eq!(full.layer(l), tr.layer(l));
        }
    }

    #[test]
    fn over_length_input_is_rejected() {
        let m = tiny();
        let ids = vec![5u32; 25];
        assert!(matches!(
            m.forward(LmInput::Tokens(&ids), &[]),
            Err(GagError::Length { len: 25, max: 24 })
        ));
    }

    #[test]
    fn config_requires_divisible_heads() {
        let c = LmConfig {
            d_model: 10,
            n_heads: 3,
            ..Default::default()
        };
        assert!(ToyLm::<f32>::new(c).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = tiny();
        let other = LmConfig {
            d_model: 8,
            ..m.config().clone()
        };
        assert!(ToyLm::from_params(other, m.params().clone()).is_err());
        assert!(ToyLm::from_params(m.config().clone(), m.params().clone()).is_ok());
    }
}
