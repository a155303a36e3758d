//! Projector, anchor-slot substitution, injected decoding and Stage II
//! projector-only training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QaRecord;
use crate::error::{GagError, Result};
use crate::expert::{DomainExpert, ExpertReadout};
use crate::lm::tokenizer::{tokenize, EOS};
use crate::lm::{DecodeMode, DecodingConfig, LmInput, TokenSeq, ToyLm};
use crate::numerics::{AdamW, AdamWConfig, Bound, ParamSet, Scalar, Schedule, Segment, Tape, Tensor, Var};
use crate::template::{AnswerPrompt, AnswerTemplate};

/// Two-layer GELU MLP mapping expert readouts into the base embedding space.
///
/// Weights are stored input-major: `w1` is `d2 × hidden`, `w2` is
/// `hidden × d1`, so `z = gelu(k̃·w1 + b1)·w2 + b2` where
/// `k̃ = (k - shift) ⊙ scale` is a fixed per-dimension standardization of the
/// readout (identity until fitted).
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<F: Scalar = f32> {
    pub domain: u32,
    params: ParamSet<F>,
    input_shift: Vec<F>,
    input_scale: Vec<F>,
}

const SHIFT: &str = "input_shift";
const SCALE: &str = "input_scale";

impl<F: Scalar> Projector<F> {
    /// Kaiming-uniform first layer, zero second layer: a fresh projector
    /// emits `z = 0` for every input.
    pub fn new(domain: u32, d2: usize, d1: usize, hidden: Option<usize>, seed: u64) -> Self {
        let h = hidden.unwrap_or(d1.max(d2));
        let bound = (6.0 / d2 as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = (0..d2 * h).map(|_| F::c(rng.gen_range(-bound..bound))).collect();
        let mut params = ParamSet::new();
        params.insert("w1", Tensor::new(vec![d2, h], w1).expect("sized"));
        params.insert("b1", Tensor::zeros(vec![h]));
        params.insert("w2", Tensor::zeros(vec![h, d1]));
        params.insert("b2", Tensor::zeros(vec![d1]));
        Self {
            domain,
            params,
            input_shift: vec![F::zero(); d2],
            input_scale: vec![F::one(); d2],
        }
    }

    /// Accepts the four MLP tensors, optionally with the stored
    /// standardization tensors of a checkpoint.
    pub fn from_params(domain: u32, mut params: ParamSet<F>) -> Result<Self> {
        let shift = params.remove(SHIFT).map(Tensor::into_vec);
        let scale = params.remove(SCALE).map(Tensor::into_vec);
        let w1 = params.get("w1")?.shape().to_vec();
        let w2 = params.get("w2")?.shape().to_vec();
        let (b1, b2) = (params.get("b1")?.len(), params.get("b2")?.len());
        if w1.len() != 2 || w2.len() != 2 || w1[1] != w2[0] || b1 != w1[1] || b2 != w2[1] {
            return Err(GagError::Dimension(format!(
                "inconsistent projector shapes w1 {w1:?} w2 {w2:?}"
            )));
        }
        let input_shift = shift.unwrap_or_else(|| vec![F::zero(); w1[0]]);
        let input_scale = scale.unwrap_or_else(|| vec![F::one(); w1[0]]);
        if input_shift.len() != w1[0] || input_scale.len() != w1[0] {
            return Err(GagError::Dimension("standardization width differs from w1".into()));
        }
        Ok(Self {
            domain,
            params,
            input_shift,
            input_scale,
        })
    }

    /// Fits the input standardization to per-dimension mean and standard
    /// deviation of `readouts`.
    pub fn fit_standardization(&mut self, readouts: &[Vec<F>]) -> Result<()> {
        let d = self.d_in();
        if readouts.is_empty() || readouts.iter().any(|k| k.len() != d) {
            return Err(GagError::Dimension(format!(
                "standardization needs readouts of width {d}"
            )));
        }
        let n = readouts.len() as f64;
        for j in 0..d {
            let mean = readouts.iter().map(|k| k[j].to_f64().unwrap_or(0.0)).sum::<f64>() / n;
            let var = readouts
                .iter()
                .map(|k| (k[j].to_f64().unwrap_or(0.0) - mean).powi(2))
                .sum::<f64>()
                / n;
            self.input_shift[j] = F::c(mean);
            self.input_scale[j] = F::c(1.0 / var.sqrt().max(1e-6));
        }
        Ok(())
    }

    pub fn standardization(&self) -> (&[F], &[F]) {
        (&self.input_shift, &self.input_scale)
    }

    /// MLP tensors plus the standardization, as stored in checkpoints.
    pub fn checkpoint_params(&self) -> ParamSet<F> {
        let mut p = self.params.clone();
        p.insert(SHIFT, Tensor::vector(self.input_shift.clone()));
        p.insert(SCALE, Tensor::vector(self.input_scale.clone()));
        p
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn d_in(&self) -> usize {
        self.params.get("w1").expect("w1").shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.params.get("w1").expect("w1").shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.params.get("w2").expect("w2").shape()[1]
    }

    pub fn content_hash(&self) -> String {
        self.checkpoint_params().content_hash()
    }

    pub fn cast<G: Scalar>(&self) -> Projector<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::c(x.to_f64().unwrap_or(0.0))).collect();
        Projector {
            domain: self.domain,
            params: self.params.cast(),
            input_shift: conv(&self.input_shift),
            input_scale: conv(&self.input_scale),
        }
    }

    fn standardize(&self, k: &[F]) -> Vec<F> {
        k.iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((&x, &m), &s)| (x - m) * s)
            .collect()
    }

    /// Forward pass on the tape for a single readout row `k` (`1 × d2`).
    pub fn tape_project(&self, tape: &mut Tape<F>, bound: &Bound, k: Var) -> Result<Var> {
        let d = self.d_in();
        let neg: Vec<F> = self.input_shift.iter().map(|&m| -m).collect();
        let shift = tape.constant(Tensor::new(vec![1, d], neg)?);
        let scale = tape.constant(Tensor::new(vec![1, d], self.input_scale.clone())?);
        let k = tape.add(k, shift)?;
        let k = tape.mul(k, scale)?;
        let h = tape.matmul(k, bound.var("w1"))?;
        let h = tape.add_bias(h, bound.var("b1"))?;
        let h = tape.gelu(h);
        let z = tape.matmul(h, bound.var("w2"))?;
        tape.add_bias(z, bound.var("b2"))
    }

    pub fn project_values(&self, k: &[F]) -> Result<Vec<F>> {
        if k.len() != self.d_in() {
            return Err(GagError::Config(format!(
                "readout has width {}, projector expects {}",
                k.len(),
                self.d_in()
            )));
        }
        let x = Tensor::new(vec![1, k.len()], self.standardize(k))?;
        let mut h = x.matmul(self.params.get("w1")?)?;
        for (v, b) in h.data_mut().iter_mut().zip(self.params.get("b1")?.data()) {
            *v += *b;
        }
        let h = crate::numerics::gelu(&h);
        let mut z = h.matmul(self.params.get("w2")?)?;
        for (v, b) in z.data_mut().iter_mut().zip(self.params.get("b2")?.data()) {
            *v += *b;
        }
        Ok(z.into_vec())
    }
}

/// The projected knowledge vector for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedToken {
    pub vector: Vec<f32>,
    pub domain: u32,
}

pub fn project(projector: &Projector<f32>, k: &ExpertReadout) -> Result<InjectedToken> {
    let vector = projector.project_values(&k.vector)?;
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(GagError::Numeric("non-finite injected token".into()));
    }
    Ok(InjectedToken {
        vector,
        domain: projector.domain,
    })
}

/// Input embeddings of the answer prompt for `x`. With `Some(z)` the anchor
/// row is replaced by `z`; with `None` the knowledge line is left out.
pub fn build_injected_embeddings<F: Scalar>(
    base: &ToyLm<F>,
    template: &AnswerTemplate,
    x: &str,
    z: Option<&[F]>,
) -> Result<Tensor<F>> {
    match z {
        None => base.embed(&template.without_slot(x)),
        Some(z) => {
            let prompt = template.with_slot(x)?;
            substitute(base, &prompt, z)
        }
    }
}

/// Embeds `prompt` and overwrites its anchor row with `z`.
pub fn substitute<F: Scalar>(base: &ToyLm<F>, prompt: &AnswerPrompt, z: &[F]) -> Result<Tensor<F>> {
    let d = base.d_model();
    if z.len() != d {
        return Err(GagError::Dimension(format!(
            "injected token has width {}, base expects {d}",
            z.len()
        )));
    }
    let mut e = base.embed(&prompt.ids)?;
    e.data_mut()[prompt.anchor * d..(prompt.anchor + 1) * d].copy_from_slice(z);
    Ok(e)
}

/// Decodes from an embedding-level prefix with a frozen base.
pub fn injected_decode<F: Scalar>(base: &ToyLm<F>, embeddings: &Tensor<F>, cfg: &DecodingConfig) -> Result<TokenSeq> {
    if !base.is_frozen() {
        return Err(GagError::Frozen("injected decoding needs a frozen base".into()));
    }
    base.decode(LmInput::Embeddings(embeddings), cfg)
}

/// Negative log-likelihood of `answer` (plus EOS) after the injected prompt,
/// recorded on `tape` with gradients flowing only into the projector.
pub fn stage2_loss<F: Scalar>(
    tape: &mut Tape<F>,
    base: &ToyLm<F>,
    base_bound: &Bound,
    projector: &Projector<F>,
    proj_bound: &Bound,
    items: &[(&[F], &AnswerPrompt, &[u32])],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(items.len() * 3);
    let mut segments = Vec::with_capacity(items.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    let mut start = 0;
    for &(k, prompt, answer) in items {
        let kv = tape.constant(Tensor::new(vec![1, k.len()], k.to_vec())?);
        let z = projector.tape_project(tape, proj_bound, kv)?;
        let mut seq = prompt.ids.clone();
        seq.extend_from_slice(answer);
        seq.push(EOS);
        let n = seq.len() - 1;
        if prompt.anchor > 0 {
            parts.push(base.tape_embed(tape, base_bound, &seq[..prompt.anchor])?);
        }
        parts.push(z);
        if prompt.anchor + 1 < n {
            parts.push(base.tape_embed(tape, base_bound, &seq[prompt.anchor + 1..n])?);
        }
        for t in 0..n {
            targets.push(seq[t + 1] as usize);
            mask.push(t + 1 >= prompt.len());
        }
        segments.push(Segment { start, len: n });
        start += n;
    }
    let x = tape.concat_rows(&parts)?;
    let trace = base.tape_forward(tape, base_bound, x, &segments, &[])?;
    tape.cross_entropy(trace.logits, &targets, &mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decoding used for expert backgrounds during training.
    pub background: DecodingConfig,
    /// Reuse one background per example across epochs even when sampling.
    #[serde(default)]
    pub cache_backgrounds: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 6e-3,
                weight_decay: 0.0,
                schedule: Schedule::Linear,
                warmup_ratio: 0.03,
                ..AdamWConfig::default()
            },
            epochs: 5,
            batch_size: 8,
            seed: 980_406,
            background: DecodingConfig::greedy(16),
            cache_backgrounds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub initial_loss: f64,
}

fn background_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Trains only `projector` so the frozen base answers correctly from the
/// injected token. Base and expert must already be frozen.
pub fn train_stage2(
    base: &ToyLm<f32>,
    expert: &DomainExpert,
    projector: &mut Projector<f32>,
    template: &AnswerTemplate,
    corpus: &[QaRecord],
    cfg: &Stage2Config,
) -> Result<Stage2Report> {
    if !base.is_frozen() {
        return Err(GagError::Frozen("base parameters must be frozen for stage II".into()));
    }
    if !expert.is_frozen() {
        return Err(GagError::Frozen(format!(
            "expert {} must be frozen for stage II",
            expert.id
        )));
    }
    if projector.params().is_frozen() {
        return Err(GagError::Frozen("projector is frozen".into()));
    }
    if projector.d_in() != expert.d_model() || projector.d_out() != base.d_model() {
        return Err(GagError::Config(format!(
            "projector maps {}→{}, need {}→{}",
            projector.d_in(),
            projector.d_out(),
            expert.d_model(),
            base.d_model()
        )));
    }
    if corpus.is_empty() {
        return Err(GagError::Input("empty stage II corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(GagError::Config("batch_size must be positive".into()));
    }
    let prompts = corpus
        .iter()
        .map(|r| template.with_slot(&r.question))
        .collect::<Result<Vec<_>>>()?;
    let answers: Vec<Vec<u32>> = corpus.iter().map(|r| tokenize(&r.answer)).collect();
    let reuse = cfg.cache_backgrounds || cfg.background.mode == DecodeMode::Greedy;
    let read_all = |epoch: usize| -> Result<Vec<Vec<f32>>> {
        corpus
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let dc = DecodingConfig {
                    seed: background_seed(cfg.background.seed, epoch, i),
                    ..cfg.background.clone()
                };
                expert.read(&r.question, &dc).map(|k| k.vector)
            })
            .collect()
    };
    let mut readouts = read_all(0)?;
    projector.fit_standardization(&readouts)?;

    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::<f32>::new(cfg.optimizer.clone(), per_epoch * cfg.epochs)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let batch_loss = |proj: &Projector<f32>, idx: &[usize], ks: &[Vec<f32>], train: bool| {
        let mut tape = Tape::new();
        let bb = base.bind(&mut tape, false);
        let pb = proj.params().bind(&mut tape, train);
        let items: Vec<(&[f32], &AnswerPrompt, &[u32])> = idx
            .iter()
            .map(|&i| (ks[i].as_slice(), &prompts[i], answers[i].as_slice()))
            .collect();
        let loss = stage2_loss(&mut tape, base, &bb, proj, &pb, &items)?;
        Ok::<_, GagError>((tape, pb, loss))
    };
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut initial_sum = 0.0;
    let mut initial_tokens = 0usize;
    for chunk in all.chunks(cfg.batch_size) {
        let (tape, _, loss) = batch_loss(projector, chunk, &readouts, false)?;
        let tokens: usize = chunk.iter().map(|&i| answers[i].len() + 1).sum();
        initial_sum += tape.value(loss).item() as f64 * tokens as f64;
        initial_tokens += tokens;
    }
    let initial_loss = initial_sum / initial_tokens as f64;
    let mut report = Stage2Report {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
        initial_loss,
    };
    for epoch in 0..cfg.epochs {
        if epoch > 0 && !reuse {
            readouts = read_all(epoch)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (tape, pb, loss) = batch_loss(projector, chunk, &readouts, true)?;
            total += tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            let named: BTreeMap<String, Tensor<f32>> = pb.grads(&tape, &grads);
            opt.step(projector.params_mut(), &named)?;
        }
        let mean = total / per_epoch as f64;
        tracing::debug!(domain = projector.domain, epoch, loss = mean, "stage II epoch");
        report.epoch_losses.push(mean);
    }
    report.steps = opt.steps_taken();
    tracing::info!(
        domain = projector.domain,
        initial = initial_loss,
        last = report.epoch_losses.last().copied(),
        "stage II complete"
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::ANCHOR;
    use crate::lm::LmConfig;
    use crate::numerics::gelu;

    fn base() -> ToyLm<f32> {
        let mut m = ToyLm::new(LmConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        m.freeze();
        m
    }

    fn template() -> AnswerTemplate {
        AnswerTemplate::new("Knowledge: {knowledge}\nQuestion: {query}\nAnswer: ").unwrap()
    }

    #[test]
    fn fresh_projector_outputs_zero() {
        let p = Projector::<f32>::new(1, 12, 16, None, 3);
        assert_eq!(p.d_hidden(), 16);
        let z = p.project_values(&[0.7; 12]).unwrap();
        assert_eq!(z, vec![0.0; 16]);
        assert!(p.project_values(&[0.0; 5]).is_err());
    }

    #[test]
    fn hand_sized_projection() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w1", Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap());
        ps.insert("b1", Tensor::vector(vec![0.1, -0.2]));
        ps.insert("w2", Tensor::from_rows(&[vec![1.0, 0.0], vec![-2.0, 3.0]]).unwrap());
        ps.insert("b2", Tensor::vector(vec![0.0, 1.0]));
        let p = Projector::from_params(1, ps).unwrap();
        let k = [0.3, -0.4];
        let erf_gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let h0 = erf_gelu(0.3 * 1.0 + -0.4 * 0.5 + 0.1);
        let h1 = erf_gelu(0.3 * -1.0 + -0.4 * 2.0 - 0.2);
        let want = [h0 - 2.0 * h1, 3.0 * h1 + 1.0];
        let got = p.project_values(&k).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let t = gelu(&Tensor::<f64>::vector(vec![1.0]));
        assert!((t.data()[0] - erf_gelu(1.0)).abs() < 1e-15);
    }

    #[test]
    fn substitution_touches_only_the_anchor_row() {
        let m = base();
        let t = template();
        let prompt = t.with_slot("who?").unwrap();
        let raw = m.embed(&prompt.ids).unwrap();
        let anchor_row = m.params().get("tok_emb").unwrap().row(ANCHOR as usize).to_vec();
        let same = build_injected_embeddings(&m, &t, "who?", Some(&anchor_row)).unwrap();
        assert_eq!(same, raw);
        let z = vec![0.5f32; 16];
        let e = build_injected_embeddings(&m, &t, "who?", Some(&z)).unwrap();
        let differing: Vec<usize> = (0..raw.rows()).filter(|&r| raw.row(r) != e.row(r)).collect();
        assert_eq!(differing, vec![prompt.anchor]);
    }

    #[test]
    fn null_route_drops_one_line_and_the_anchor() {
        let m = base();
        let t = template();
        let e = build_injected_embeddings(&m, &t, "who?", None).unwrap();
        let with = t.with_slot("who?").unwrap();
        assert_eq!(e.rows(), with.len() - "Knowledge: \n".len() - 1);
        let anchor_row = m.params().get("tok_emb").unwrap().row(ANCHOR as usize);
        assert!((0..e.rows()).all(|r| e.row(r) != anchor_row));
    }

    #[test]
    fn anchor_embedding_decodes_like_the_raw_template() {
        let m = base();
        let t = template();
        let prompt = t.with_slot("q").unwrap();
        let anchor_row = m.params().get("tok_emb").unwrap().row(ANCHOR as usize).to_vec();
        let e = build_injected_embeddings(&m, &t, "q", Some(&anchor_row)).unwrap();
        let cfg = DecodingConfig::greedy(6);
        assert_eq!(
            injected_decode(&m, &e, &cfg).unwrap(),
            m.decode(LmInput::Tokens(&prompt.ids), &cfg).unwrap()
        );
        let mut unfrozen = m.clone();
        unfrozen.unfreeze();
        assert!(injected_decode(&unfrozen, &e, &cfg).is_err());
    }

    #[test]
    fn stage2_loss_matches_eval_on_substituted_prompt() {
        let m = base();
        let t = template();
        let mut p = Projector::<f32>::new(1, 8, 16, None, 1);
        p.params_mut().get_mut("w2").unwrap().data_mut()[3] = 0.4;
        let k = vec![0.2f32; 8];
        let prompt = t.with_slot("q").unwrap();
        let answer = tokenize("ab");
        let mut tape = Tape::new();
        let bb = m.bind(&mut tape, false);
        let pb = p.params().bind(&mut tape, true);
        let loss = stage2_loss(&mut tape, &m, &bb, &p, &pb, &[(&k, &prompt, &answer)]).unwrap();

        let z = p.project_values(&k).unwrap();
        let mut ids = prompt.ids.clone();
        ids.extend(&answer);
        let mut e = m.embed(&ids).unwrap();
        e.data_mut()[prompt.anchor * 16..(prompt.anchor + 1) * 16].copy_from_slice(&z);
        let logits = m.forward(LmInput::Embeddings(&e), &[]).unwrap().logits;
        let targets: Vec<usize> = ids[1..].iter().chain([&EOS]).map(|&i| i as usize).collect();
        let mask: Vec<bool> = (0..ids.len()).map(|t| t + 1 >= prompt.len()).collect();
        let want = crate::numerics::nll_loss(&logits, &targets, &mask).unwrap();
        assert!((tape.value(loss).item() - want).abs() < 1e-5);
    }
}
