//! Per-domain experts: Stage I adaptation, background synthesis and the
//! single-vector late-layer readout.

use serde::{Deserialize, Serialize};

use crate::data::QaRecord;
use crate::error::{GagError, Result};
use crate::lm::tokenizer::tokenize;
use crate::lm::{train_lm, DecodingConfig, LmInput, TokenSeq, ToyLm, TrainConfig, TrainExample, TrainReport};
use crate::template::QueryTemplate;

/// Which sequence the readout forward pass sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutSource {
    /// The filled background template followed by the background.
    #[default]
    FullSequence,
    /// `BOS` followed by the background alone.
    BackgroundOnly,
}

/// `max(1, layers - 4)`, never above `layers`.
pub fn default_readout_layer(layers: usize) -> usize {
    layers.saturating_sub(4).max(1).min(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReadout {
    pub vector: Vec<f32>,
    pub source_layer: usize,
    pub background_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainExpert {
    pub id: u32,
    pub model: ToyLm<f32>,
    pub background_template: QueryTemplate,
    readout_layer: usize,
    pub readout_source: ReadoutSource,
    adapted: bool,
    allow_unadapted: bool,
}

impl DomainExpert {
    pub fn new(id: u32, model: ToyLm<f32>, background_template: QueryTemplate) -> Self {
        let layer = default_readout_layer(model.n_layers());
        Self {
            id,
            model,
            background_template,
            readout_layer: layer,
            readout_source: ReadoutSource::default(),
            adapted: false,
            allow_unadapted: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.model.d_model()
    }

    pub fn readout_layer(&self) -> usize {
        self.readout_layer
    }

    pub fn set_readout_layer(&mut self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.model.n_layers() {
            return Err(GagError::Config(format!(
                "readout layer {layer} outside 1..={}",
                self.model.n_layers()
            )));
        }
        self.readout_layer = layer;
        Ok(())
    }

    pub fn is_adapted(&self) -> bool {
        self.adapted
    }

    /// Marks the expert as adapted without training (used when loading a
    /// checkpoint that was adapted earlier).
    pub fn set_adapted(&mut self, adapted: bool) {
        self.adapted = adapted;
    }

    /// Lets an unadapted expert synthesize backgrounds (no-Stage-I ablation).
    pub fn allow_unadapted(&mut self) {
        self.allow_unadapted = true;
    }

    pub fn freeze(&mut self) {
        self.model.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.model.is_frozen()
    }

    pub fn stage1_example(&self, question: &str, answer: &str) -> TrainExample {
        TrainExample {
            prompt: self.background_template.fill_ids(question),
            answer: tokenize(answer),
        }
    }

    /// Background generation for `x`: at least one token, even if the model
    /// would stop immediately.
    pub fn synthesize_background(&self, x: &str, cfg: &DecodingConfig) -> Result<TokenSeq> {
        if !self.adapted && !self.allow_unadapted {
            return Err(GagError::Config(format!(
                "expert {} has not completed adaptation",
                self.id
            )));
        }
        let prompt = self.background_template.fill_ids(x);
        let cfg = DecodingConfig {
            min_new_tokens: cfg.min_new_tokens.max(1),
            max_new_tokens: cfg.max_new_tokens.max(1),
            ..cfg.clone()
        };
        let b = self.model.decode(LmInput::Tokens(&prompt), &cfg)?;
        if b.is_empty() {
            return Err(GagError::Length {
                len: prompt.len() + 1,
                max: self.model.config().max_seq_len,
            });
        }
        Ok(b)
    }

    /// Ids of the readout forward pass for `(x, b)`.
    pub fn readout_ids(&self, x: &str, b: &TokenSeq) -> Vec<u32> {
        let mut ids = match self.readout_source {
            ReadoutSource::FullSequence => self.background_template.fill_ids(x),
            ReadoutSource::BackgroundOnly => vec![crate::lm::tokenizer::BOS],
        };
        ids.extend_from_slice(b.ids());
        ids
    }

    /// Hidden state at the readout layer, final background position.
    pub fn readout(&self, x: &str, b: &TokenSeq) -> Result<ExpertReadout> {
        if b.is_empty() {
            return Err(GagError::Input("empty background".into()));
        }
        let ids = self.readout_ids(x, b);
        let trace = self.model.forward(LmInput::Tokens(&ids), &[self.readout_layer])?;
        let states = trace
            .layer(self.readout_layer)
            .ok_or_else(|| GagError::Config("readout layer not captured".into()))?;
        let vector = states.row(ids.len() - 1).to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(GagError::Numeric("non-finite expert readout".into()));
        }
        Ok(ExpertReadout {
            vector,
            source_layer: self.readout_layer,
            background_len: b.len(),
        })
    }

    /// Background followed by readout.
    pub fn read(&self, x: &str, cfg: &DecodingConfig) -> Result<ExpertReadout> {
        let b = self.synthesize_background(x, cfg)?;
        self.readout(x, &b)
    }
}

/// Trains the expert on question/answer pairs of its own domain, with the
/// loss on answer tokens only.
pub fn adapt_stage1(expert: &mut DomainExpert, corpus: &[QaRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    if expert.is_frozen() {
        return Err(GagError::Frozen(format!("expert {} is frozen", expert.id)));
    }
    if let Some(r) = corpus.iter().find(|r| r.route != expert.id) {
        return Err(GagError::Data(format!(
            "record {} belongs to route {}, not {}",
            r.id, r.route, expert.id
        )));
    }
    let examples: Vec<TrainExample> = corpus
        .iter()
        .map(|r| expert.stage1_example(&r.question, &r.answer))
        .collect();
    let report = train_lm(&mut expert.model, &examples, cfg)?;
    expert.adapted = true;
    tracing::info!(
        expert = expert.id,
        loss = report.final_loss(),
        steps = report.steps,
        "stage I complete"
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub score: f64,
}

/// Evaluates `routine` once per readout layer on a copy of `expert`.
pub fn readout_sweep(
    expert: &DomainExpert,
    layers: &[usize],
    mut routine: impl FnMut(&DomainExpert) -> Result<f64>,
) -> Result<Vec<SweepRow>> {
    layers
        .iter()
        .map(|&layer| {
            let mut e = expert.clone();
            e.set_readout_layer(layer)?;
            let score = routine(&e)?;
            tracing::info!(layer, score, "readout sweep row");
            Ok(SweepRow { layer, score })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn expert(layers: usize) -> DomainExpert {
        let m = ToyLm::new(LmConfig {
            n_layers: layers,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let mut e = DomainExpert::new(1, m, QueryTemplate::new("Q: {query}\nB: ").unwrap());
        e.set_adapted(true);
        e
    }

    #[test]
    fn default_layer_clamps() {
        assert_eq!(default_readout_layer(2), 1);
        assert_eq!(default_readout_layer(6), 2);
        assert_eq!(default_readout_layer(24), 20);
        assert_eq!(default_readout_layer(1), 1);
    }

    #[test]
    fn unadapted_expert_refuses_backgrounds() {
        let mut e = expert(2);
        e.set_adapted(false);
        assert!(e.synthesize_background("x", &DecodingConfig::greedy(4)).is_err());
        e.allow_unadapted();
        assert!(e.synthesize_background("x", &DecodingConfig::greedy(4)).is_ok());
    }

    #[test]
    fn background_is_never_empty() {
        let e = expert(2);
        let b = e.synthesize_background("x", &DecodingConfig::greedy(0)).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn single_token_background_reads_that_position() {
        let e = expert(2);
        let b = e.synthesize_background("abc", &DecodingConfig::greedy(1)).unwrap();
        let r = e.readout("abc", &b).unwrap();
        let mut ids = e.background_template.fill_ids("abc");
        ids.push(b.ids()[0]);
        let trace = e.model.forward(LmInput::Tokens(&ids), &[1]).unwrap();
        assert_eq!(r.vector, trace.layer(1).unwrap().row(ids.len() - 1));
        assert_eq!(r.background_len, 1);
    }

    #[test]
    fn readout_matches_recomputation_at_every_layer() {
        let mut e = expert(3);
        let b = e.synthesize_background("q", &DecodingConfig::greedy(5)).unwrap();
        let ids = e.readout_ids("q", &b);
        let trace = e.model.forward(LmInput::Tokens(&ids), &[1, 2, 3]).unwrap();
        for l in 1..=3 {
            e.set_readout_layer(l).unwrap();
            let r = e.readout("q", &b).unwrap();
            assert_eq!(r.vector, trace.layer(l).unwrap().row(ids.len() - 1));
            assert_eq!(r.vector.len(), 16);
        }
        assert!(e.set_readout_layer(0).is_err());
        assert!(e.set_readout_layer(4).is_err());
    }

    #[test]
    fn background_only_source_drops_the_template() {
        let mut e = expert(2);
        e.readout_source = ReadoutSource::BackgroundOnly;
        let b = TokenSeq(tokenize("zz"));
        let mut want = vec![crate::lm::tokenizer::BOS];
        want.extend(tokenize("zz"));
        assert_eq!(e.readout_ids("anything", &b), want);
    }

    #[test]
    fn sampled_backgrounds_repeat_under_a_seed() {
        let e = expert(2);
        let cfg = DecodingConfig {
            mode: crate::lm::DecodeMode::Sample,
            seed: 11,
            ..DecodingConfig::greedy(6)
        };
        assert_eq!(
            e.synthesize_background("x", &cfg).unwrap(),
            e.synthesize_background("x", &cfg).unwrap()
        );
    }

    #[test]
    fn sweep_has_one_row_per_layer() {
        let e = expert(3);
        let rows = readout_sweep(&e, &[1, 2, 3], |x| Ok(x.readout_layer() as f64)).unwrap();
        assert_eq!(rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(rows[2].score, 3.0);
        assert!(readout_sweep(&e, &[7], |_| Ok(0.0)).is_err());
    }
}
