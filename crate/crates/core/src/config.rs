//! Run configuration: every knob of an end-to-end run in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::expert::ReadoutSource;
use crate::injection::Stage2Config;
use crate::lm::{DecodingConfig, LmConfig, LossMask, TrainConfig};
use crate::numerics::{AdamWConfig, Schedule};
use crate::pretrain::PretrainConfig;
use crate::router::BankConfig;
use crate::synth::SynthConfig;
use crate::template::{AnswerTemplate, QueryTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub answer: AnswerTemplate,
    pub background: QueryTemplate,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            answer: AnswerTemplate::new("Knowledge: {knowledge}\nQuestion: {query}\nAnswer: ").expect("valid"),
            background: QueryTemplate::new("Q: {query}\nB: ").expect("valid"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    /// Defaults to `max(1, L2 - 4)`.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub source: ReadoutSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Allowed drop in general-set EM (points) relative to the base alone.
    pub regression_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            regression_epsilon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub base: LmConfig,
    pub pretrain: PretrainConfig,
    pub expert: LmConfig,
    /// Routing encoder; initialized from its seed and never trained.
    pub encoder: LmConfig,
    pub stage1: TrainConfig,
    /// Projector hidden width; defaults to `max(d1, d2)`.
    #[serde(default)]
    pub projector_hidden: Option<usize>,
    pub stage2: Stage2Config,
    /// Training questions per fact used for projector alignment.
    pub stage2_per_fact: usize,
    #[serde(default)]
    pub readout: ReadoutConfig,
    pub ppr: BankConfig,
    pub answer_decoding: DecodingConfig,
    pub templates: TemplateConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            base: LmConfig {
                seed: 42,
                ..LmConfig::default()
            },
            pretrain: PretrainConfig::default(),
            expert: LmConfig {
                seed: 43,
                ..LmConfig::default()
            },
            encoder: LmConfig {
                seed: 44,
                ..LmConfig::default()
            },
            stage1: TrainConfig {
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: 0.0,
                    schedule: Schedule::Cosine,
                    warmup_ratio: 0.1,
                },
                epochs: 8,
                batch_size: 8,
                grad_accum: 2,
                seed: 42,
                loss_mask: LossMask::AnswerOnly,
            },
            projector_hidden: Some(512),
            stage2: Stage2Config::default(),
            stage2_per_fact: 24,
            readout: ReadoutConfig {
                layer: None,
                source: ReadoutSource::BackgroundOnly,
            },
            ppr: BankConfig::default(),
            answer_decoding: DecodingConfig::greedy(16),
            templates: TemplateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.expert.validate()?;
        self.encoder.validate()?;
        self.pretrain.optimizer.validate()?;
        self.stage1.optimizer.validate()?;
        self.stage2.optimizer.validate()?;
        self.answer_decoding.validate()?;
        self.stage2.background.validate()?;
        self.data.specs()?;
        if let Some(l) = self.readout.layer {
            if l == 0 || l > self.expert.n_layers {
                return Err(GagError::Config(format!(
                    "readout layer {l} outside 1..={}",
                    self.expert.n_layers
                )));
            }
        }
        if self.stage2_per_fact == 0 {
            return Err(GagError::Config("stage2_per_fact must be positive".into()));
        }
        if self.projector_hidden == Some(0) {
            return Err(GagError::Config("projector_hidden must be positive".into()));
        }
        if self.ppr.prototypes == 0 || self.ppr.subsample == 0 {
            return Err(GagError::Config("ppr prototypes and subsample must be positive".into()));
        }
        if !(self.eval.regression_epsilon >= 0.0) {
            return Err(GagError::Config("regression_epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| GagError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GagError::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| GagError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A configuration small enough for quick smoke runs and tests.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.data.general_facts = 24;
        c.data.domain_facts = 24;
        c.data.train_per_fact = 3;
        c.base = LmConfig {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            ..c.base
        };
        c.expert = LmConfig {
            d_model: 24,
            n_heads: 2,
            d_ff: 48,
            ..c.expert
        };
        c.encoder = LmConfig {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            ..c.encoder
        };
        c.projector_hidden = Some(32);
        c.stage2_per_fact = 3;
        c.pretrain.steps = 60;
        c.pretrain.batch_size = 8;
        c.stage1.epochs = 2;
        c.stage2.epochs = 2;
        c.stage2.batch_size = 8;
        c.ppr.prototypes = 4;
        c.ppr.n_init = 2;
        c.answer_decoding.max_new_tokens = 8;
        c.stage2.background.max_new_tokens = 8;
        c
    }
}
