//! End-to-end assembly: corpus, base pretraining, expert adaptation,
//! projector alignment, prototype banks and the routed system.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, CheckpointKind};
use crate::config::RunConfig;
use crate::data::QaRecord;
use crate::error::{GagError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::expert::{adapt_stage1, DomainExpert, ReadoutSource};
use crate::injection::{train_stage2, Projector, Stage2Report};
use crate::lm::{LmConfig, ToyLm, TrainReport};
use crate::pretrain::{pretrain_base, PretrainReport};
use crate::router::{build_bank, PrototypeBank};
use crate::synth::{gen_synthetic, RouteCorpus, SyntheticCorpus, CODE_SYLLABLES};
use crate::system::{GagSystem, RouteModule, RoutingMode};
use crate::template::QueryTemplate;

pub fn generate_corpus(cfg: &RunConfig) -> Result<SyntheticCorpus> {
    gen_synthetic(&cfg.data.specs()?, cfg.data.max_overlap)
}

/// Pretrains a fresh base on the general route and freezes it.
pub fn train_base(cfg: &RunConfig, corpus: &SyntheticCorpus) -> Result<(ToyLm<f32>, PretrainReport)> {
    let general = corpus
        .route(0)
        .ok_or_else(|| GagError::Data("corpus has no general route".into()))?;
    let mut base = ToyLm::new(cfg.base.clone())?;
    let syllables: Vec<String> = CODE_SYLLABLES.iter().map(|s| s.to_string()).collect();
    let report = pretrain_base(
        &mut base,
        &general.train,
        &cfg.templates.answer,
        &syllables,
        &corpus.private_answers(),
        &cfg.pretrain,
    )?;
    base.freeze();
    Ok((base, report))
}

/// The routing encoder: a seeded, untrained and frozen model.
pub fn init_encoder(cfg: &RunConfig) -> Result<ToyLm<f32>> {
    let mut e = ToyLm::new(cfg.encoder.clone())?;
    e.freeze();
    Ok(e)
}

fn expert_lm_config(cfg: &RunConfig, route: u32) -> LmConfig {
    LmConfig {
        seed: cfg.expert.seed.wrapping_add(route as u64),
        ..cfg.expert.clone()
    }
}

/// Fresh expert for `route` with the configured readout.
pub fn init_expert(cfg: &RunConfig, route: u32) -> Result<DomainExpert> {
    let model = ToyLm::new(expert_lm_config(cfg, route))?;
    let mut e = DomainExpert::new(route, model, cfg.templates.background.clone());
    if let Some(l) = cfg.readout.layer {
        e.set_readout_layer(l)?;
    }
    e.readout_source = cfg.readout.source;
    Ok(e)
}

/// Stage I on the route's training split, or a raw expert when `adapt` is
/// false. The returned expert is frozen.
pub fn train_expert(cfg: &RunConfig, route: &RouteCorpus, adapt: bool) -> Result<(DomainExpert, Option<TrainReport>)> {
    let mut e = init_expert(cfg, route.route)?;
    let report = if adapt {
        Some(adapt_stage1(&mut e, &route.train, &cfg.stage1)?)
    } else {
        e.allow_unadapted();
        None
    };
    e.freeze();
    Ok((e, report))
}

/// The first `per_fact` training questions of every fact, in corpus order.
pub fn stage2_subset(records: &[QaRecord], per_fact: usize) -> Vec<QaRecord> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    records
        .iter()
        .filter(|r| {
            let n = seen.entry(r.answer.as_str()).or_default();
            *n += 1;
            *n <= per_fact
        })
        .cloned()
        .collect()
}

pub fn init_projector(cfg: &RunConfig, base: &ToyLm<f32>, expert: &DomainExpert) -> Projector<f32> {
    Projector::new(
        expert.id,
        expert.d_model(),
        base.d_model(),
        cfg.projector_hidden,
        cfg.stage2.seed.wrapping_add(expert.id as u64),
    )
}

/// Stage II for one route. Fails if either frozen model changes.
pub fn train_projector(
    cfg: &RunConfig,
    base: &ToyLm<f32>,
    expert: &DomainExpert,
    route: &RouteCorpus,
) -> Result<(Projector<f32>, Stage2Report)> {
    let before = (base.content_hash(), expert.model.content_hash());
    let mut p = init_projector(cfg, base, expert);
    let corpus = stage2_subset(&route.train, cfg.stage2_per_fact);
    let report = train_stage2(base, expert, &mut p, &cfg.templates.answer, &corpus, &cfg.stage2)?;
    if (base.content_hash(), expert.model.content_hash()) != before {
        return Err(GagError::Frozen("a frozen model changed during stage II".into()));
    }
    Ok((p, report))
}

pub fn build_route_bank(cfg: &RunConfig, encoder: &ToyLm<f32>, route: &RouteCorpus) -> Result<PrototypeBank> {
    let queries: Vec<String> = route.train.iter().map(|r| r.question.clone()).collect();
    build_bank(route.route, &route.name, &queries, encoder, &cfg.ppr)
}

pub fn assemble(
    cfg: &RunConfig,
    base: ToyLm<f32>,
    encoder: ToyLm<f32>,
    modules: BTreeMap<u32, RouteModule>,
    route_names: BTreeMap<u32, String>,
    banks: Vec<PrototypeBank>,
) -> Result<GagSystem> {
    let system = GagSystem::new(
        base,
        encoder,
        modules,
        route_names,
        cfg.templates.clone(),
        cfg.answer_decoding.clone(),
        cfg.stage2.background.clone(),
    )?;
    for b in banks {
        system.attach_bank(b)?;
    }
    Ok(system)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoStage1,
    NoStage2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoStage1, Variant::NoStage2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoStage1 => "no_stage1",
            Self::NoStage2 => "no_stage2",
        }
    }
}

/// Content hashes of one frozen model around Stage II.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashAudit {
    pub name: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTraining {
    pub route: u32,
    pub stage1: Option<TrainReport>,
    pub stage2: Option<Stage2Report>,
}

#[derive(Debug)]
pub struct PipelineRun {
    pub corpus: SyntheticCorpus,
    pub system: GagSystem,
    pub banks: Vec<PrototypeBank>,
    pub pretrain: PretrainReport,
    pub training: Vec<RouteTraining>,
    pub audits: Vec<HashAudit>,
}

impl PipelineRun {
    /// Name → content hash of every model in the system.
    pub fn model_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("base".to_string(), self.system.base().content_hash());
        out.insert("encoder".to_string(), self.system.encoder().content_hash());
        for id in self.corpus.routes.iter().map(|r| r.route).filter(|&r| r != 0) {
            if let Some(m) = self.system.module(id) {
                out.insert(format!("expert_{id}"), m.expert.model.content_hash());
                out.insert(format!("projector_{id}"), m.projector.content_hash());
            }
        }
        out
    }

    pub fn evaluate(&self, mode: RoutingMode, regression_epsilon: f64) -> Result<EvalReport> {
        evaluate(&self.system, &self.corpus.pool, mode, regression_epsilon)
    }
}

/// Trains the per-route modules of `variant` on top of a given base.
pub fn build_modules(
    cfg: &RunConfig,
    base: &ToyLm<f32>,
    corpus: &SyntheticCorpus,
    variant: Variant,
) -> Result<(BTreeMap<u32, RouteModule>, Vec<RouteTraining>, Vec<HashAudit>)> {
    let mut modules = BTreeMap::new();
    let mut training = Vec::new();
    let mut audits = Vec::new();
    for route in corpus.routes.iter().filter(|r| r.route != 0) {
        let (expert, stage1) = train_expert(cfg, route, variant != Variant::NoStage1)?;
        let base_before = base.content_hash();
        let expert_before = expert.model.content_hash();
        let (projector, stage2) = if variant == Variant::NoStage2 {
            (init_projector(cfg, base, &expert), None)
        } else {
            let (p, r) = train_projector(cfg, base, &expert, route)?;
            (p, Some(r))
        };
        audits.push(HashAudit {
            name: "base".into(),
            before: base_before,
            after: base.content_hash(),
        });
        audits.push(HashAudit {
            name: format!("expert_{}", route.route),
            before: expert_before,
            after: expert.model.content_hash(),
        });
        training.push(RouteTraining {
            route: route.route,
            stage1,
            stage2,
        });
        modules.insert(
            route.route,
            RouteModule {
                name: route.name.clone(),
                expert,
                projector,
            },
        );
    }
    Ok((modules, training, audits))
}

/// Builds one bank per route, general included.
pub fn build_banks(cfg: &RunConfig, encoder: &ToyLm<f32>, corpus: &SyntheticCorpus) -> Result<Vec<PrototypeBank>> {
    corpus
        .routes
        .iter()
        .map(|r| build_route_bank(cfg, encoder, r))
        .collect()
}

/// Everything from a given base: modules, banks and the assembled system.
pub fn run_with_base(
    cfg: &RunConfig,
    corpus: SyntheticCorpus,
    base: ToyLm<f32>,
    pretrain: PretrainReport,
    variant: Variant,
) -> Result<PipelineRun> {
    let (modules, training, audits) = build_modules(cfg, &base, &corpus, variant)?;
    let encoder = init_encoder(cfg)?;
    let banks = build_banks(cfg, &encoder, &corpus)?;
    let names = corpus.routes.iter().map(|r| (r.route, r.name.clone())).collect();
    let system = assemble(cfg, base, encoder, modules, names, banks.clone())?;
    Ok(PipelineRun {
        corpus,
        system,
        banks,
        pretrain,
        training,
        audits,
    })
}

pub fn run_pipeline(cfg: &RunConfig, variant: Variant) -> Result<PipelineRun> {
    cfg.validate()?;
    let corpus = generate_corpus(cfg)?;
    let (base, pretrain) = train_base(cfg, &corpus)?;
    run_with_base(cfg, corpus, base, pretrain, variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub private_em: f64,
    /// `full` minus this variant.
    pub delta_from_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub reports: BTreeMap<String, EvalReport>,
}

impl AblationReport {
    pub fn em(&self, v: Variant) -> f64 {
        self.rows
            .iter()
            .find(|r| r.variant == v)
            .map(|r| r.private_em)
            .unwrap_or(f64::NAN)
    }
}

/// All three variants on one shared base, evaluated with oracle routing on
/// the private test questions.
pub fn run_ablation(cfg: &RunConfig, corpus: &SyntheticCorpus, base: &ToyLm<f32>) -> Result<AblationReport> {
    let (full, _, _) = build_modules(cfg, base, corpus, Variant::Full)?;
    ablation_from_full(cfg, corpus, base, &full)
}

/// Ablation reusing already trained full-variant modules: the no-Stage-II
/// variant keeps their experts with untrained projectors, the no-Stage-I
/// variant aligns projectors to raw experts.
pub fn ablation_from_full(
    cfg: &RunConfig,
    corpus: &SyntheticCorpus,
    base: &ToyLm<f32>,
    full: &BTreeMap<u32, RouteModule>,
) -> Result<AblationReport> {
    let private: Vec<QaRecord> = corpus
        .pool
        .iter()
        .filter(|r| r.gold_route != Some(0))
        .cloned()
        .collect();
    let names: BTreeMap<u32, String> = corpus.routes.iter().map(|r| (r.route, r.name.clone())).collect();
    let mut reports = BTreeMap::new();
    for v in Variant::ALL {
        let modules = match v {
            Variant::Full => full.clone(),
            Variant::NoStage2 => full
                .iter()
                .map(|(&id, m)| {
                    let projector = init_projector(cfg, base, &m.expert);
                    (id, RouteModule { projector, ..m.clone() })
                })
                .collect(),
            Variant::NoStage1 => build_modules(cfg, base, corpus, v)?.0,
        };
        let system = assemble(
            cfg,
            base.clone(),
            init_encoder(cfg)?,
            modules,
            names.clone(),
            Vec::new(),
        )?;
        let report = evaluate(&system, &private, RoutingMode::Oracle, cfg.eval.regression_epsilon)?;
        tracing::info!(variant = v.name(), em = report.em_of("private"), "ablation variant");
        reports.insert(v.name().to_string(), report);
    }
    let full_em = reports["full"].em_of("private");
    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let em = reports[v.name()].em_of("private");
            AblationRow {
                variant: v,
                private_em: em,
                delta_from_full: full_em - em,
            }
        })
        .collect();
    Ok(AblationReport { rows, reports })
}

/// Readout-layer sweep on one route: for each layer the projector is
/// retrained from scratch and scored with oracle routing on the route's test
/// questions.
pub fn sweep_readout(
    cfg: &RunConfig,
    base: &ToyLm<f32>,
    corpus: &SyntheticCorpus,
    route: u32,
    layers: &[usize],
) -> Result<Vec<crate::expert::SweepRow>> {
    let rc = corpus.route(route).ok_or_else(|| GagError::UnknownRoute(route))?;
    let (expert, _) = train_expert(cfg, rc, true)?;
    let test: Vec<QaRecord> = rc
        .test
        .iter()
        .map(|r| QaRecord {
            gold_route: Some(route),
            ..r.clone()
        })
        .collect();
    crate::expert::readout_sweep(&expert, layers, |e| {
        let (projector, _) = train_projector(cfg, base, e, rc)?;
        let mut modules = BTreeMap::new();
        modules.insert(
            route,
            RouteModule {
                name: rc.name.clone(),
                expert: e.clone(),
                projector,
            },
        );
        let names = BTreeMap::from([(route, rc.name.clone())]);
        let system = assemble(cfg, base.clone(), init_encoder(cfg)?, modules, names, Vec::new())?;
        Ok(evaluate(&system, &test, RoutingMode::Oracle, cfg.eval.regression_epsilon)?.em_of("private"))
    })
}

pub fn save_base(path: &Path, base: &ToyLm<f32>, seed: u64) -> Result<String> {
    checkpoint::save(
        path,
        CheckpointKind::Base,
        &json!({ "lm": base.config() }),
        seed,
        base.params(),
    )
}

pub fn save_encoder(path: &Path, encoder: &ToyLm<f32>) -> Result<String> {
    checkpoint::save(
        path,
        CheckpointKind::Encoder,
        &json!({ "lm": encoder.config() }),
        encoder.config().seed,
        encoder.params(),
    )
}

fn load_lm(path: &Path, kind: CheckpointKind) -> Result<(ToyLm<f32>, serde_json::Value)> {
    let ck = checkpoint::load(path, kind)?;
    let lm: LmConfig = serde_json::from_value(ck.header.config["lm"].clone()).map_err(|e| GagError::Corruption {
        path: path.to_path_buf(),
        reason: format!("bad model config: {e}"),
    })?;
    let mut m = ToyLm::from_params(lm, ck.params)?;
    m.freeze();
    Ok((m, ck.header.config))
}

/// Loads a frozen base.
pub fn load_base(path: &Path) -> Result<ToyLm<f32>> {
    load_lm(path, CheckpointKind::Base).map(|(m, _)| m)
}

pub fn load_encoder(path: &Path) -> Result<ToyLm<f32>> {
    load_lm(path, CheckpointKind::Encoder).map(|(m, _)| m)
}

pub fn save_expert(path: &Path, expert: &DomainExpert, seed: u64) -> Result<String> {
    let config = json!({
        "lm": expert.model.config(),
        "route": expert.id,
        "readout_layer": expert.readout_layer(),
        "readout_source": expert.readout_source,
        "background_template": expert.background_template,
        "adapted": expert.is_adapted(),
    });
    checkpoint::save(path, CheckpointKind::Expert, &config, seed, expert.model.params())
}

/// Loads a frozen expert with its readout settings.
pub fn load_expert(path: &Path) -> Result<DomainExpert> {
    let (model, meta) = load_lm(path, CheckpointKind::Expert)?;
    let bad = |what: &str| GagError::Corruption {
        path: path.to_path_buf(),
        reason: format!("bad expert field {what}"),
    };
    let route = meta["route"].as_u64().ok_or_else(|| bad("route"))? as u32;
    let template: QueryTemplate =
        serde_json::from_value(meta["background_template"].clone()).map_err(|_| bad("background_template"))?;
    let source: ReadoutSource =
        serde_json::from_value(meta["readout_source"].clone()).map_err(|_| bad("readout_source"))?;
    let layer = meta["readout_layer"].as_u64().ok_or_else(|| bad("readout_layer"))? as usize;
    let mut e = DomainExpert::new(route, model, template);
    e.set_readout_layer(layer)?;
    e.readout_source = source;
    if meta["adapted"].as_bool().unwrap_or(false) {
        e.set_adapted(true);
    } else {
        e.allow_unadapted();
    }
    e.freeze();
    Ok(e)
}

pub fn save_projector(path: &Path, p: &Projector<f32>, seed: u64, base_hash: &str) -> Result<String> {
    let config = json!({
        "route": p.domain,
        "d_in": p.d_in(),
        "d_hidden": p.d_hidden(),
        "d_out": p.d_out(),
        "base_hash": base_hash,
    });
    checkpoint::save(path, CheckpointKind::Projector, &config, seed, &p.checkpoint_params())
}

/// Loads a projector and the base hash it was trained against.
pub fn load_projector(path: &Path) -> Result<(Projector<f32>, String)> {
    let ck = checkpoint::load(path, CheckpointKind::Projector)?;
    let route = ck.header.config["route"].as_u64().ok_or_else(|| GagError::Corruption {
        path: path.to_path_buf(),
        reason: "projector has no route".into(),
    })? as u32;
    let base_hash = ck.header.config["base_hash"].as_str().unwrap_or_default().to_string();
    Ok((Projector::from_params(route, ck.params)?, base_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, answer: &str) -> QaRecord {
        QaRecord {
            id: id.into(),
            route: 1,
            question: id.into(),
            answer: answer.into(),
            gold_route: None,
        }
    }

    #[test]
    fn subset_keeps_the_first_questions_per_fact() {
        let recs = vec![
            rec("a1", "x"),
            rec("a2", "x"),
            rec("b1", "y"),
            rec("a3", "x"),
            rec("b2", "y"),
        ];
        let ids: Vec<String> = stage2_subset(&recs, 2).into_iter().map(|r| r.id).collect();
        assert_eq!(ids, ["a1", "a2", "b1", "b2"]);
    }

    #[test]
    fn tiny_pipeline_runs_and_persists() {
        let cfg = RunConfig::tiny();
        let run = run_pipeline(&cfg, Variant::Full).unwrap();
        assert!(run.audits.iter().all(|a| a.before == a.after));
        assert_eq!(run.system.registry().len(), cfg.data.domains + 1);
        let dir = tempfile::tempdir().unwrap();
        let m = run.system.module(1).unwrap();
        let p = dir.path().join("e.gag");
        save_expert(&p, &m.expert, 1).unwrap();
        let e = load_expert(&p).unwrap();
        assert_eq!(e, m.expert);
        let p = dir.path().join("p.gag");
        save_projector(&p, &m.projector, 1, "h").unwrap();
        let (q, h) = load_projector(&p).unwrap();
        assert_eq!(q.content_hash(), m.projector.content_hash());
        assert_eq!(h, "h");
        let p = dir.path().join("b.gag");
        save_base(&p, run.system.base(), 42).unwrap();
        assert_eq!(load_base(&p).unwrap().content_hash(), run.system.base().content_hash());
        assert!(load_expert(&p).is_err());
        let r = run.evaluate(RoutingMode::None, 1.0).unwrap();
        assert_eq!(r.regression_delta, 0.0);
    }
}
