use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use gag::artifacts::{need, sha256_file, ManifestBuilder, RunDir};
use gag::config::RunConfig;
use gag::data::{write_jsonl, QaRecord};
use gag::eval::{eval_routing, evaluate};
use gag::pipeline::{
    generate_corpus, init_encoder, load_base, load_encoder, load_expert, run_ablation, save_base, save_encoder,
    save_expert, save_projector, sweep_readout, train_base, train_expert, train_projector,
};
use gag::server::{serve, ServerState};
use gag::system::RoutingMode;
use gag::GagError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Ppr,
    Oracle,
    None,
}

impl From<Mode> for RoutingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ppr => RoutingMode::Ppr,
            Mode::Oracle => RoutingMode::Oracle,
            Mode::None => RoutingMode::None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gag",
    version,
    about = "Train, route and serve single-token knowledge injection"
)]
struct Cli {
    /// Run configuration (JSON). Defaults to <out>/config.json, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the seed of the stage the command runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "ppr")]
    mode: Mode,
    /// Restricts the command to one route.
    #[arg(long, global = true)]
    route_id: Option<u32>,
    #[arg(long, global = true, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a validated config to <out>/config.json.
    InitConfig,
    /// Generate the synthetic corpus.
    GenData,
    /// Pretrain and freeze the base model.
    TrainBase,
    /// Stage I: adapt domain experts.
    TrainExpert,
    /// Stage II: align projectors against the frozen base.
    TrainProjector,
    /// Build prototype banks with the routing encoder.
    BuildBank,
    /// Route queries (or the whole pool when none are given).
    Route { queries: Vec<String> },
    /// Answer queries (or the whole pool when none are given).
    Answer { queries: Vec<String> },
    /// Evaluate the pool under --mode.
    Eval,
    /// Full versus no-Stage-I versus no-Stage-II with oracle routing.
    Ablate,
    /// Readout-layer sweep for one route.
    SweepReadout,
    /// Serve the HTTP API.
    Serve,
}

fn resolve_config(cli: &Cli, dir: &RunDir) -> anyhow::Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if dir.config().exists() => RunConfig::load(&dir.config())?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn private_routes(cfg: &RunConfig, only: Option<u32>) -> anyhow::Result<Vec<u32>> {
    let all: Vec<u32> = (1..=cfg.data.domains as u32).collect();
    match only {
        Some(r) if all.contains(&r) => Ok(vec![r]),
        Some(r) => Err(GagError::UnknownRoute(r).into()),
        None => Ok(all),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn config_input(cli: &Cli, dir: &RunDir, m: &mut ManifestBuilder) {
    match &cli.config {
        Some(p) => m.input(p),
        None if dir.config().exists() => m.input(dir.config()),
        None => m,
    };
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let dir = RunDir::new(&cli.out);
    let mut cfg = resolve_config(&cli, &dir)?;
    dir.ensure()?;
    let name = match &cli.command {
        Command::InitConfig => "init-config",
        Command::GenData => "gen-data",
        Command::TrainBase => "train-base",
        Command::TrainExpert => "train-expert",
        Command::TrainProjector => "train-projector",
        Command::BuildBank => "build-bank",
        Command::Route { .. } => "route",
        Command::Answer { .. } => "answer",
        Command::Eval => "eval",
        Command::Ablate => "ablate",
        Command::SweepReadout => "sweep-readout",
        Command::Serve => "serve",
    };
    let mode: RoutingMode = cli.mode.into();
    let manifest_name = match (&cli.command, cli.route_id) {
        (Command::TrainExpert | Command::TrainProjector | Command::BuildBank | Command::SweepReadout, Some(r)) => {
            format!("{name}-{r}")
        }
        (Command::Eval | Command::Answer { .. }, _) => format!("{name}-{mode}"),
        _ => name.to_string(),
    };
    let mut m = ManifestBuilder::new(&manifest_name, &cfg);
    config_input(&cli, &dir, &mut m);

    match &cli.command {
        Command::InitConfig => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
                cfg.base.seed = s;
                cfg.pretrain.seed = s;
                cfg.expert.seed = s.wrapping_add(1);
                cfg.encoder.seed = s.wrapping_add(2);
                cfg.stage1.seed = s;
                cfg.stage2.seed = s;
                cfg.ppr.seed = s;
            }
            cfg.validate()?;
            std::fs::write(dir.config(), cfg.to_json())?;
            m.output(dir.config()).seed("data", cfg.data.seed);
        }
        Command::GenData => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let corpus = generate_corpus(&cfg)?;
            for p in corpus.write(&dir.data())? {
                m.output(p);
            }
            m.seed("data", cfg.data.seed).summary(json!({
                "routes": corpus.routes.iter().map(|r| json!({"route": r.route, "name": r.name, "train": r.train.len(), "test": r.test.len()})).collect::<Vec<_>>(),
                "pool": corpus.pool.len(),
            }));
        }
        Command::TrainBase => {
            if let Some(s) = cli.seed {
                cfg.pretrain.seed = s;
            }
            let corpus = dir.load_corpus(&cfg)?;
            m.input(dir.split(0, "train"));
            let (base, report) = train_base(&cfg, &corpus)?;
            let hash = save_base(&dir.base(), &base, cfg.pretrain.seed)?;
            m.output(dir.base())
                .seed("init", cfg.base.seed)
                .seed("pretrain", cfg.pretrain.seed)
                .summary(json!({"content_hash": hash, "report": report}));
        }
        Command::TrainExpert => {
            if let Some(s) = cli.seed {
                cfg.stage1.seed = s;
            }
            let corpus = dir.load_corpus(&cfg)?;
            let mut summary = Vec::new();
            for r in private_routes(&cfg, cli.route_id)? {
                let rc = corpus.route(r).ok_or(GagError::UnknownRoute(r))?;
                m.input(dir.split(r, "train"));
                let (expert, report) = train_expert(&cfg, rc, true)?;
                let hash = save_expert(&dir.expert(r), &expert, cfg.stage1.seed)?;
                m.output(dir.expert(r));
                summary.push(json!({"route": r, "content_hash": hash, "report": report}));
            }
            m.seed("init", cfg.expert.seed)
                .seed("stage1", cfg.stage1.seed)
                .summary(json!(summary));
        }
        Command::TrainProjector => {
            if let Some(s) = cli.seed {
                cfg.stage2.seed = s;
            }
            let corpus = dir.load_corpus(&cfg)?;
            let base_path = need(dir.base())?;
            let file_before = sha256_file(&base_path)?;
            let base = load_base(&base_path)?;
            let base_hash = base.content_hash();
            m.input(&base_path);
            let mut summary = Vec::new();
            for r in private_routes(&cfg, cli.route_id)? {
                let rc = corpus.route(r).ok_or(GagError::UnknownRoute(r))?;
                let expert = load_expert(&need(dir.expert(r))?)?;
                m.input(dir.expert(r)).input(dir.split(r, "train"));
                let (projector, report) = train_projector(&cfg, &base, &expert, rc)?;
                let file_after = sha256_file(&base_path)?;
                if file_after != file_before || base.content_hash() != base_hash {
                    return Err(GagError::BaseMismatch {
                        expected: file_before,
                        found: file_after,
                    }
                    .into());
                }
                let hash = save_projector(&dir.projector(r), &projector, cfg.stage2.seed, &base_hash)?;
                m.output(dir.projector(r));
                summary.push(json!({"route": r, "content_hash": hash, "base_hash": base_hash, "report": report}));
            }
            m.seed("stage2", cfg.stage2.seed).summary(json!(summary));
        }
        Command::BuildBank => {
            if let Some(s) = cli.seed {
                cfg.ppr.seed = s;
            }
            let corpus = dir.load_corpus(&cfg)?;
            let encoder = if dir.encoder().exists() {
                m.input(dir.encoder());
                load_encoder(&dir.encoder())?
            } else {
                let e = init_encoder(&cfg)?;
                save_encoder(&dir.encoder(), &e)?;
                m.output(dir.encoder());
                e
            };
            let routes: Vec<u32> = match cli.route_id {
                Some(r) => vec![r],
                None => corpus.routes.iter().map(|r| r.route).collect(),
            };
            let mut summary = Vec::new();
            for r in routes {
                let rc = corpus.route(r).ok_or(GagError::UnknownRoute(r))?;
                m.input(dir.split(r, "train"));
                let bank = gag::pipeline::build_route_bank(&cfg, &encoder, rc)?;
                bank.save(&dir.bank(r))?;
                m.output(dir.bank(r));
                summary.push(json!({"route": r, "prototypes": bank.len()}));
            }
            m.seed("ppr", cfg.ppr.seed)
                .seed("encoder", cfg.encoder.seed)
                .summary(json!(summary));
        }
        Command::Route { queries } => {
            let system = dir.load_system(&cfg)?;
            if queries.is_empty() {
                let corpus = dir.load_corpus(&cfg)?;
                m.input(dir.pool());
                let mut rows = Vec::new();
                let mut pairs = Vec::new();
                for q in &corpus.pool {
                    let d = system.route(&q.question)?;
                    let gold = q.gold_route.unwrap_or(q.route);
                    pairs.push((gold, d.route));
                    rows.push(json!({"id": q.id, "gold_route": gold, "route": d.route, "similarity": d.similarity(), "margin": d.margin}));
                }
                let slice = eval_routing(&pairs, &system.registry().route_ids().into_iter().collect())?;
                let out = dir.reports().join("routes.json");
                write_json(&out, &json!({"routing": slice, "queries": rows}))?;
                m.output(&out)
                    .summary(json!({"micro": slice.micro, "per_route": slice.per_route}));
                println!(
                    "{}",
                    serde_json::to_string(&json!({"micro": slice.micro, "per_route": slice.per_route}))?
                );
            } else {
                for q in queries {
                    let d = system.route(q)?;
                    println!(
                        "{}",
                        json!({"query": q, "route": d.route, "route_name": system.route_name(d.route), "similarity": d.similarity(), "margin": d.margin})
                    );
                }
            }
        }
        Command::Answer { queries } => {
            let system = dir.load_system(&cfg)?;
            if queries.is_empty() {
                let corpus = dir.load_corpus(&cfg)?;
                m.input(dir.pool());
                let mut answered = Vec::new();
                for q in &corpus.pool {
                    let a = system.answer(&q.question, mode, q.gold_route)?;
                    answered.push(QaRecord {
                        id: q.id.clone(),
                        route: a.route,
                        question: q.question.clone(),
                        answer: a.answer,
                        gold_route: q.gold_route,
                    });
                }
                let out = dir.reports().join(format!("answers_{mode}.jsonl"));
                write_jsonl(&out, &answered)?;
                m.output(&out);
            } else {
                for q in queries {
                    let a = system.answer(q, mode, cli.route_id)?;
                    println!(
                        "{}",
                        json!({"query": q, "route": a.route, "route_name": system.route_name(a.route), "similarity": a.decision.as_ref().map(|d| d.similarity()), "answer": a.answer})
                    );
                }
            }
        }
        Command::Eval => {
            let system = dir.load_system(&cfg)?;
            let corpus = dir.load_corpus(&cfg)?;
            m.input(dir.pool());
            let report = evaluate(&system, &corpus.pool, mode, cfg.eval.regression_epsilon)?;
            let json_path = dir.reports().join(format!("eval_{mode}.json"));
            let csv_path = dir.reports().join(format!("eval_{mode}.csv"));
            report.write_json(&json_path)?;
            report.write_csv(&csv_path)?;
            m.output(&json_path).output(&csv_path);
            let summary = json!({
                "mode": mode,
                "em": report.em,
                "base_only_em": report.base_only_em,
                "routing_micro": report.routing.as_ref().map(|r| r.micro),
                "regression_delta": report.regression_delta,
                "within_margin": report.within_margin,
            });
            println!("{}", serde_json::to_string(&summary)?);
            m.summary(summary);
        }
        Command::Ablate => {
            let corpus = dir.load_corpus(&cfg)?;
            let base = load_base(&need(dir.base())?)?;
            m.input(dir.base()).input(dir.pool());
            let report = run_ablation(&cfg, &corpus, &base)?;
            let json_path = dir.reports().join("ablation.json");
            let csv_path = dir.reports().join("ablation.csv");
            write_json(&json_path, &report)?;
            let mut csv = String::from("variant,private_em,delta_from_full\n");
            for r in &report.rows {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    r.variant.name(),
                    r.private_em,
                    r.delta_from_full
                ));
            }
            std::fs::write(&csv_path, csv)?;
            m.output(&json_path).output(&csv_path).summary(json!(report.rows));
            print!("{}", std::fs::read_to_string(&csv_path)?);
        }
        Command::SweepReadout => {
            let corpus = dir.load_corpus(&cfg)?;
            let base = load_base(&need(dir.base())?)?;
            m.input(dir.base());
            let route = cli.route_id.unwrap_or(1);
            let layers: Vec<usize> = (1..=cfg.expert.n_layers).collect();
            let rows = sweep_readout(&cfg, &base, &corpus, route, &layers)?;
            let json_path = dir.reports().join(format!("sweep_readout_{route}.json"));
            let csv_path = dir.reports().join(format!("sweep_readout_{route}.csv"));
            write_json(&json_path, &rows)?;
            let mut csv = String::from("layer,em\n");
            for r in &rows {
                csv.push_str(&format!("{},{}\n", r.layer, r.score));
            }
            std::fs::write(&csv_path, csv)?;
            m.output(&json_path).output(&csv_path).summary(json!(rows));
            print!("{}", std::fs::read_to_string(&csv_path)?);
        }
        Command::Serve => {
            let system = dir.load_system(&cfg)?;
            if system.registry().is_empty() && mode == RoutingMode::Ppr {
                bail!(GagError::MissingArtifact(dir.banks()));
            }
            m.input(dir.base()).input(dir.encoder());
            for b in system.registry().banks() {
                m.input(dir.bank(b.route_id));
            }
            m.summary(json!({"bind": cli.bind.to_string(), "mode": mode}));
            m.finish(&dir)?;
            serve(ServerState { system, mode }, cli.bind)?;
            return Ok(());
        }
    }
    let (path, manifest) = m.finish(&dir)?;
    tracing::info!(manifest = %path.display(), secs = manifest.wall_time_secs, "{name} done");
    Ok(())
}

fn init_logging() -> anyhow::Result<()> {
    let level = match std::env::var("GAG_LOG_LEVEL").as_deref() {
        Err(_) | Ok("info") => tracing::Level::INFO,
        Ok("error") => tracing::Level::ERROR,
        Ok("warn") => tracing::Level::WARN,
        Ok("debug") => tracing::Level::DEBUG,
        Ok(other) => bail!(GagError::Config(format!(
            "GAG_LOG_LEVEL must be error, warn, info or debug, got {other:?}"
        ))),
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    Ok(())
}

fn report_error(e: &anyhow::Error) {
    let kind = e.downcast_ref::<GagError>().map(|g| g.kind()).unwrap_or("cli");
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    eprintln!("{}", json!({"error": {"kind": kind, "message": chain.join(": ")}}));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": "usage", "message": e.to_string().trim()}})
            );
            return ExitCode::from(2);
        }
    };
    if let Err(e) = init_logging().and_then(|_| run(cli)) {
        report_error(&e);
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
