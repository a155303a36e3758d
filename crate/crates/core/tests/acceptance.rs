//! End-to-end acceptance checks. Runs without the test harness so each
//! criterion prints one line; the process exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use gag::config::RunConfig;
use gag::eval::eval_routing;
use gag::injection::{stage2_loss, Projector};
use gag::lm::tokenizer::tokenize;
use gag::lm::{LmConfig, LmInput, ToyLm};
use gag::numerics::grad_check;
use gag::pipeline::{
    ablation_from_full, assemble, build_banks, build_route_bank, generate_corpus, init_encoder, init_projector,
    run_pipeline, run_with_base, save_base, save_expert, sweep_readout, train_base, train_expert, Variant,
};
use gag::router::{embed_query, kmeans, BankRegistry, KMeansConfig};
use gag::system::{RouteModule, RoutingMode};
use gag::template::{KNOWLEDGE_FIELD, QUERY_FIELD};

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, id: u32, pass: bool, detail: String) {
    println!("criterion {id:>2} [{}] {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

fn file_sha(path: &std::path::Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).expect("readable")))
}

fn gradcheck_stage2() -> (bool, String) {
    let start = Instant::now();
    let small = |d, seed| LmConfig {
        n_layers: 2,
        d_model: d,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq_len: 96,
        seed,
        ..LmConfig::default()
    };
    let base = ToyLm::<f32>::new(small(32, 5)).unwrap().cast::<f64>();
    let expert = ToyLm::<f32>::new(small(24, 6)).unwrap().cast::<f64>();
    let cfg = RunConfig::default();
    let projector = Projector::<f64>::new(1, 24, 32, Some(32), 7);
    let pairs = [
        ("kohfeg: dosage code?", "tesape"),
        ("zucsop has which adjuvant code?", "rimo"),
    ];
    let mut readouts = Vec::new();
    let mut prompts = Vec::new();
    let mut answers = Vec::new();
    for (q, a) in pairs {
        let mut ids = vec![gag::lm::tokenizer::BOS];
        ids.extend(tokenize(a));
        let trace = expert.forward(LmInput::Tokens(&ids), &[1]).unwrap();
        readouts.push(trace.layer(1).unwrap().row(ids.len() - 1).to_vec());
        prompts.push(cfg.templates.answer.with_slot(q).unwrap());
        answers.push(tokenize(a));
    }
    let report = grad_check(
        |tape, bound| {
            let bb = base.bind(tape, false);
            let items: Vec<(&[f64], _, &[u32])> = (0..pairs.len())
                .map(|i| (readouts[i].as_slice(), &prompts[i], answers[i].as_slice()))
                .collect();
            stage2_loss(tape, &base, &bb, &projector, bound, &items)
        },
        projector.params(),
        3e-3,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        report.max_rel_error <= 1e-4 && secs <= 60.0,
        format!(
            "stage II gradient check: max rel err {:.2e} over {} values ({:.1}s)",
            report.max_rel_error, report.checked, secs
        ),
    )
}

fn kmeans_properties() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points: Vec<Vec<f32>> = (0..1000)
        .map(|_| {
            let v: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let r = kmeans(
        &points,
        &KMeansConfig {
            clusters: 8,
            n_init: 3,
            max_iter: 100,
            seed: 3,
        },
    )
    .unwrap();
    let monotone = r.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs());

    // Two antipodal arcs of 20 points each. Every 2-means optimum in the
    // plane is split by a line, so enumerating all line splits through
    // pairs of points covers the optimum.
    let mut arc = Vec::new();
    for i in 0..20 {
        let t = -0.4 + 0.8 * i as f64 / 19.0 + 0.01 * (i * i % 7) as f64;
        arc.push([t.cos(), t.sin()]);
        arc.push([-(t + 0.05).cos(), -(t + 0.05).sin()]);
    }
    let sse_of = |mask: &[bool]| -> (f64, [[f64; 2]; 2]) {
        let mut sums = [[0.0; 2]; 2];
        let mut counts = [0usize; 2];
        for (p, &m) in arc.iter().zip(mask) {
            let c = usize::from(m);
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            counts[c] += 1;
        }
        let means = [0, 1].map(|c| {
            [
                sums[c][0] / counts[c].max(1) as f64,
                sums[c][1] / counts[c].max(1) as f64,
            ]
        });
        let sse = arc
            .iter()
            .zip(mask)
            .map(|(p, &m)| {
                let c = means[usize::from(m)];
                (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
            })
            .sum();
        (sse, means)
    };
    let mut best = (f64::INFINITY, [[0.0; 2]; 2]);
    for i in 0..arc.len() {
        for j in 0..arc.len() {
            if i == j {
                continue;
            }
            let (a, b) = (arc[i], arc[j]);
            for shift in [-1e-9, 1e-9] {
                let mask: Vec<bool> = arc
                    .iter()
                    .map(|p| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > shift)
                    .collect();
                if mask.iter().all(|&m| m) || mask.iter().all(|&m| !m) {
                    continue;
                }
                let (sse, means) = sse_of(&mask);
                if sse < best.0 {
                    best = (sse, means);
                }
            }
        }
    }
    let optimum: Vec<[f64; 2]> = best
        .1
        .iter()
        .map(|m| {
            let n = (m[0] * m[0] + m[1] * m[1]).sqrt();
            [m[0] / n, m[1] / n]
        })
        .collect();
    let pts: Vec<Vec<f32>> = arc.iter().map(|p| vec![p[0] as f32, p[1] as f32]).collect();
    let got = kmeans(
        &pts,
        &KMeansConfig {
            clusters: 2,
            n_init: 10,
            max_iter: 100,
            seed: 4,
        },
    )
    .unwrap();
    let angle = |c: &[f32], o: &[f64; 2]| (c[0] as f64 * o[0] + c[1] as f64 * o[1]).clamp(-1.0, 1.0).acos();
    let worst = got
        .centroids
        .iter()
        .map(|c| optimum.iter().map(|o| angle(c, o)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    (
        monotone && worst <= 1e-3 && secs <= 10.0,
        format!(
            "k-means: SSE monotone over {} iterations: {monotone}; arc centroids within {:.2e} rad of the enumerated optimum ({:.1}s)",
            r.sse_history.len(),
            worst,
            secs
        ),
    )
}

fn knowledge_budget() -> (bool, String) {
    let mut lengths: Vec<Vec<usize>> = Vec::new();
    let mut extra = BTreeSet::new();
    let mut queries: Vec<(String, u32)> = Vec::new();
    for scale in [1usize, 10, 100] {
        let mut cfg = RunConfig::tiny();
        cfg.data.domain_facts = 5 * scale;
        let corpus = generate_corpus(&cfg).unwrap();
        if queries.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let private: Vec<_> = corpus.pool.iter().filter(|r| r.gold_route != Some(0)).collect();
            queries = (0..100)
                .map(|_| {
                    let r = private.choose(&mut rng).unwrap();
                    (r.question.clone(), r.gold_route.unwrap())
                })
                .collect();
        }
        let mut base = ToyLm::new(cfg.base.clone()).unwrap();
        base.freeze();
        let encoder = init_encoder(&cfg).unwrap();
        let mut modules = BTreeMap::new();
        for rc in corpus.routes.iter().filter(|r| r.route != 0) {
            let (expert, _) = train_expert(&cfg, rc, false).unwrap();
            let projector = init_projector(&cfg, &base, &expert);
            modules.insert(
                rc.route,
                RouteModule {
                    name: rc.name.clone(),
                    expert,
                    projector,
                },
            );
        }
        let banks = build_banks(&cfg, &encoder, &corpus).unwrap();
        let names = corpus.routes.iter().map(|r| (r.route, r.name.clone())).collect();
        let system = assemble(&cfg, base, encoder, modules, names, banks).unwrap();
        let mut row = Vec::new();
        for (q, route) in &queries {
            system.route(q).unwrap();
            let rows = system.injected_embeddings(q, *route).unwrap().shape()[0];
            // The same prompt with an empty knowledge field.
            let empty = cfg
                .templates
                .answer
                .text()
                .replace(KNOWLEDGE_FIELD, "")
                .replace(QUERY_FIELD, q);
            extra.insert(rows - 1 - tokenize(&empty).len());
            row.push(rows);
        }
        lengths.push(row);
    }
    let same = lengths.windows(2).all(|w| w[0] == w[1]);
    let one = extra == BTreeSet::from([1]);
    (
        same && one,
        format!(
            "knowledge budget: 100 queries at corpus 1x/10x/100x, identical lengths {same}, added tokens {extra:?}"
        ),
    )
}

fn routing_growth() -> (bool, String) {
    let mut cfg = RunConfig::default();
    cfg.data.domains = 5;
    cfg.data.train_per_fact = 6;
    let corpus = generate_corpus(&cfg).unwrap();
    let encoder = init_encoder(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut registry = BankRegistry::new(encoder.content_hash());
    let mut hashes: BTreeMap<u32, String> = BTreeMap::new();
    let mut details = Vec::new();
    let mut pass = true;
    let micro = |reg: &BankRegistry| {
        let ids: BTreeSet<u32> = reg.route_ids().into_iter().collect();
        let pairs: Vec<(u32, u32)> = corpus
            .pool
            .iter()
            .filter(|r| ids.contains(&r.gold_route.unwrap()))
            .map(|r| {
                (
                    r.gold_route.unwrap(),
                    reg.route(&embed_query(&encoder, &r.question).unwrap()).unwrap().route,
                )
            })
            .collect();
        eval_routing(&pairs, &ids).unwrap().micro
    };
    for route in 0..=5u32 {
        let rc = corpus.route(route).unwrap();
        let path = dir.path().join(format!("bank_{route}.pprb"));
        build_route_bank(&cfg, &encoder, rc).unwrap().save(&path).unwrap();
        hashes.insert(route, file_sha(&path));
        registry = registry
            .attach(gag::router::PrototypeBank::load(&path).unwrap())
            .unwrap();
        if route >= 1 {
            let m = micro(&registry);
            pass &= m >= 99.0;
            details.push(format!("{}:{m:.2}", route + 1));
        }
        for (r, h) in &hashes {
            if file_sha(&dir.path().join(format!("bank_{r}.pprb"))) != *h {
                pass = false;
                details.push(format!("bank {r} changed"));
            }
        }
    }
    (
        pass,
        format!(
            "routing growth 2->6 by attach, micro per route count [{}], earlier bank files unchanged",
            details.join(" ")
        ),
    )
}

fn determinism() -> (bool, String) {
    let cfg = RunConfig::tiny();
    let runs: Vec<_> = (0..2).map(|_| run_pipeline(&cfg, Variant::Full).unwrap()).collect();
    let reports: Vec<_> = runs
        .iter()
        .map(|r| {
            [RoutingMode::Ppr, RoutingMode::Oracle, RoutingMode::None]
                .map(|m| r.evaluate(m, cfg.eval.regression_epsilon).unwrap().without_timing())
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = Vec::new();
            let p = dir.path().join(format!("base_{i}.gag"));
            save_base(&p, r.system.base(), cfg.pretrain.seed).unwrap();
            out.push(file_sha(&p));
            for (id, m) in r.system.modules() {
                let p = dir.path().join(format!("expert_{i}_{id}.gag"));
                save_expert(&p, &m.expert, cfg.stage1.seed).unwrap();
                out.push(file_sha(&p));
            }
            for b in &r.banks {
                out.push(hex::encode(Sha256::digest(b.to_bytes().unwrap())));
            }
            out
        })
        .collect();
    let same_reports = reports[0] == reports[1];
    let same_hashes = runs[0].model_hashes() == runs[1].model_hashes() && files[0] == files[1];
    (
        same_reports && same_hashes,
        format!("determinism on the tiny config: identical eval reports {same_reports}, identical checkpoints {same_hashes}"),
    )
}

fn main() {
    let mut out = Vec::new();

    let (p, d) = gradcheck_stage2();
    record(&mut out, 3, p, d);
    let (p, d) = kmeans_properties();
    record(&mut out, 9, p, d);
    let (p, d) = knowledge_budget();
    record(&mut out, 2, p, d);
    let (p, d) = determinism();
    record(&mut out, 10, p, d);

    // Default setup.
    let cfg = RunConfig::default();
    let start = Instant::now();
    let corpus = generate_corpus(&cfg).unwrap();
    let (base, pretrain) = train_base(&cfg, &corpus).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let base_file = tmp.path().join("base.gag");
    save_base(&base_file, &base, cfg.pretrain.seed).unwrap();
    let base_sha = file_sha(&base_file);
    let run = run_with_base(&cfg, corpus, base, pretrain, Variant::Full).unwrap();
    save_base(&base_file, run.system.base(), cfg.pretrain.seed).unwrap();
    let oracle = run.evaluate(RoutingMode::Oracle, cfg.eval.regression_epsilon).unwrap();
    let ppr = run.evaluate(RoutingMode::Ppr, cfg.eval.regression_epsilon).unwrap();
    let elapsed = start.elapsed();

    let frozen = run.audits.iter().all(|a| a.before == a.after) && file_sha(&base_file) == base_sha;
    record(
        &mut out,
        1,
        frozen,
        format!(
            "frozen models: {} hash audits and the base checkpoint bytes unchanged by stage II: {frozen}",
            run.audits.len()
        ),
    );

    let base_private = oracle.base_only_em["private"];
    let (o, p) = (oracle.em_of("private"), ppr.em_of("private"));
    let pass4 = base_private <= 5.0 && o >= 85.0 && p >= o - 2.0 && elapsed <= Duration::from_secs(20 * 60);
    record(
        &mut out,
        4,
        pass4,
        format!(
            "injection efficacy: base-only private EM {base_private:.1}, oracle {o:.1}, ppr {p:.1} (per route {:?}), {:.0}s",
            oracle.em,
            elapsed.as_secs_f64()
        ),
    );

    let general_delta = ppr.em_of("general") - ppr.base_only_em["general"];
    record(
        &mut out,
        5,
        general_delta.abs() <= 1.0,
        format!(
            "general preservation: routed {:.2} vs base-only {:.2} (delta {general_delta:+.2})",
            ppr.em_of("general"),
            ppr.base_only_em["general"]
        ),
    );

    let micro3 = ppr.routing.as_ref().map(|r| r.micro).unwrap_or(0.0);
    let (growth_ok, growth) = routing_growth();
    record(
        &mut out,
        6,
        micro3 >= 99.0 && growth_ok,
        format!("routing: micro {micro3:.2} at 3 routes; {growth}"),
    );

    let ablation = ablation_from_full(&cfg, &run.corpus, run.system.base(), run.system.modules()).unwrap();
    let full = ablation.em(Variant::Full);
    let (n1, n2) = (ablation.em(Variant::NoStage1), ablation.em(Variant::NoStage2));
    record(
        &mut out,
        7,
        full - n1 >= 10.0 && full - n2 >= 10.0,
        format!("ablation (oracle, private EM): full {full:.1}, no_stage1 {n1:.1}, no_stage2 {n2:.1}"),
    );

    let mut sweep_cfg = cfg.clone();
    sweep_cfg.expert.n_layers = 6;
    sweep_cfg.data.domains = 1;
    let sweep_corpus = generate_corpus(&sweep_cfg).unwrap();
    let rows = sweep_readout(&sweep_cfg, run.system.base(), &sweep_corpus, 1, &[1, 2, 3, 4, 5, 6]).unwrap();
    println!("readout sweep (6-layer expert, route 1):");
    println!("layer,em");
    for r in &rows {
        println!("{},{:.1}", r.layer, r.score);
    }
    let default_layer = gag::expert::default_readout_layer(6);
    let at = |l: usize| rows.iter().find(|r| r.layer == l).map(|r| r.score).unwrap_or(f64::NAN);
    record(
        &mut out,
        8,
        rows.len() == 6 && at(1) < at(default_layer),
        format!(
            "readout sweep: layer 1 EM {:.1} vs default layer {default_layer} EM {:.1}",
            at(1),
            at(default_layer)
        ),
    );

    out.sort_by_key(|o| o.id);
    println!("summary:");
    for o in &out {
        println!("  criterion {:>2}: {}", o.id, if o.pass { "pass" } else { "FAIL" });
    }
    let failed: Vec<String> = out
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}: {}", o.id, o.detail))
        .collect();
    if !failed.is_empty() {
        eprintln!("failed criteria:\n{}", failed.join("\n"));
        std::process::exit(1);
    }
    println!("all criteria pass");
}
