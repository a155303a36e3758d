use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use gag::config::RunConfig;
use gag::pipeline::{build_route_bank, run_pipeline, Variant};
use gag::server::{serve_on, ServerState};
use gag::system::RoutingMode;

fn call(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, serde_json::Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: t\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status: u16 = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
    let payload = raw.split("\r\n\r\n").nth(1).unwrap_or_default();
    (status, serde_json::from_str(payload).unwrap_or(serde_json::Value::Null))
}

#[test]
fn endpoints_and_status_codes() {
    let cfg = RunConfig::tiny();
    let run = run_pipeline(&cfg, Variant::Full).unwrap();
    let question = run.corpus.route(2).unwrap().test[0].question.clone();
    let expected_route = run.system.route(&question).unwrap();
    let base_answer = run.system.base_answer(&question).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let bank_path = tmp.path().join("bank_2.pprb");
    run.banks[2].save(&bank_path).unwrap();
    let mut foreign_cfg = cfg.clone();
    foreign_cfg.encoder.seed += 1;
    let foreign_encoder = gag::pipeline::init_encoder(&foreign_cfg).unwrap();
    let foreign_path = tmp.path().join("foreign.pprb");
    build_route_bank(&cfg, &foreign_encoder, run.corpus.route(2).unwrap())
        .unwrap()
        .save(&foreign_path)
        .unwrap();
    let bank_bytes = std::fs::read(&bank_path).unwrap();

    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let state = Arc::new(ServerState {
        system: run.system,
        mode: RoutingMode::Ppr,
    });
    rt.spawn(serve_on(listener, Arc::clone(&state)));

    let q = serde_json::json!({ "query": question }).to_string();
    let (s, a) = call(addr, "POST", "/v1/answer", &q);
    assert_eq!(s, 200);
    assert_eq!(a["route"], expected_route.route);
    assert!(a["route_name"].is_string() && a["answer"].is_string());
    assert!((a["similarity"].as_f64().unwrap() - expected_route.similarity() as f64).abs() < 1e-6);

    // Concurrent answers agree.
    let answers: Vec<serde_json::Value> = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..4)
            .map(|_| sc.spawn(|| call(addr, "POST", "/v1/answer", &q).1))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(answers.iter().all(|x| *x == a));

    let (s, banks) = call(addr, "GET", "/v1/banks", "");
    assert_eq!(s, 200);
    assert_eq!(banks.as_array().unwrap().len(), 3);
    assert!(banks[0]["provenance"]["encoder_fingerprint"].is_string());

    assert_eq!(call(addr, "POST", "/v1/answer", "{nope").0, 400);
    assert_eq!(call(addr, "POST", "/v1/answer", r#"{"question": "x"}"#).0, 400);
    assert_eq!(call(addr, "DELETE", "/v1/banks/7", "").0, 404);
    assert_eq!(call(addr, "DELETE", "/v1/banks/abc", "").0, 400);
    let attach = |p: &std::path::Path| serde_json::json!({ "path": p }).to_string();
    assert_eq!(call(addr, "POST", "/v1/banks", &attach(&bank_path)).0, 409);
    assert_eq!(
        call(addr, "POST", "/v1/banks", &attach(&tmp.path().join("none.pprb"))).0,
        404
    );

    // Hot detach and re-attach are visible without restart.
    assert_eq!(call(addr, "DELETE", "/v1/banks/2", "").0, 200);
    let (_, r) = call(addr, "POST", "/v1/route", &q);
    assert_ne!(r["route"], 2);
    assert_eq!(call(addr, "POST", "/v1/banks", &attach(&foreign_path)).0, 409);
    let (s, info) = call(addr, "POST", "/v1/banks", &attach(&bank_path));
    assert_eq!((s, info["route_id"].as_u64()), (200, Some(2)));
    let (_, r) = call(addr, "POST", "/v1/route", &q);
    assert_eq!(r["route"], expected_route.route);
    assert_eq!(std::fs::read(&bank_path).unwrap(), bank_bytes);

    // Mode none answers with the base alone.
    let bypass = Arc::new(ServerState {
        system: gag::pipeline::run_pipeline(&cfg, Variant::Full).unwrap().system,
        mode: RoutingMode::None,
    });
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr2 = listener.local_addr().unwrap();
    rt.spawn(serve_on(listener, bypass));
    let (s, a) = call(addr2, "POST", "/v1/answer", &q);
    assert_eq!(s, 200);
    assert_eq!(a["route"], 0);
    assert_eq!(a["answer"], base_answer);
}
