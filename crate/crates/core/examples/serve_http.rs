//! Serve a tiny system on a local port and exercise every endpoint with a
//! plain TCP client.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;

use gag::config::RunConfig;
use gag::pipeline::{run_pipeline, Variant};
use gag::server::{serve_on, ServerState};
use gag::system::RoutingMode;

fn call(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> anyhow::Result<String> {
    let mut s = TcpStream::connect(addr)?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    let status = out.lines().next().unwrap_or_default().to_string();
    let payload = out.split("\r\n\r\n").nth(1).unwrap_or_default().to_string();
    Ok(format!("{status} {payload}"))
}

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::tiny();
    let run = run_pipeline(&cfg, Variant::Full)?;
    let question = run.corpus.route(1).expect("route 1").test[0].question.clone();
    let dir = tempfile::tempdir()?;
    let bank_path = dir.path().join("bank_2.pprb");
    run.banks[2].save(&bank_path)?;

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    let state = Arc::new(ServerState {
        system: run.system,
        mode: RoutingMode::Ppr,
    });
    rt.spawn(serve_on(listener, state));

    let q = serde_json::json!({ "query": question }).to_string();
    println!("{}", call(addr, "POST", "/v1/answer", &q)?);
    println!("{}", call(addr, "POST", "/v1/route", &q)?);
    println!("{}", call(addr, "DELETE", "/v1/banks/2", "")?);
    println!("{}", call(addr, "DELETE", "/v1/banks/2", "")?);
    let attach = serde_json::json!({ "path": bank_path }).to_string();
    println!("{}", call(addr, "POST", "/v1/banks", &attach)?);
    println!("{}", call(addr, "POST", "/v1/banks", &attach)?);
    println!("{}", call(addr, "POST", "/v1/answer", "{not json")?);
    println!("{}", call(addr, "GET", "/v1/banks", "")?);
    Ok(())
}
