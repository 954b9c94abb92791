//! Serve the testbed over the JSON protocol and decode against it with the
//! HTTP client, exactly as against an external model server.
//!
//! With `--serve ADDR` it only serves, so another process can connect:
//! `cargo run --example remote_backend -- --serve 127.0.0.1:8089`

use std::sync::Arc;

use convis::app::{run_decode, BackendConfig, RunConfig};
use convis::backend::http::{HttpConfig, ProtocolServer};
use convis::testbed::{TestbedBackend, WorldSpec};

fn main() -> convis::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let serve_only = args.first().map(String::as_str) == Some("--serve");
    let addr = if serve_only { args.get(1).map(String::as_str).unwrap_or("127.0.0.1:8089") } else { "127.0.0.1:0" };

    let server = ProtocolServer::start(Arc::new(TestbedBackend::new(WorldSpec::default())?), addr, 4)?;
    if serve_only {
        println!("serving on {}", server.url());
        server.join();
        return Ok(());
    }

    let cfg = RunConfig {
        backend: BackendConfig::Remote {
            mllm_url: server.url(),
            t2i_url: Some(server.url()),
            http: HttpConfig::default(),
        },
        ..RunConfig::default()
    };
    let out = run_decode(&cfg, cfg.open_backend()?, "remote:cat,bench,tree")?;
    println!("{}", serde_json::to_string_pretty(&out.response)?);
    Ok(())
}
