//! JSON-over-HTTP transport for the protocol: a blocking client and a small
//! threaded server that exposes any [`Backend`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::protocol::{canonical_json, outcome_json};
use super::{Backend, BackendError, BackendResult, Request, Response};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub timeout_secs: f64,
    /// Retries for idempotent requests. Logits queries are never retried.
    pub retries: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout_secs: 30.0,
            retries: 0,
        }
    }
}

/// Client for a `convis/1` server.
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
    config: HttpConfig,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>, config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            config,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn send_once(&self, request: &Request) -> BackendResult<Response> {
        let url = format!("{}{}", self.base_url, request.path());
        let body = canonical_json(&request.body());
        let mut response = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(transport_error)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(transport_error)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("HTTP {status}: invalid JSON body: {e}")))?;
        let parsed = Response::from_json(request, value);
        if status >= 400 && parsed.is_ok() {
            return Err(BackendError::Protocol(format!("HTTP {status} with a success body")));
        }
        parsed
    }
}

fn transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
        other => BackendError::Transport(other.to_string()),
    }
}

impl Backend for RemoteBackend {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        let retries = match request {
            Request::Logits(_) => 0,
            _ => self.config.retries,
        };
        let mut attempt = 0;
        loop {
            match self.send_once(request) {
                Err(e) if e.is_retryable() && attempt < retries => {
                    attempt += 1;
                    log::warn!("{} failed ({e}), retry {attempt}/{retries}", request.path());
                }
                other => return other,
            }
        }
    }
}

/// Serves a backend over HTTP until dropped.
pub struct ProtocolServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ProtocolServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts `threads`
    /// workers.
    pub fn start(backend: Arc<dyn Backend>, addr: &str, threads: usize) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let backend = Arc::clone(&backend);
                std::thread::spawn(move || {
                    for request in server.incoming_requests() {
                        handle(&*backend, request);
                    }
                })
            })
            .collect();
        Ok(Self { server, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is shut down from another thread.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ProtocolServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn handle(backend: &dyn Backend, mut request: tiny_http::Request) {
    let outcome = decode_request(&mut request).and_then(|r| backend.call(&r));
    let status = match &outcome {
        Ok(_) => 200,
        Err(e) => e.status(),
    };
    let body = canonical_json(&outcome_json(&outcome));
    let header = tiny_http::Header::from_bytes("content-type", "application/json").expect("static header");
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = request.respond(response) {
        log::warn!("failed to send response: {e}");
    }
}

fn decode_request(request: &mut tiny_http::Request) -> BackendResult<Request> {
    if *request.method() != tiny_http::Method::Post {
        return Err(BackendError::BadRequest(format!("{} not allowed", request.method())));
    }
    let path = request.url().split('?').next().unwrap_or_default().to_string();
    let mut text = String::new();
    request
        .as_reader()
        .read_to_string(&mut text)
        .map_err(|e| BackendError::BadRequest(e.to_string()))?;
    let body: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(&text).map_err(|e| BackendError::BadRequest(format!("invalid JSON: {e}")))?
    };
    Request::from_parts(&path, body)
}
