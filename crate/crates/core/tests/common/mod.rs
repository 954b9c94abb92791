//! Scripted sessions, golden-fixture access and transcript fault injection
//! shared by the conformance tests and the acceptance suite.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use convis::backend::http::{HttpConfig, ProtocolServer, RemoteBackend};
use convis::backend::protocol::*;
use convis::backend::transcript::{RecordingBackend, ReplayBackend, Transcript};
use convis::backend::{Backend, BackendResult, ImageHandle, Request, Response, Session};
use convis::convis::{convis_decode, ConvisConfig};
use convis::logits::{LogitVector, TokenId};
use convis::sampling::{decode, SamplerConfig};
use convis::testbed::{TestbedBackend, WorldSpec};
use serde_json::{json, Value};

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

pub fn world() -> WorldSpec {
    WorldSpec::from_json_file(&golden_dir().join("world.json")).unwrap()
}

pub fn serve_testbed() -> ProtocolServer {
    let backend = Arc::new(TestbedBackend::new(world()).unwrap());
    ProtocolServer::start(backend, "127.0.0.1:0", 2).unwrap()
}

pub fn remote(server: &ProtocolServer) -> RemoteBackend {
    RemoteBackend::new(server.url(), HttpConfig::default())
}


pub fn logits_json(l: &LogitVector) -> Value {
    json!(l.to_wire())
}

/// Tokenizer, registration, logits and rendering, one request at a time.
pub fn script_basic(s: &Session) -> BackendResult<Value> {
    let ids = s.tokenize("a dog and a cat")?;
    let text = s.detokenize(ids.as_slice())?;
    let empty = s.tokenize("")?;
    let img = s.register_image(None, Some("g1:dog,pool,cat"))?;
    let prompt = s.tokenize("Describe the picture")?;
    let mut steps = Vec::new();
    for prefix in [&[][..], &[1], &[1, 4], &[1, 4, 2, 1]] {
        steps.push(logits_json(&s.query_logits(&img, prompt.as_slice(), prefix)?));
    }
    let generated = s.generate_image("a dog and a car", 7)?;
    let gen_logits = s.query_logits(&generated, prompt.as_slice(), &[1])?;
    Ok(json!({
        "ids": ids, "text": text, "empty": empty, "image": img.id,
        "steps": steps, "generated": generated.id, "gen_logits": logits_json(&gen_logits),
    }))
}

pub fn golden_convis_config() -> ConvisConfig {
    ConvisConfig {
        n_images: 2,
        response_max_new_tokens: 16,
        parallel: false,
        caption_sampler: SamplerConfig::nucleus(0.7, 0.9, 32, 0),
        seed_base: 5,
        ..ConvisConfig::default()
    }
}

/// A complete ConVis decode.
pub fn script_convis(s: &Session) -> convis::Result<Value> {
    let img = s.register_image(None, Some("c1:dog,pool,kite"))?;
    let prompt = s.tokenize("Describe the picture")?;
    let out = convis_decode(s, s, &img, &prompt, &golden_convis_config())?;
    Ok(json!({
        "tokens": out.result.tokens,
        "captions": out.captions.iter().map(|c| c.caption_text.clone()).collect::<Vec<_>>(),
    }))
}

/// Every request here fails on the server.
pub fn script_errors(s: &Session) -> Value {
    let unknown = s.query_logits(&ImageHandle::original("nope"), &[], &[]);
    let bad_ref = s.register_image(None, Some("e1:unicorn"));
    let img = s.register_image(None, Some("e2:dog")).unwrap();
    let bad_prefix = s.query_logits(&img, &[], &[2]);
    let out_of_range = s.query_logits(&img, &[], &[10_000]);
    let refused = s.generate_image(&["a dog"; 10].join(" and "), 1);
    let pixels = s.register_image(Some(b"\x89PNG"), None);
    let kinds: Vec<Value> = [
        unknown.map(|_| ()),
        bad_ref.map(|_| ()),
        bad_prefix.map(|_| ()),
        out_of_range.map(|_| ()),
        refused.map(|_| ()),
        pixels.map(|_| ()),
    ]
    .into_iter()
    .map(|r| json!(r.unwrap_err().kind()))
    .collect();
    json!(kinds)
}

/// A stand-in for a real-model bridge: its own vocabulary, opaque handles
/// and logits with full-precision decimals.
pub struct BridgeLike;

impl Backend for BridgeLike {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        match request {
            Request::Handshake => Ok(Response::Handshake(HandshakeInfo {
                vocab_size: 6,
                eos_id: 5,
                bos_id: Some(0),
                capabilities: vec![CAP_LOGITS.into(), CAP_TOKENIZE.into(), CAP_GENERATE_IMAGE.into()],
                protocol: PROTOCOL_VERSION.into(),
            })),
            Request::RegisterImage(_) => Ok(Response::Image(ImageResponse {
                image_id: "sha256:9f2c41d07be3a815".into(),
            })),
            Request::Tokenize(_) => Ok(Response::Ids(IdsResponse { ids: vec![0, 3, 1] })),
            Request::Detokenize(r) => Ok(Response::Text(TextResponse {
                text: format!("tokens {:?}", r.ids),
            })),
            Request::GenerateImage(r) => Ok(Response::Image(ImageResponse {
                image_id: format!("gen/{:05}", r.seed),
            })),
            Request::Logits(r) => {
                let base: [f64; 6] = [-3.1415926535897931, 0.1, 2.718281828459045, -0.3333333333333333, 1.4142135623730951, -7.25e-5];
                let k = r.prefix_ids.len() as f64;
                let mut v: Vec<Option<f64>> = base.iter().map(|b| Some(b + 0.7 * k * b.sin())).collect();
                if r.prefix_ids.len() >= 2 {
                    v[5] = Some(9.0);
                }
                Ok(Response::Logits(LogitsResponse { logits: v }))
            }
        }
    }
}

pub fn script_bridge(s: &Session) -> convis::Result<Value> {
    let img = s.register_image(Some(b"\x89PNG\r\n\x1a\n"), None)?;
    let prompt = s.tokenize("Describe this image.")?;
    let mut provider = |p: &[TokenId], prefix: &[TokenId]| -> convis::Result<LogitVector> {
        Ok(s.query_logits(&img, p, prefix)?)
    };
    let out = decode(&mut provider, &prompt, &SamplerConfig::greedy(8), s.eos_id())?;
    let caption = s.detokenize(out.tokens.without_eos(s.eos_id()))?;
    let generated = s.generate_image(&caption, 3)?;
    Ok(json!({"image": img.id, "tokens": out.tokens, "caption": caption, "generated": generated.id}))
}

pub fn record_live<F: FnOnce(&Session) -> Value>(script: F) -> (Transcript, Value) {
    let server = serve_testbed();
    let rec = Arc::new(RecordingBackend::new(remote(&server)));
    let session = Session::open(rec.clone()).unwrap();
    let out = script(&session);
    (rec.transcript(), out)
}

pub type Script = fn(&Session) -> Value;

pub fn scripts() -> Vec<(&'static str, Script)> {
    vec![
        ("basic", |s| script_basic(s).unwrap()),
        ("convis", |s| script_convis(s).unwrap()),
        ("errors", script_errors),
    ]
}

pub fn expected(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(golden_dir().join(format!("{name}.expected.json"))).unwrap())
        .unwrap()
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(golden_dir().join(format!("{name}.jsonl"))).unwrap()
}


pub fn replay_session(text: &str) -> (Arc<ReplayBackend>, Session) {
    let replay = Arc::new(ReplayBackend::new(&Transcript::parse(text).unwrap()).unwrap());
    let session = Session::open(replay.clone()).unwrap();
    (replay, session)
}


pub fn first_logits_entry(name: &str) -> (Transcript, usize) {
    let t = Transcript::parse(&golden(name)).unwrap();
    let i = t
        .entries
        .iter()
        .position(|e| e.request["path"] == "/v1/logits" && e.response.get("logits").is_some())
        .unwrap();
    (t, i)
}

pub fn query_entry(t: &Transcript, i: usize) -> BackendResult<LogitVector> {
    let replay = Arc::new(ReplayBackend::new(t).unwrap());
    let session = Session::open(replay)?;
    let req = &t.entries[i].request["body"];
    let ids = |k: &str| -> Vec<TokenId> { serde_json::from_value(req[k].clone()).unwrap() };
    session.query_logits(
        &ImageHandle::original(req["image_id"].as_str().unwrap()),
        &ids("prompt_ids"),
        &ids("prefix_ids"),
    )
}


/// One corrupted-transcript scenario and whether it ended in the expected
/// typed error.
pub struct FaultOutcome {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

fn expect_err<T: std::fmt::Debug>(
    name: &'static str,
    got: BackendResult<T>,
    want: fn(&convis::backend::BackendError) -> bool,
) -> FaultOutcome {
    match got {
        Err(e) => FaultOutcome {
            name,
            ok: want(&e),
            detail: format!("{e:?}"),
        },
        Ok(v) => FaultOutcome {
            name,
            ok: false,
            detail: format!("accepted: {v:?}"),
        },
    }
}

/// Runs every hand-written corruption of the basic transcript.
pub fn fault_injection() -> Vec<FaultOutcome> {
    use convis::backend::BackendError as E;
    let protocol = |e: &E| matches!(e, E::Protocol(_));
    let mut out = Vec::new();

    let (mut t, i) = first_logits_entry("basic");
    t.entries[i].response["logits"].as_array_mut().unwrap().pop();
    out.push(expect_err("short logits vector", query_entry(&t, i), |e| {
        matches!(e, E::VocabMismatch { .. })
    }));

    let (mut t, i) = first_logits_entry("basic");
    t.entries[i].response["logits"].as_array_mut().unwrap().push(json!(0.5));
    out.push(expect_err("long logits vector", query_entry(&t, i), |e| {
        matches!(e, E::VocabMismatch { .. })
    }));

    let bad_values: [(&'static str, Value); 4] = [
        ("string in logits", json!("NaN")),
        ("boolean in logits", json!(true)),
        ("nested array in logits", json!([1.0])),
        ("object in logits", json!({"x": 1})),
    ];
    for (name, bad) in bad_values {
        let (mut t, i) = first_logits_entry("basic");
        t.entries[i].response["logits"][0] = bad;
        out.push(expect_err(name, query_entry(&t, i), protocol));
    }

    let (mut t, i) = first_logits_entry("basic");
    let n = t.entries[i].response["logits"].as_array().unwrap().len();
    t.entries[i].response["logits"] = json!(vec![Value::Null; n]);
    out.push(expect_err("fully masked logits", query_entry(&t, i), protocol));

    let (mut t, i) = first_logits_entry("basic");
    t.entries[i].response = json!({"ids": [1, 2]});
    out.push(expect_err("mismatched response type", query_entry(&t, i), protocol));

    let (mut t, i) = first_logits_entry("basic");
    t.entries[i].response = json!({"logits": [0.0], "extra": 1});
    out.push(expect_err("unknown response field", query_entry(&t, i), protocol));

    let (mut t, i) = first_logits_entry("basic");
    t.entries[i].response = json!({"error": "flat string"});
    out.push(expect_err("malformed error body", query_entry(&t, i), protocol));

    let (mut t, i) = first_logits_entry("basic");
    t.entries[i].response = json!({"error": {"kind": "gremlins", "message": "?"}});
    out.push(expect_err("unknown error kind", query_entry(&t, i), protocol));

    let mut t = Transcript::parse(&golden("basic")).unwrap();
    t.entries[1].request["path"] = json!("/v2/logits");
    out.push(expect_err("unknown request path", ReplayBackend::new(&t).map(|_| ()), protocol));

    let mut t = Transcript::parse(&golden("basic")).unwrap();
    t.entries[1].request.as_object_mut().unwrap().remove("path");
    out.push(expect_err("request without path", ReplayBackend::new(&t).map(|_| ()), protocol));

    let mut t = Transcript::parse(&golden("basic")).unwrap();
    t.entries[0].response["protocol"] = json!("convis/2");
    let replay = Arc::new(ReplayBackend::new(&t).unwrap());
    out.push(expect_err("wrong protocol version", Session::open(replay).map(|_| ()), protocol));

    let text = golden("basic");
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = &lines[2][..lines[2].len() / 2];
    out.push(expect_err("truncated line", Transcript::parse(&lines.join("\n")), |e| {
        matches!(e, E::Protocol(m) if m.contains("line 3"))
    }));

    out
}

/// Applies `count` seeded single-byte edits to the basic transcript and
/// drives a replay session through each. Returns the number of panics.
pub fn mutation_sweep(count: usize, seed: u64) -> usize {
    use rand::{Rng, SeedableRng};
    let original = golden("basic").into_bytes();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut panics = 0;
    for _ in 0..count {
        let mut bytes = original.clone();
        let at = rng.gen_range(0..bytes.len());
        if rng.gen_bool(0.5) {
            bytes.remove(at);
        } else {
            bytes[at] = rng.gen();
        }
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let run = std::panic::catch_unwind(move || {
            if let Ok(t) = Transcript::parse(&text) {
                if let Ok(replay) = ReplayBackend::new(&t) {
                    if let Ok(s) = Session::open(Arc::new(replay)) {
                        let _ = script_basic(&s);
                    }
                }
            }
        });
        panics += usize::from(run.is_err());
    }
    panics
}
