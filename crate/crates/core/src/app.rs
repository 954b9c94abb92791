//! Run configuration and the operations behind the `convis` binary.
//!
//! A run is described by one JSON document ([`RunConfig`]). Any field can be
//! overridden from the command line with `--set dotted.path=value`, where the
//! value is parsed as JSON and falls back to a plain string. Every command
//! validates the whole configuration before it contacts a backend.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::http::{HttpConfig, ProtocolServer, RemoteBackend};
use crate::backend::transcript::{read_jsonl, RecordingBackend, ReplayBackend};
use crate::backend::{Backend, BackendError, Session, SplitBackend};
use crate::convis::{read_trace_jsonl, write_trace_jsonl, CaptionRecord, DEFAULT_CAPTION_PROMPT};
use crate::error::{Error, Result};
use crate::eval::{benchmark_budget, chair_scores, config_hash, CorpusRecord, Report, ReportRow, SeedRun};
use crate::experiment::{caption_corpus, respond, CorpusImage, Method, MethodSettings};
use crate::logits::TokenId;
use crate::sampling::StopReason;
use crate::testbed::{make_corpus, TestbedBackend, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    /// The in-process synthetic model and renderer.
    Testbed,
    /// A `convis/1` server; `t2i_url` may equal `mllm_url`.
    Remote {
        mllm_url: String,
        #[serde(default)]
        t2i_url: Option<String>,
        #[serde(default)]
        http: HttpConfig,
    },
    /// Answers from a recorded transcript.
    Replay { transcript: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// Scenes sampled from the world, a fresh corpus per run seed.
    Testbed { n_images: usize },
    /// JSON-lines of `{image_ref, ground_truth}`, shared by all seeds.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    /// World of the testbed backend and testbed corpora.
    pub world: WorldSpec,
    /// Read the world from this file instead.
    pub world_path: Option<PathBuf>,
    /// Method of `decode` and `record`.
    pub method: Method,
    /// Methods compared by `benchmark`.
    pub methods: Vec<Method>,
    pub settings: MethodSettings,
    /// Selects the response budget; CHAIR benchmarks are scored.
    pub benchmark: String,
    /// Overrides the benchmark budget.
    pub max_new_tokens: Option<usize>,
    pub prompt: String,
    pub corpus: CorpusSource,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::Testbed,
            world: WorldSpec::default(),
            world_path: None,
            method: Method::Convis,
            methods: Method::ALL.to_vec(),
            settings: MethodSettings::default(),
            benchmark: "chair".into(),
            max_new_tokens: None,
            prompt: DEFAULT_CAPTION_PROMPT.into(),
            corpus: CorpusSource::Testbed { n_images: 500 },
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("convis-out"),
            parallelism: 0,
        }
    }
}

/// Merges `patch` into `base` object by object. A tagged object (one with a
/// `kind` field) whose kind changes is replaced wholesale.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_object() && v.is_object() && existing.get("kind") == v.get("kind") => {
                        merge_json(existing, v)
                    }
                    Some(existing) if existing.is_object() && v.is_object() && v.get("kind").is_none() => {
                        merge_json(existing, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets `path` (dot separated) inside a JSON object to `raw`.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` has an empty segment")));
    }
    let mut node = config;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is inside a non-object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` targets a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Layers the defaults, an optional config file and the overrides, then
    /// validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(Error::Config(format!("{}: expected a JSON object", p.display())));
            }
            merge_json(&mut value, file);
        }
        for o in overrides {
            let mut patch = Value::Object(Default::default());
            apply_override(&mut patch, o)?;
            merge_json(&mut value, patch);
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = cfg.world_path.take() {
            cfg.world = WorldSpec::from_json_file(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        self.world.validate().map_err(config)?;
        self.settings.validate().map_err(config)?;
        benchmark_budget(&self.benchmark)?;
        if self.max_new_tokens == Some(0) {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if let CorpusSource::Testbed { n_images: 0 } = self.corpus {
            return Err(Error::Config("the corpus is empty".into()));
        }
        let renderer_needed = self.method.needs_renderer() || self.methods.iter().any(|m| m.needs_renderer());
        if let BackendConfig::Remote { t2i_url: None, .. } = self.backend {
            if renderer_needed {
                return Err(Error::Config(
                    "method convis needs a text-to-image backend: set backend.t2i_url".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.max_new_tokens
            .unwrap_or_else(|| benchmark_budget(&self.benchmark).expect("validated benchmark"))
    }

    /// Hash of everything that influences results. Where outputs go and
    /// how many threads run do not count.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
            map.remove("parallelism");
        }
        config_hash(&v)
    }

    pub fn backend_label(&self) -> &'static str {
        match self.backend {
            BackendConfig::Testbed => "testbed",
            BackendConfig::Remote { .. } => "remote",
            BackendConfig::Replay { .. } => "replay",
        }
    }

    /// Builds the configured backend. Nothing is contacted yet.
    pub fn open_backend(&self) -> Result<Arc<dyn Backend>> {
        Ok(match &self.backend {
            BackendConfig::Testbed => Arc::new(TestbedBackend::new(self.world.clone())?),
            BackendConfig::Remote {
                mllm_url,
                t2i_url,
                http,
            } => {
                let mllm: Arc<dyn Backend> = Arc::new(RemoteBackend::new(mllm_url.clone(), http.clone()));
                match t2i_url {
                    Some(t) if t != mllm_url => Arc::new(SplitBackend {
                        mllm,
                        t2i: Arc::new(RemoteBackend::new(t.clone(), http.clone())),
                    }),
                    _ => mllm,
                }
            }
            BackendConfig::Replay { transcript } => Arc::new(ReplayBackend::from_path(transcript)?),
        })
    }
}

/// What `decode` writes to `response.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFile {
    pub image_ref: String,
    pub prompt: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub stopped_by: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub response: ResponseFile,
    pub trace: Option<Vec<crate::convis::TraceLine>>,
    pub captions: Vec<CaptionRecord>,
}

impl DecodeOutcome {
    /// Writes `response.json`, and for ConVis also `trace.jsonl` and
    /// `captions.jsonl`, into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("response.json"),
            serde_json::to_string_pretty(&self.response)? + "\n",
        )?;
        if let Some(trace) = &self.trace {
            let mut out = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
            write_trace_jsonl(trace, &mut out)?;
            out.flush()?;
            let mut out = BufWriter::new(File::create(dir.join("captions.jsonl"))?);
            for c in &self.captions {
                serde_json::to_writer(&mut out, c)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Ok(())
    }
}

/// Registers `image_ref` and decodes one response with the configured method.
pub fn run_decode(cfg: &RunConfig, backend: Arc<dyn Backend>, image_ref: &str) -> Result<DecodeOutcome> {
    let session = Session::open(backend)?;
    let image = session.register_image(None, Some(image_ref))?;
    let prompt = session.tokenize(&cfg.prompt)?;
    let t2i = cfg.method.needs_renderer().then_some(&session);
    let seed = cfg.seeds[0];
    let r = respond(cfg.method, &session, t2i, &image, &prompt, cfg.budget(), &cfg.settings, seed)?;
    let text = session.detokenize(r.result.tokens.without_eos(session.eos_id()))?;
    let trace = match &r.trace {
        Some(t) => {
            let mut words = std::collections::HashMap::new();
            for s in &t.steps {
                if !words.contains_key(&s.token) {
                    let w = if s.token == session.eos_id() {
                        "<eos>".to_string()
                    } else {
                        session.detokenize(&[s.token])?
                    };
                    words.insert(s.token, w);
                }
            }
            Some(t.lines(|id| words[&id].clone()))
        }
        None => None,
    };
    Ok(DecodeOutcome {
        response: ResponseFile {
            image_ref: image_ref.to_string(),
            prompt: cfg.prompt.clone(),
            tokens: r.result.tokens.0.clone(),
            text,
            stopped_by: r.result.stopped_by,
        },
        trace,
        captions: r.captions,
    })
}

fn corpus_for_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<CorpusImage>> {
    let images: Vec<CorpusImage> = match &cfg.corpus {
        CorpusSource::Testbed { n_images } => make_corpus(&cfg.world, *n_images, seed)
            .into_iter()
            .map(|item| CorpusImage {
                image_ref: item.image.id,
                ground_truth: item.annotation.into_iter().collect(),
            })
            .collect(),
        CorpusSource::File { path } => read_jsonl::<CorpusRecord>(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .into_iter()
            .map(|r| CorpusImage {
                image_ref: r.image_ref,
                ground_truth: r.ground_truth.unwrap_or_default(),
            })
            .collect(),
    };
    if images.is_empty() {
        return Err(Error::Config("the corpus is empty".into()));
    }
    Ok(images)
}

/// Captions the corpus with every configured method and seed, writes the
/// captions of each run and returns the report. Only CHAIR runs are scored.
pub fn run_benchmark(cfg: &RunConfig, backend: Arc<dyn Backend>, out_dir: Option<&Path>) -> Result<Report> {
    let session = Session::open(backend)?;
    let prompt = session.tokenize(&cfg.prompt)?;
    let scored = cfg.benchmark.eq_ignore_ascii_case("chair");
    let lexicon = cfg.world.lexicon();
    let hash = cfg.hash()?;
    let mut report = Report::default();
    for &method in &cfg.methods {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let images = corpus_for_seed(cfg, seed)?;
            let t2i = method.needs_renderer().then_some(&session);
            let records = caption_corpus(method, &session, t2i, &images, &prompt, cfg.budget(), &cfg.settings, seed)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                let mut out = BufWriter::new(File::create(dir.join(format!("captions_{method}_s{seed}.jsonl")))?);
                for r in &records {
                    serde_json::to_writer(&mut out, r)?;
                    out.write_all(b"\n")?;
                }
                out.flush()?;
            }
            log::info!("{method} seed {seed}: {} responses", records.len());
            if scored {
                let chair = chair_scores(&records, &lexicon)?;
                runs.push(SeedRun {
                    method: method.to_string(),
                    seed,
                    n_captions: records.len(),
                    chair_s: chair.chair_s,
                    chair_i: chair.chair_i,
                });
            }
        }
        if scored {
            report
                .rows
                .push(ReportRow::aggregate(method.name(), cfg.backend_label(), &hash, &runs));
            report.runs.extend(runs);
        }
    }
    if let Some(dir) = out_dir {
        report.write(&dir.join("report"))?;
    }
    Ok(report)
}

/// Turns a trace file into `step,token,kl` CSV rows. Infinite divergences
/// are written as `inf`.
pub fn kl_plot(trace_path: &Path) -> Result<String> {
    let lines = read_trace_jsonl(trace_path)?;
    if lines.is_empty() {
        return Err(Error::Metric(format!("{} holds no steps", trace_path.display())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Metric(e.to_string());
    w.write_record(["step", "token", "kl"]).map_err(csv_err)?;
    for l in &lines {
        let kl = l.kl.map_or_else(|| "inf".to_string(), |k| k.to_string());
        w.write_record([l.step.to_string(), l.token_text.clone(), kl])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Runs a decode with every backend exchange streamed to `transcript`.
pub fn record_decode(cfg: &RunConfig, image_ref: &str, transcript: &Path) -> Result<DecodeOutcome> {
    let sink = Box::new(BufWriter::new(File::create(transcript)?));
    let recorder = Arc::new(RecordingBackend::streaming(cfg.open_backend()?, sink));
    run_decode(cfg, recorder, image_ref)
}

/// Serves the configured backend on `addr`, recording every exchange.
pub fn record_proxy(cfg: &RunConfig, addr: &str, transcript: &Path) -> Result<ProtocolServer> {
    let sink = Box::new(File::create(transcript)?);
    let recorder = Arc::new(RecordingBackend::streaming(cfg.open_backend()?, sink));
    Ok(ProtocolServer::start(recorder, addr, 4)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub exchanges: usize,
    pub unconsumed: usize,
    pub response: ResponseFile,
}

/// Re-runs a decode against a transcript. Fails if the engine asks for
/// anything not recorded, leaves recorded exchanges unused, or (given
/// `expected`) produces a different response.
pub fn replay_verify(
    cfg: &RunConfig,
    transcript: &Path,
    image_ref: &str,
    expected: Option<&ResponseFile>,
) -> Result<VerifyReport> {
    let replay = Arc::new(ReplayBackend::from_path(transcript)?);
    let outcome = run_decode(cfg, replay.clone(), image_ref)?;
    let unconsumed = replay.unconsumed();
    if unconsumed > 0 {
        return Err(BackendError::Protocol(format!(
            "replay left {unconsumed} of {} recorded exchanges unused",
            replay.total()
        ))
        .into());
    }
    if let Some(exp) = expected {
        if exp != &outcome.response {
            return Err(BackendError::Protocol(format!(
                "replayed response {:?} differs from expected {:?}",
                outcome.response.text, exp.text
            ))
            .into());
        }
    }
    Ok(VerifyReport {
        exchanges: replay.total(),
        unconsumed,
        response: outcome.response,
    })
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_METRIC: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::InvalidParameter { .. } | Error::Json(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Metric(_) => EXIT_METRIC,
        _ => EXIT_BACKEND,
    }
}
