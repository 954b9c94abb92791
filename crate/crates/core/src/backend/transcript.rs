//! Record and replay of backend exchanges.
//!
//! A transcript is JSON-lines, one `{"request", "response", "seq"}` object per
//! exchange, every line in canonical form. The protocol version is the one
//! announced by the first recorded handshake.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::protocol::{canonical_json, outcome_json, PROTOCOL_VERSION};
use super::{Backend, BackendError, BackendResult, Request, Response};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub request: Value,
    pub response: Value,
}

impl TranscriptEntry {
    pub fn to_line(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("entry serializes"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// Protocol tag taken from the first handshake response.
    pub fn protocol(&self) -> String {
        self.entries
            .iter()
            .find(|e| e.request.get("path").and_then(Value::as_str) == Some("/v1/handshake"))
            .and_then(|e| e.response.get("protocol"))
            .and_then(Value::as_str)
            .unwrap_or(PROTOCOL_VERSION)
            .to_string()
    }

    pub fn parse(text: &str) -> BackendResult<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Protocol(format!("transcript line {}: {e}", lineno + 1)))?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> BackendResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

/// Wraps a backend and logs every exchange, errors included.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<TranscriptEntry>>,
    sink: Option<Mutex<Box<dyn Write + Send>>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
            sink: None,
        }
    }

    /// Also streams each line to `sink` as it is recorded.
    pub fn streaming(inner: B, sink: Box<dyn Write + Send>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
            sink: Some(Mutex::new(sink)),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            entries: self.log.lock().expect("recorder lock").clone(),
        }
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        let outcome = self.inner.call(request);
        let mut log = self.log.lock().expect("recorder lock");
        let entry = TranscriptEntry {
            seq: log.len() as u64,
            request: request.to_json(),
            response: outcome_json(&outcome),
        };
        if let Some(sink) = &self.sink {
            let mut sink = sink.lock().expect("sink lock");
            if let Err(e) = writeln!(sink, "{}", entry.to_line()).and_then(|_| sink.flush()) {
                log::error!("transcript write failed: {e}");
            }
        }
        log.push(entry);
        outcome
    }
}

struct ReplayState {
    queues: HashMap<String, VecDeque<Value>>,
    last: HashMap<String, Value>,
    served: usize,
}

/// Serves recorded responses for byte-identical canonical requests.
///
/// Repeated identical requests are answered in recorded order; once a
/// request's recordings are used up its last response is repeated.
pub struct ReplayBackend {
    state: Mutex<ReplayState>,
    total: usize,
}

impl ReplayBackend {
    pub fn new(transcript: &Transcript) -> BackendResult<Self> {
        let mut queues: HashMap<String, VecDeque<Value>> = HashMap::new();
        for entry in &transcript.entries {
            let request = Request::from_json(&entry.request)
                .map_err(|e| BackendError::Protocol(format!("transcript seq {}: {e}", entry.seq)))?;
            queues
                .entry(request.canonical())
                .or_default()
                .push_back(entry.response.clone());
        }
        Ok(Self {
            state: Mutex::new(ReplayState {
                queues,
                last: HashMap::new(),
                served: 0,
            }),
            total: transcript.entries.len(),
        })
    }

    pub fn from_path(path: &Path) -> BackendResult<Self> {
        Self::new(&Transcript::read(path)?)
    }

    /// Recorded exchanges that were never served.
    pub fn unconsumed(&self) -> usize {
        let state = self.state.lock().expect("replay lock");
        state.queues.values().map(VecDeque::len).sum()
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

impl Backend for ReplayBackend {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        let key = request.canonical();
        let value = {
            let mut state = self.state.lock().expect("replay lock");
            let ReplayState { queues, last, served } = &mut *state;
            match queues.get_mut(&key) {
                None => return Err(BackendError::ReplayMiss(key)),
                Some(queue) => match queue.pop_front() {
                    Some(v) => {
                        *served += 1;
                        last.insert(key.clone(), v.clone());
                        v
                    }
                    None => last.get(&key).cloned().expect("drained queue has a last response"),
                },
            }
        };
        Response::from_json(request, value)
    }
}

/// Reads a JSON-lines file of arbitrary records.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> crate::Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{ImageHandle, Session, TableBackend};
    use super::*;
    use std::sync::Arc;

    fn table() -> TableBackend {
        TableBackend {
            eos_id: 0,
            vocab_size: 2,
            rows: [("a".to_string(), vec![Some(0.25), Some(-1.5)])].into_iter().collect(),
        }
    }

    #[test]
    fn replay_returns_recorded_vector_exactly() {
        let rec = Arc::new(RecordingBackend::new(table()));
        let live = Session::open(rec.clone()).unwrap();
        let img = ImageHandle::original("a");
        let expected = live.query_logits(&img, &[1], &[0]).unwrap();
        let _ = live.query_logits(&ImageHandle::original("b"), &[], &[]);
        let transcript = Transcript::parse(&rec.transcript().to_jsonl()).unwrap();
        assert_eq!(transcript.entries.len(), 3);
        assert_eq!(transcript.protocol(), PROTOCOL_VERSION);

        let replay = Arc::new(ReplayBackend::new(&transcript).unwrap());
        let s = Session::open(replay.clone()).unwrap();
        assert_eq!(s.query_logits(&img, &[1], &[0]).unwrap(), expected);
        assert_eq!(
            s.query_logits(&ImageHandle::original("b"), &[], &[]).unwrap_err(),
            BackendError::UnknownImage("b".into())
        );
        assert_eq!(replay.unconsumed(), 0);
        // identical repeat is served again
        assert_eq!(s.query_logits(&img, &[1], &[0]).unwrap(), expected);
    }

    #[test]
    fn replay_rejects_unrecorded_requests() {
        let rec = RecordingBackend::new(table());
        rec.call(&Request::Handshake).unwrap();
        let replay = ReplayBackend::new(&rec.transcript()).unwrap();
        let s = Session::open(Arc::new(replay)).unwrap();
        let err = s.query_logits(&ImageHandle::original("a"), &[], &[]).unwrap_err();
        assert!(matches!(err, BackendError::ReplayMiss(_)));
    }

    #[test]
    fn lines_are_canonical() {
        let rec = RecordingBackend::new(table());
        rec.call(&Request::Handshake).unwrap();
        let line = rec.transcript().to_jsonl();
        assert!(line.starts_with(r#"{"request":{"body":{},"path":"/v1/handshake"},"response":{"#));
        assert!(line.trim_end().ends_with(r#""seq":0}"#));
    }
}
