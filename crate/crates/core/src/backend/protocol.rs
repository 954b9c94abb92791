//! The `convis/1` wire protocol.
//!
//! Every exchange is a POST of a JSON object to one of six paths. Requests
//! and responses are plain serde types; [`canonical_json`] gives the byte
//! form used by transcripts (sorted keys, shortest round-trip floats).
//! Masked logits travel as `null`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BackendError;
use crate::logits::TokenId;

pub const PROTOCOL_VERSION: &str = "convis/1";

pub const CAP_LOGITS: &str = "logits";
pub const CAP_TOKENIZE: &str = "tokenize";
pub const CAP_GENERATE_IMAGE: &str = "generate_image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandshakeInfo {
    pub vocab_size: usize,
    pub eos_id: TokenId,
    pub bos_id: Option<TokenId>,
    pub capabilities: Vec<String>,
    pub protocol: String,
}

impl HandshakeInfo {
    pub fn has(&self, capability: &str) -> bool {
        self.capabilities.iter().any(|c| c == capability)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsRequest {
    pub image_id: String,
    pub prompt_ids: Vec<TokenId>,
    pub prefix_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateImageRequest {
    pub caption: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokenizeRequest {
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterImageRequest {
    pub bytes_b64: Option<String>,
    #[serde(rename = "ref")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Handshake,
    Logits(LogitsRequest),
    GenerateImage(GenerateImageRequest),
    Tokenize(TokenizeRequest),
    Detokenize(DetokenizeRequest),
    RegisterImage(RegisterImageRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsResponse {
    pub logits: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageResponse {
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdsResponse {
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Handshake(HandshakeInfo),
    Logits(LogitsResponse),
    Image(ImageResponse),
    Ids(IdsResponse),
    Text(TextResponse),
}

/// Error body: `{"error": {"kind": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, body: Value) -> Result<T, BackendError> {
    serde_json::from_value(body).map_err(|e| BackendError::Protocol(format!("{what}: {e}")))
}

impl Request {
    pub fn path(&self) -> &'static str {
        match self {
            Request::Handshake => "/v1/handshake",
            Request::Logits(_) => "/v1/logits",
            Request::GenerateImage(_) => "/v1/generate_image",
            Request::Tokenize(_) => "/v1/tokenize",
            Request::Detokenize(_) => "/v1/detokenize",
            Request::RegisterImage(_) => "/v1/register_image",
        }
    }

    pub fn body(&self) -> Value {
        let body = match self {
            Request::Handshake => Ok(Value::Object(Default::default())),
            Request::Logits(r) => serde_json::to_value(r),
            Request::GenerateImage(r) => serde_json::to_value(r),
            Request::Tokenize(r) => serde_json::to_value(r),
            Request::Detokenize(r) => serde_json::to_value(r),
            Request::RegisterImage(r) => serde_json::to_value(r),
        };
        body.expect("request types serialize")
    }

    pub fn from_parts(path: &str, body: Value) -> Result<Self, BackendError> {
        let bad = |e: BackendError| match e {
            BackendError::Protocol(m) => BackendError::BadRequest(m),
            other => other,
        };
        Ok(match path {
            "/v1/handshake" => Request::Handshake,
            "/v1/logits" => Request::Logits(parse(path, body).map_err(bad)?),
            "/v1/generate_image" => Request::GenerateImage(parse(path, body).map_err(bad)?),
            "/v1/tokenize" => Request::Tokenize(parse(path, body).map_err(bad)?),
            "/v1/detokenize" => Request::Detokenize(parse(path, body).map_err(bad)?),
            "/v1/register_image" => Request::RegisterImage(parse(path, body).map_err(bad)?),
            other => return Err(BackendError::BadRequest(format!("unknown path {other}"))),
        })
    }

    /// `{"body": ..., "path": ...}`, the transcript form of a request.
    pub fn to_json(&self) -> Value {
        serde_json::json!({ "path": self.path(), "body": self.body() })
    }

    pub fn from_json(value: &Value) -> Result<Self, BackendError> {
        let path = value
            .get("path")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol("request without path".into()))?;
        let body = value.get("body").cloned().unwrap_or(Value::Null);
        Self::from_parts(path, body).map_err(|e| match e {
            BackendError::BadRequest(m) => BackendError::Protocol(m),
            other => other,
        })
    }

    pub fn canonical(&self) -> String {
        canonical_json(&self.to_json())
    }
}

impl Response {
    pub fn to_json(&self) -> Value {
        let value = match self {
            Response::Handshake(r) => serde_json::to_value(r),
            Response::Logits(r) => serde_json::to_value(r),
            Response::Image(r) => serde_json::to_value(r),
            Response::Ids(r) => serde_json::to_value(r),
            Response::Text(r) => serde_json::to_value(r),
        };
        value.expect("response types serialize")
    }

    /// Parses a success body for `request`. Error bodies are turned into
    /// the matching [`BackendError`].
    pub fn from_json(request: &Request, value: Value) -> Result<Self, BackendError> {
        if value.get("error").is_some() {
            let body: ErrorBody = parse("error body", value)?;
            return Err(BackendError::from_wire(&body.error));
        }
        let path = request.path();
        Ok(match request {
            Request::Handshake => Response::Handshake(parse(path, value)?),
            Request::Logits(_) => Response::Logits(parse(path, value)?),
            Request::GenerateImage(_) | Request::RegisterImage(_) => Response::Image(parse(path, value)?),
            Request::Tokenize(_) => Response::Ids(parse(path, value)?),
            Request::Detokenize(_) => Response::Text(parse(path, value)?),
        })
    }
}

/// Encodes an outcome as the JSON body a server sends back.
pub fn outcome_json(outcome: &Result<Response, BackendError>) -> Value {
    match outcome {
        Ok(r) => r.to_json(),
        Err(e) => serde_json::to_value(ErrorBody { error: e.to_wire() }).expect("error body"),
    }
}

/// Sorted-key, whitespace-free JSON. Floats use the shortest representation
/// that round-trips.
pub fn canonical_json(value: &Value) -> String {
    fn sort(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let mut entries: Vec<_> = map.iter().collect();
                entries.sort_by(|a, b| a.0.cmp(b.0));
                Value::Object(entries.into_iter().map(|(k, v)| (k.clone(), sort(v))).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(value)).expect("json values serialize")
}
