//! The boundary to model inference.
//!
//! Every backend (the synthetic testbed, a remote bridge over HTTP, a
//! transcript replay) answers the same [`Request`]s through [`Backend::call`].
//! [`Session`] sits on top: it performs the handshake, holds the vocabulary
//! and checks every response against it before the decoders see it.

pub mod http;
pub mod protocol;
pub mod transcript;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::protocol::{HandshakeInfo, Request, Response};
use self::protocol::*;
use crate::logits::{LogitVector, TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("vocabulary size mismatch: handshake said {expected}, response has {found}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("capability `{0}` not offered by backend")]
    CapabilityMissing(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("request not in transcript: {0}")]
    ReplayMiss(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl BackendError {
    /// Transport-level failures may succeed on a retry; everything else is
    /// a property of the request or the backend.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::Transport(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::UnknownImage(_) => "unknown_image",
            BackendError::VocabMismatch { .. } => "vocab_mismatch",
            BackendError::Timeout(_) => "timeout",
            BackendError::Transport(_) => "transport",
            BackendError::Protocol(_) => "protocol",
            BackendError::Refused(_) => "refused",
            BackendError::CapabilityMissing(_) => "capability_missing",
            BackendError::BadRequest(_) => "bad_request",
            BackendError::ReplayMiss(_) => "replay_miss",
            BackendError::Internal(_) => "internal",
        }
    }

    pub fn to_wire(&self) -> ErrorDetail {
        let message = match self {
            BackendError::UnknownImage(m)
            | BackendError::Timeout(m)
            | BackendError::Transport(m)
            | BackendError::Protocol(m)
            | BackendError::Refused(m)
            | BackendError::CapabilityMissing(m)
            | BackendError::BadRequest(m)
            | BackendError::ReplayMiss(m)
            | BackendError::Internal(m) => m.clone(),
            BackendError::VocabMismatch { .. } => self.to_string(),
        };
        ErrorDetail {
            kind: self.kind().to_string(),
            message,
        }
    }

    pub fn from_wire(detail: &ErrorDetail) -> Self {
        let m = detail.message.clone();
        match detail.kind.as_str() {
            "unknown_image" => BackendError::UnknownImage(m),
            "timeout" => BackendError::Timeout(m),
            "transport" => BackendError::Transport(m),
            "refused" => BackendError::Refused(m),
            "capability_missing" => BackendError::CapabilityMissing(m),
            "bad_request" => BackendError::BadRequest(m),
            "internal" => BackendError::Internal(m),
            _ => BackendError::Protocol(format!("{}: {m}", detail.kind)),
        }
    }

    /// HTTP status used by the protocol server for this error.
    pub fn status(&self) -> u16 {
        match self {
            BackendError::UnknownImage(_) => 404,
            BackendError::Refused(_) => 422,
            BackendError::CapabilityMissing(_) => 501,
            BackendError::BadRequest(_) => 400,
            BackendError::Timeout(_) => 504,
            _ => 500,
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// Anything that answers protocol requests.
pub trait Backend: Send + Sync {
    fn call(&self, request: &Request) -> BackendResult<Response>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        (**self).call(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        (**self).call(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageOrigin {
    Original,
    Generated,
}

/// Opaque reference to an image living inside a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageHandle {
    pub id: String,
    pub origin: ImageOrigin,
    /// The caption a generated image was rendered from.
    pub source_caption: Option<String>,
}

impl ImageHandle {
    pub fn original(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            origin: ImageOrigin::Original,
            source_caption: None,
        }
    }

    pub fn generated(id: impl Into<String>, caption: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            origin: ImageOrigin::Generated,
            source_caption: Some(caption.into()),
        }
    }
}

fn unexpected(what: &str, got: &Response) -> BackendError {
    BackendError::Protocol(format!("expected {what} response, got {got:?}"))
}

/// A handshaken connection to one backend.
#[derive(Clone)]
pub struct Session {
    backend: Arc<dyn Backend>,
    info: HandshakeInfo,
    vocab: Vocabulary,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("info", &self.info).finish()
    }
}

impl Session {
    pub fn open(backend: Arc<dyn Backend>) -> BackendResult<Self> {
        let info = match backend.call(&Request::Handshake)? {
            Response::Handshake(info) => info,
            other => return Err(unexpected("handshake", &other)),
        };
        if info.protocol != PROTOCOL_VERSION {
            return Err(BackendError::Protocol(format!(
                "backend speaks {}, expected {PROTOCOL_VERSION}",
                info.protocol
            )));
        }
        let vocab = Vocabulary::anonymous(info.vocab_size, info.eos_id, info.bos_id)
            .map_err(|e| BackendError::Protocol(format!("handshake: {e}")))?;
        Ok(Self { backend, info, vocab })
    }

    pub fn info(&self) -> &HandshakeInfo {
        &self.info
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn eos_id(&self) -> TokenId {
        self.vocab.eos_id()
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    fn require(&self, capability: &str) -> BackendResult<()> {
        if self.info.has(capability) {
            Ok(())
        } else {
            Err(BackendError::CapabilityMissing(capability.to_string()))
        }
    }

    pub fn query_logits(
        &self,
        image: &ImageHandle,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> BackendResult<LogitVector> {
        self.require(CAP_LOGITS)?;
        let request = Request::Logits(LogitsRequest {
            image_id: image.id.clone(),
            prompt_ids: prompt.to_vec(),
            prefix_ids: prefix.to_vec(),
        });
        match self.backend.call(&request)? {
            Response::Logits(r) => {
                if r.logits.len() != self.info.vocab_size {
                    return Err(BackendError::VocabMismatch {
                        expected: self.info.vocab_size,
                        found: r.logits.len(),
                    });
                }
                LogitVector::from_wire(&r.logits).map_err(|e| BackendError::Protocol(e.to_string()))
            }
            other => Err(unexpected("logits", &other)),
        }
    }

    pub fn generate_image(&self, caption: &str, seed: u64) -> BackendResult<ImageHandle> {
        self.require(CAP_GENERATE_IMAGE)?;
        let request = Request::GenerateImage(GenerateImageRequest {
            caption: caption.to_string(),
            seed,
        });
        match self.backend.call(&request)? {
            Response::Image(r) => Ok(ImageHandle::generated(r.image_id, caption)),
            other => Err(unexpected("image", &other)),
        }
    }

    pub fn register_image(&self, bytes: Option<&[u8]>, reference: Option<&str>) -> BackendResult<ImageHandle> {
        use base64::Engine;
        let request = Request::RegisterImage(RegisterImageRequest {
            bytes_b64: bytes.map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
            reference: reference.map(str::to_string),
        });
        match self.backend.call(&request)? {
            Response::Image(r) => Ok(ImageHandle::original(r.image_id)),
            other => Err(unexpected("image", &other)),
        }
    }

    pub fn tokenize(&self, text: &str) -> BackendResult<TokenSequence> {
        self.require(CAP_TOKENIZE)?;
        let request = Request::Tokenize(TokenizeRequest { text: text.to_string() });
        match self.backend.call(&request)? {
            Response::Ids(r) => {
                let ids = TokenSequence::new(r.ids);
                ids.validate(&self.vocab)
                    .map_err(|e| BackendError::Protocol(e.to_string()))?;
                Ok(ids)
            }
            other => Err(unexpected("ids", &other)),
        }
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> BackendResult<String> {
        self.require(CAP_TOKENIZE)?;
        let request = Request::Detokenize(DetokenizeRequest { ids: ids.to_vec() });
        match self.backend.call(&request)? {
            Response::Text(r) => Ok(r.text),
            other => Err(unexpected("text", &other)),
        }
    }
}

/// A fixed-table backend: the logits depend only on the image id.
#[derive(Debug, Clone)]
pub struct TableBackend {
    pub eos_id: TokenId,
    pub vocab_size: usize,
    pub rows: std::collections::BTreeMap<String, Vec<Option<f64>>>,
}

impl Backend for TableBackend {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        match request {
            Request::Handshake => Ok(Response::Handshake(HandshakeInfo {
                vocab_size: self.vocab_size,
                eos_id: self.eos_id,
                bos_id: None,
                capabilities: vec![CAP_LOGITS.to_string()],
                protocol: PROTOCOL_VERSION.to_string(),
            })),
            Request::Logits(r) => self
                .rows
                .get(&r.image_id)
                .map(|row| Response::Logits(LogitsResponse { logits: row.clone() }))
                .ok_or_else(|| BackendError::UnknownImage(r.image_id.clone())),
            Request::RegisterImage(r) => {
                let id = r.reference.clone().unwrap_or_default();
                if self.rows.contains_key(&id) {
                    Ok(Response::Image(ImageResponse { image_id: id }))
                } else {
                    Err(BackendError::UnknownImage(id))
                }
            }
            _ => Err(BackendError::CapabilityMissing(request.path().to_string())),
        }
    }
}

/// Sends image generation to a separate renderer and everything else to the
/// language model. The renderer must store its images where the model can
/// read them.
pub struct SplitBackend {
    pub mllm: Arc<dyn Backend>,
    pub t2i: Arc<dyn Backend>,
}

impl Backend for SplitBackend {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        match request {
            Request::GenerateImage(_) => self.t2i.call(request),
            Request::Handshake => {
                let Response::Handshake(mut info) = self.mllm.call(request)? else {
                    return Err(BackendError::Protocol("handshake returned another response type".into()));
                };
                if let Response::Handshake(t2i) = self.t2i.call(request)? {
                    if t2i.has(CAP_GENERATE_IMAGE) && !info.has(CAP_GENERATE_IMAGE) {
                        info.capabilities.push(CAP_GENERATE_IMAGE.to_string());
                    }
                }
                Ok(Response::Handshake(info))
            }
            _ => self.mllm.call(request),
        }
    }
}
