//! HTTP clients for the remote embedding and text-generation services.
//!
//! Wire protocols:
//!
//! * embedding: `POST {endpoint}/embed` with `{"model": str, "texts": [str]}`,
//!   answered by `{"vectors": [[float]]}`; bearer token from
//!   `SIMPA_EMBED_TOKEN`.
//! * generation: `POST {endpoint}/generate` with
//!   `{"model": str, "prompt": str, "max_tokens": int}`, answered by
//!   `{"text": str}`; bearer token from `SIMPA_GEN_TOKEN`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::similarity::{BackendDescriptor, Embedder, EmbeddingVector};

pub const EMBED_TOKEN_ENV: &str = "SIMPA_EMBED_TOKEN";
pub const GEN_TOKEN_ENV: &str = "SIMPA_GEN_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpFailure {
    /// HTTP status, when a response was received.
    pub status: Option<u16>,
    pub message: String,
}

impl HttpFailure {
    /// Network errors, auth failures, throttling and server errors can
    /// succeed on retry.
    pub fn retriable(&self) -> bool {
        match self.status {
            None => true,
            Some(s) => s == 401 || s == 403 || s == 408 || s == 429 || s >= 500,
        }
    }
}

/// Minimal JSON-over-HTTP POST used by the service clients. Tests swap in
/// recorded transcripts.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, HttpFailure>;
}

/// Shared handle to a transport.
#[derive(Clone)]
pub struct Transport(Arc<dyn HttpTransport>);

impl Transport {
    pub fn new(inner: Arc<dyn HttpTransport>) -> Self {
        Transport(inner)
    }

    pub fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, HttpFailure> {
        self.0.post_json(url, bearer, body)
    }
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        UreqTransport::with_timeout(Duration::from_secs(60))
    }
}

impl UreqTransport {
    pub fn with_timeout(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, HttpFailure> {
        let mut req = self.agent.post(url);
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| HttpFailure {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(HttpFailure {
                status: Some(status),
                message: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
            });
        }
        resp.body_mut().read_json::<Value>().map_err(|e| HttpFailure {
            status: Some(status),
            message: format!("invalid JSON response: {e}"),
        })
    }
}

/// Replays canned responses in order and records every request. Used by
/// tests and offline runs.
#[derive(Default)]
pub struct RecordedTransport {
    responses: Mutex<std::collections::VecDeque<Result<Value, HttpFailure>>>,
    requests: Mutex<Vec<(String, Option<String>, Value)>>,
}

impl RecordedTransport {
    pub fn new(responses: impl IntoIterator<Item = Result<Value, HttpFailure>>) -> Self {
        RecordedTransport {
            responses: Mutex::new(responses.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<(String, Option<String>, Value)> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl HttpTransport for RecordedTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, HttpFailure> {
        self.requests
            .lock()
            .expect("poisoned")
            .push((url.to_string(), bearer.map(String::from), body.clone()));
        self.responses
            .lock()
            .expect("poisoned")
            .pop_front()
            .unwrap_or_else(|| {
                Err(HttpFailure {
                    status: None,
                    message: "no recorded response left".into(),
                })
            })
    }
}

fn endpoint_url(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path)
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Embedding backend backed by an HTTP service. Texts are sent in batches of
/// `batch_size` with at most `max_in_flight` concurrent requests.
pub struct RemoteEmbedder {
    descriptor: BackendDescriptor,
    endpoint: String,
    model: String,
    token: Option<String>,
    batch_size: usize,
    max_in_flight: usize,
    transport: Transport,
}

impl RemoteEmbedder {
    /// Reads `endpoint`, `model`, `batch_size`, `max_in_flight` and
    /// `token_env` from the descriptor config.
    pub fn from_descriptor(descriptor: BackendDescriptor, transport: Transport) -> Result<Self> {
        let cfg = &descriptor.config;
        let id = descriptor.backend_id.clone();
        let endpoint = cfg
            .get("endpoint")
            .cloned()
            .ok_or_else(|| Error::Config(format!("remote backend {id} needs config.endpoint")))?;
        let model = cfg.get("model").cloned().unwrap_or_default();
        let parse = |key: &str, default: usize| -> Result<usize> {
            match cfg.get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| Error::Config(format!("backend {id}: {key} must be a positive integer"))),
            }
        };
        let batch_size = parse("batch_size", 32)?;
        let max_in_flight = parse("max_in_flight", 4)?;
        let token_env = cfg.get("token_env").map(String::as_str).unwrap_or(EMBED_TOKEN_ENV);
        let token = std::env::var(token_env).ok();
        Ok(RemoteEmbedder {
            descriptor,
            endpoint,
            model,
            token,
            batch_size,
            max_in_flight,
            transport,
        })
    }

    fn embed_chunk(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let id = &self.descriptor.backend_id;
        let body = json!({ "model": self.model, "texts": texts });
        let value = self
            .transport
            .post_json(&endpoint_url(&self.endpoint, "embed"), self.token.as_deref(), &body)
            .map_err(|f| Error::Backend {
                backend_id: id.clone(),
                retriable: f.retriable(),
                message: f.message,
            })?;
        let bad = |message: String| Error::Backend {
            backend_id: id.clone(),
            retriable: false,
            message,
        };
        let resp: EmbedResponse = serde_json::from_value(value).map_err(|e| bad(format!("malformed response: {e}")))?;
        if resp.vectors.len() != texts.len() {
            return Err(bad(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.descriptor.dim {
                    return Err(bad(format!("expected dim {}, got {}", self.descriptor.dim, v.len())));
                }
                EmbeddingVector::dense(id.as_str(), v).map_err(|e| bad(e.to_string()))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let chunks: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let results: Vec<Mutex<Option<Result<Vec<EmbeddingVector>>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(chunks.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    let r = self.embed_chunk(chunks[i]);
                    let failed = r.is_err();
                    *results[i].lock().expect("poisoned") = Some(r);
                    if failed {
                        // stop handing out further chunks
                        next.store(chunks.len(), Ordering::SeqCst);
                        break;
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for slot in results {
            match slot.into_inner().expect("poisoned") {
                Some(Ok(v)) => out.extend(v),
                Some(Err(e)) => return Err(e),
                None => {
                    return Err(Error::Backend {
                        backend_id: self.descriptor.backend_id.clone(),
                        retriable: true,
                        message: "batch abandoned after an earlier failure".into(),
                    })
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
}

fn default_max_tokens() -> u32 {
    2048
}

/// Client for the text-generation service.
#[derive(Clone)]
pub struct GenerationService {
    config: GenerationConfig,
    token: Option<String>,
    transport: Transport,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    text: String,
}

impl GenerationService {
    pub fn new(config: GenerationConfig, transport: Transport) -> Self {
        let env = config.token_env.as_deref().unwrap_or(GEN_TOKEN_ENV);
        let token = std::env::var(env).ok();
        GenerationService {
            config,
            token,
            transport,
        }
    }

    pub fn generate(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
        });
        let err = |retriable: bool, message: String| Error::Service {
            service: self.config.endpoint.clone(),
            retriable,
            message,
        };
        let value = self
            .transport
            .post_json(&endpoint_url(&self.config.endpoint, "generate"), self.token.as_deref(), &body)
            .map_err(|f| err(f.retriable(), f.message))?;
        let resp: GenerateResponse =
            serde_json::from_value(value).map_err(|e| err(false, format!("malformed response: {e}")))?;
        Ok(resp.text)
    }
}
