//! Uniform client over chat-completion endpoints.
//!
//! A [`Gateway`] wraps one endpoint (HTTP or the deterministic mock selected
//! by a `mock://` base URL) behind a persistent content-addressed response
//! cache, retry-with-backoff, and a shared concurrency limit. Everything the
//! rest of the harness does with a model goes through [`Gateway::complete`]
//! and [`Gateway::sample_n`].

mod cache;
mod http;
mod mock;

pub use cache::ResponseCache;
pub use mock::{MockCall, MockCallLog, MockScript};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

/// Chat role of one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One message: text plus any attached images (PNG bytes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<Vec<u8>>,
}

impl ChatMessage {
    pub fn text(role: Role, text: String) -> Self {
        ChatMessage {
            role,
            text,
            images: Vec::new(),
        }
    }

    pub fn with_image(mut self, png_bytes: Vec<u8>) -> Self {
        self.images.push(png_bytes);
        self
    }
}

/// Decoding parameters for one call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Base seed; per-sample calls offset it by the sample index so repeated
    /// samples differ while staying reproducible.
    pub seed: Option<i64>,
    pub top_p: f64,
}

impl SamplingParams {
    pub fn greedy(max_tokens: u32, seed: i64) -> Self {
        SamplingParams {
            temperature: 0.0,
            max_tokens,
            seed: Some(seed),
            top_p: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be finite and ≥ 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidParams(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Static description of one endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointSpec {
    /// Unique name within a run configuration; also the cache subdirectory.
    pub name: String,
    /// `http(s)://…` for real endpoints, `mock://<script-path>` for the
    /// offline backend.
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token; empty means no auth
    /// header (e.g. local or mock endpoints).
    pub api_key_env: String,
    pub supports_images: bool,
    pub supports_logprobs: bool,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl EndpointSpec {
    /// Convenience constructor for a mock endpoint backed by `script_path`.
    pub fn mock(name: &str, model_id: &str, script_path: &str) -> Self {
        EndpointSpec {
            name: name.to_string(),
            base_url: format!("mock://{script_path}"),
            model_id: model_id.to_string(),
            api_key_env: String::new(),
            supports_images: true,
            supports_logprobs: true,
            timeout: Duration::from_secs(30),
            max_retries: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.name.is_empty() {
            return Err(GatewayError::InvalidParams("endpoint name must be non-empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(GatewayError::InvalidParams(format!(
                "endpoint {} timeout must be > 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// One completed call: what was sent, what came back, and where from.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub request_fingerprint: String,
    pub messages: Vec<ChatMessage>,
    pub response_text: String,
    pub token_logprobs: Option<Vec<f64>>,
    pub latency: Duration,
    pub from_cache: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidParams(String),
    #[error("endpoint {endpoint} does not support images")]
    ImagesUnsupported { endpoint: String },
    #[error("endpoint {endpoint} does not support log-probabilities")]
    LogprobsUnsupported { endpoint: String },
    #[error("log-probabilities requested but absent from the response of {endpoint}")]
    LogprobsMissing { endpoint: String },
    #[error("environment variable {var} (API key for {endpoint}) is not set")]
    MissingApiKey { endpoint: String, var: String },
    #[error("transport failure talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("endpoint {endpoint} returned HTTP {status}: {message}")]
    Http {
        endpoint: String,
        status: u16,
        message: String,
    },
    #[error("mock endpoint {endpoint} has no rule matching {question:?} and no fallback")]
    MockUnmatched { endpoint: String, question: String },
    #[error("failed to load mock script {path}: {message}")]
    MockScript { path: String, message: String },
    #[error("response from {endpoint} contained a positive log-probability")]
    PositiveLogprob { endpoint: String },
    #[error("cache I/O under {dir}: {message}")]
    Cache { dir: String, message: String },
    #[error("batch of {n} samples had failures at indices {indices:?}; first error: {first}")]
    Batch {
        n: usize,
        indices: Vec<usize>,
        first: String,
    },
}

impl GatewayError {
    /// Whether retrying the same request may help.
    fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Canonical request form: everything that determines a response, hashed
/// into the cache key. Image bytes enter as SHA-256 digests.
#[derive(Serialize)]
struct CanonicalRequest<'a> {
    model: &'a str,
    messages: Vec<CanonicalMessage>,
    temperature: f64,
    max_tokens: u32,
    seed: Option<i64>,
    top_p: f64,
    logprobs: bool,
}

#[derive(Serialize)]
struct CanonicalMessage {
    role: &'static str,
    text: String,
    images: Vec<String>,
}

/// Deterministic fingerprint of (model, messages, params, logprobs flag).
pub fn request_fingerprint(
    model_id: &str,
    messages: &[ChatMessage],
    params: &SamplingParams,
    want_logprobs: bool,
) -> String {
    let canonical = CanonicalRequest {
        model: model_id,
        messages: messages
            .iter()
            .map(|m| CanonicalMessage {
                role: m.role.as_str(),
                text: m.text.clone(),
                images: m
                    .images
                    .iter()
                    .map(|bytes| hex::encode(Sha256::digest(bytes)))
                    .collect(),
            })
            .collect(),
        temperature: params.temperature,
        max_tokens: params.max_tokens,
        seed: params.seed,
        top_p: params.top_p,
        logprobs: want_logprobs,
    };
    let json = serde_json::to_vec(&canonical).expect("canonical request serializes");
    hex::encode(Sha256::digest(&json))
}

/// What a backend must produce for one request.
#[derive(Debug, Clone)]
pub struct BackendResponse {
    pub response_text: String,
    pub token_logprobs: Option<Vec<f64>>,
}

/// A fully-resolved request as handed to a backend.
#[derive(Debug)]
pub struct ChatRequest<'a> {
    pub endpoint: &'a EndpointSpec,
    pub messages: &'a [ChatMessage],
    pub params: SamplingParams,
    pub want_logprobs: bool,
    pub fingerprint: &'a str,
    pub sample_index: Option<u32>,
}

#[async_trait::async_trait]
trait Backend: Send + Sync {
    async fn execute(&self, request: &ChatRequest<'_>) -> Result<BackendResponse, GatewayError>;
}

/// Client for one endpoint: cache in front, retries behind, bounded by a
/// shared semaphore.
pub struct Gateway {
    endpoint: EndpointSpec,
    backend: Box<dyn Backend>,
    cache: ResponseCache,
    limiter: Arc<Semaphore>,
    executions: AtomicU64,
    mock_log: Option<MockCallLog>,
}

impl Gateway {
    /// Builds a gateway for `endpoint`, selecting the backend from the base
    /// URL scheme. `limiter` bounds in-flight requests across every gateway
    /// that shares it (the run-level concurrency limit).
    pub fn new(
        endpoint: EndpointSpec,
        cache_dir: &std::path::Path,
        limiter: Arc<Semaphore>,
    ) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let cache = ResponseCache::new(cache_dir.join(&endpoint.name));
        if let Some(script_path) = endpoint.base_url.strip_prefix("mock://") {
            let backend = mock::MockBackend::from_script_path(script_path)?;
            let mock_log = Some(backend.call_log());
            Ok(Gateway {
                endpoint,
                backend: Box::new(backend),
                cache,
                limiter,
                executions: AtomicU64::new(0),
                mock_log,
            })
        } else {
            let backend = http::HttpBackend::new(&endpoint)?;
            Ok(Gateway {
                endpoint,
                backend: Box::new(backend),
                cache,
                limiter,
                executions: AtomicU64::new(0),
                mock_log: None,
            })
        }
    }

    /// Builds a gateway around an in-memory mock script (no script file).
    pub fn with_mock_script(
        endpoint: EndpointSpec,
        script: MockScript,
        cache_dir: &std::path::Path,
        limiter: Arc<Semaphore>,
    ) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let cache = ResponseCache::new(cache_dir.join(&endpoint.name));
        let backend = mock::MockBackend::new(script);
        let mock_log = Some(backend.call_log());
        Ok(Gateway {
            endpoint,
            backend: Box::new(backend),
            cache,
            limiter,
            executions: AtomicU64::new(0),
            mock_log,
        })
    }

    pub fn endpoint(&self) -> &EndpointSpec {
        &self.endpoint
    }

    /// Number of backend executions performed (cache hits excluded).
    /// For HTTP endpoints this counts network calls, including retries.
    pub fn backend_calls(&self) -> u64 {
        self.executions.load(Ordering::Relaxed)
    }

    /// The mock backend's call log, if this gateway is mock-backed.
    pub fn mock_call_log(&self) -> Option<Vec<MockCall>> {
        self.mock_log.as_ref().map(|log| log.snapshot())
    }

    /// One completion. Transient failures (transport, 429, 5xx) retry up to
    /// `max_retries` times with exponential backoff (base 1s, factor 2,
    /// jitter ±20%); results are cached by request fingerprint.
    pub async fn complete(
        &self,
        messages: &[ChatMessage],
        params: SamplingParams,
        want_logprobs: bool,
    ) -> Result<Transcript, GatewayError> {
        self.complete_indexed(messages, params, want_logprobs, None).await
    }

    /// Like [`Gateway::complete`] but addressed as sample `index`: the cache
    /// key gains the index suffix and the seed is offset by it, so distinct
    /// samples of one request stay distinct and reproducible.
    pub async fn complete_indexed(
        &self,
        messages: &[ChatMessage],
        params: SamplingParams,
        want_logprobs: bool,
        index: Option<u32>,
    ) -> Result<Transcript, GatewayError> {
        params.validate()?;
        if want_logprobs && !self.endpoint.supports_logprobs {
            return Err(GatewayError::LogprobsUnsupported {
                endpoint: self.endpoint.name.clone(),
            });
        }
        if messages.iter().any(|m| !m.images.is_empty()) && !self.endpoint.supports_images {
            return Err(GatewayError::ImagesUnsupported {
                endpoint: self.endpoint.name.clone(),
            });
        }
        let effective = SamplingParams {
            seed: params.seed.map(|s| s + i64::from(index.unwrap_or(0))),
            ..params
        };
        let fingerprint =
            request_fingerprint(&self.endpoint.model_id, messages, &effective, want_logprobs);

        if let Some(hit) = self.cache.get(&fingerprint, index)? {
            return Ok(Transcript {
                request_fingerprint: fingerprint,
                messages: messages.to_vec(),
                response_text: hit.response_text,
                token_logprobs: hit.token_logprobs,
                latency: Duration::from_millis(hit.latency_ms),
                from_cache: true,
            });
        }

        let _permit = self
            .limiter
            .acquire()
            .await
            .expect("request limiter is never closed");
        let started = Instant::now();
        let request = ChatRequest {
            endpoint: &self.endpoint,
            messages,
            params: effective,
            want_logprobs,
            fingerprint: &fingerprint,
            sample_index: index,
        };

        let mut attempt = 0u32;
        let response = loop {
            self.executions.fetch_add(1, Ordering::Relaxed);
            match self.backend.execute(&request).await {
                Ok(response) => break response,
                Err(err) if err.is_retryable() && attempt < self.endpoint.max_retries => {
                    let delay = backoff_delay(attempt);
                    log::warn!(
                        "endpoint {}: attempt {} failed ({err}); retrying in {:.2}s",
                        self.endpoint.name,
                        attempt + 1,
                        delay.as_secs_f64()
                    );
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(GatewayError::Transport {
                    endpoint, message, ..
                }) => {
                    return Err(GatewayError::Transport {
                        endpoint,
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(err) => return Err(err),
            }
        };

        if let Some(logprobs) = &response.token_logprobs {
            if logprobs.iter().any(|lp| *lp > 0.0 || lp.is_nan()) {
                return Err(GatewayError::PositiveLogprob {
                    endpoint: self.endpoint.name.clone(),
                });
            }
        }
        if want_logprobs && response.token_logprobs.is_none() {
            return Err(GatewayError::LogprobsMissing {
                endpoint: self.endpoint.name.clone(),
            });
        }

        let latency = started.elapsed();
        self.cache.put(
            &fingerprint,
            index,
            &cache::CachedResponse {
                response_text: response.response_text.clone(),
                token_logprobs: response.token_logprobs.clone(),
                latency_ms: latency.as_millis() as u64,
            },
        )?;
        Ok(Transcript {
            request_fingerprint: fingerprint,
            messages: messages.to_vec(),
            response_text: response.response_text,
            token_logprobs: response.token_logprobs,
            latency,
            from_cache: false,
        })
    }

    /// `n` independent samples of the same request (indices `0..n`), issued
    /// with bounded parallelism. Any per-sample failure fails the batch,
    /// reporting which indices failed.
    pub async fn sample_n(
        &self,
        messages: &[ChatMessage],
        params: SamplingParams,
        n: usize,
        want_logprobs: bool,
    ) -> Result<Vec<Transcript>, GatewayError> {
        assert!(n >= 1, "sample_n requires n >= 1");
        let futures: Vec<_> = (0..n)
            .map(|k| self.complete_indexed(messages, params, want_logprobs, Some(k as u32)))
            .collect();
        let results = futures::future::join_all(futures).await;
        let mut transcripts = Vec::with_capacity(n);
        let mut failed = Vec::new();
        let mut first_error = None;
        for (k, result) in results.into_iter().enumerate() {
            match result {
                Ok(t) => transcripts.push(t),
                Err(e) => {
                    failed.push(k);
                    first_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if let Some(first) = first_error {
            return Err(GatewayError::Batch {
                n,
                indices: failed,
                first,
            });
        }
        Ok(transcripts)
    }
}

/// Exponential backoff with ±20% jitter: 1s, 2s, 4s, … before attempt
/// `attempt + 1`.
fn backoff_delay(attempt: u32) -> Duration {
    let base = Duration::from_secs(1).as_secs_f64() * 2f64.powi(attempt as i32);
    let jitter = rand::thread_rng().gen_range(0.8..=1.2);
    Duration::from_secs_f64(base * jitter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msgs(text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::text(Role::User, text.to_string())]
    }

    #[test]
    fn fingerprint_is_deterministic_and_input_sensitive() {
        let params = SamplingParams::greedy(64, 0);
        let a = request_fingerprint("m", &msgs("q"), &params, false);
        let b = request_fingerprint("m", &msgs("q"), &params, false);
        assert_eq!(a, b);
        assert_ne!(a, request_fingerprint("m", &msgs("q2"), &params, false));
        assert_ne!(a, request_fingerprint("m2", &msgs("q"), &params, false));
        assert_ne!(a, request_fingerprint("m", &msgs("q"), &params, true));
        let hotter = SamplingParams {
            temperature: 1.0,
            ..params
        };
        assert_ne!(a, request_fingerprint("m", &msgs("q"), &hotter, false));
        // Image bytes count.
        let mut with_img = msgs("q");
        with_img[0].images.push(vec![1, 2, 3]);
        assert_ne!(a, request_fingerprint("m", &with_img, &params, false));
    }

    #[test]
    fn params_validation_rejects_bad_values() {
        assert!(SamplingParams {
            temperature: -0.1,
            max_tokens: 10,
            seed: None,
            top_p: 1.0
        }
        .validate()
        .is_err());
        assert!(SamplingParams {
            temperature: 0.0,
            max_tokens: 0,
            seed: None,
            top_p: 1.0
        }
        .validate()
        .is_err());
        assert!(SamplingParams {
            temperature: 0.0,
            max_tokens: 1,
            seed: None,
            top_p: 0.0
        }
        .validate()
        .is_err());
        assert!(SamplingParams::greedy(10, 0).validate().is_ok());
    }

    #[test]
    fn backoff_delays_grow_exponentially_within_jitter() {
        for attempt in 0..4 {
            let delay = backoff_delay(attempt).as_secs_f64();
            let nominal = 2f64.powi(attempt as i32);
            assert!(delay >= nominal * 0.8 - 1e-9, "attempt {attempt}: {delay}");
            assert!(delay <= nominal * 1.2 + 1e-9, "attempt {attempt}: {delay}");
        }
    }
}
