//! Deterministic scripted backend for offline runs and tests.
//!
//! Selected by a `mock://<script-path>` base URL. The script is a TOML file
//! of substring-matching rules; each rule carries weighted candidate answers.
//! Greedy requests (temperature 0) return the heaviest answer, ties broken
//! by script order. Sampled requests draw from the weights with a ChaCha
//! generator seeded from the script seed, the request fingerprint, and the
//! sample index, so every response is a pure function of the request and the
//! script — concurrency and retries cannot change what comes back.
//!
//! Every execution is appended to a call log that tests can inspect to prove
//! protocol properties (sample counts, temperatures, attached images).

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendResponse, ChatRequest, GatewayError, Role};

/// One weighted candidate answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockAnswer {
    pub text: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Explicit per-token log-probabilities to return when the request asks
    /// for them; synthesized deterministically when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

fn default_weight() -> f64 {
    1.0
}

/// One rule: applies when `match` occurs in the last user message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub answers: Vec<MockAnswer>,
}

/// A full mock script.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    /// Returned when no rule matches; omit to make unmatched requests fail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn validate(&self) -> Result<(), String> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.pattern.is_empty() {
                return Err(format!("rule {i}: match pattern must be non-empty"));
            }
            if rule.answers.is_empty() {
                return Err(format!("rule {i} ({:?}): needs at least one answer", rule.pattern));
            }
            for (j, ans) in rule.answers.iter().enumerate() {
                if ans.weight <= 0.0 || !ans.weight.is_finite() {
                    return Err(format!(
                        "rule {i} answer {j}: weight must be finite and > 0, got {}",
                        ans.weight
                    ));
                }
                if let Some(lps) = &ans.logprobs {
                    if lps.iter().any(|lp| *lp > 0.0 || lp.is_nan()) {
                        return Err(format!(
                            "rule {i} answer {j}: log-probabilities must be ≤ 0"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Record of one mock execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockCall {
    /// Text of the last user message (what the rules matched against).
    pub question: String,
    pub temperature: f64,
    /// Effective seed the request carried (base seed plus sample offset).
    pub seed: Option<i64>,
    pub sample_index: Option<u32>,
    pub has_image: bool,
    /// SHA-256 hex digests of every attached image, request order.
    pub image_hashes: Vec<String>,
    pub want_logprobs: bool,
    pub model_id: String,
    pub response_text: String,
}

/// Shared handle onto a mock backend's execution log.
#[derive(Clone)]
pub struct MockCallLog(Arc<Mutex<Vec<MockCall>>>);

impl MockCallLog {
    pub fn snapshot(&self) -> Vec<MockCall> {
        self.0.lock().expect("mock call log lock").clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("mock call log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(super) struct MockBackend {
    script: MockScript,
    calls: Arc<Mutex<Vec<MockCall>>>,
}

impl MockBackend {
    pub(super) fn new(script: MockScript) -> Self {
        MockBackend {
            script,
            calls: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub(super) fn from_script_path(path: &str) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::MockScript {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        let script: MockScript = toml::from_str(&text).map_err(|e| GatewayError::MockScript {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        script.validate().map_err(|message| GatewayError::MockScript {
            path: path.to_string(),
            message,
        })?;
        Ok(MockBackend::new(script))
    }

    pub(super) fn call_log(&self) -> MockCallLog {
        MockCallLog(Arc::clone(&self.calls))
    }

    /// Deterministic RNG for one request: script seed, request fingerprint,
    /// and sample index all feed in, so samples are independent of call
    /// order and concurrency.
    fn rng_for(&self, fingerprint: &str, sample_index: Option<u32>) -> ChaCha8Rng {
        let fp64 = u64::from_str_radix(&fingerprint[..16], 16).unwrap_or(0);
        let k = u64::from(sample_index.unwrap_or(0));
        let seed = self.script.seed ^ fp64 ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pick<'a>(
        &self,
        answers: &'a [MockAnswer],
        request: &ChatRequest<'_>,
    ) -> &'a MockAnswer {
        if request.params.temperature == 0.0 || answers.len() == 1 {
            // Greedy: heaviest answer, first on ties.
            return answers
                .iter()
                .reduce(|best, cand| if cand.weight > best.weight { cand } else { best })
                .expect("validated non-empty");
        }
        let mut rng = self.rng_for(request.fingerprint, request.sample_index);
        let total: f64 = answers.iter().map(|a| a.weight).sum();
        let mut draw = rng.gen::<f64>() * total;
        for ans in answers {
            draw -= ans.weight;
            if draw <= 0.0 {
                return ans;
            }
        }
        answers.last().expect("validated non-empty")
    }

    /// Deterministic stand-in log-probabilities: one per whitespace token,
    /// each in [-2, -0.25], derived from the fingerprint and token index.
    fn synth_logprobs(fingerprint: &str, text: &str) -> Vec<f64> {
        let n_tokens = text.split_whitespace().count().max(1);
        (0..n_tokens)
            .map(|i| {
                let digest = Sha256::digest(format!("{fingerprint}:{i}").as_bytes());
                let h = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
                -0.25 - 1.75 * ((h % 10_000) as f64 / 10_000.0)
            })
            .collect()
    }
}

#[async_trait::async_trait]
impl Backend for MockBackend {
    async fn execute(&self, request: &ChatRequest<'_>) -> Result<BackendResponse, GatewayError> {
        let question = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.clone())
            .unwrap_or_default();

        let rule = self
            .script
            .rules
            .iter()
            .find(|rule| question.contains(&rule.pattern));
        let (text, explicit_logprobs) = match rule {
            Some(rule) => {
                let ans = self.pick(&rule.answers, request);
                (ans.text.clone(), ans.logprobs.clone())
            }
            None => match &self.script.fallback_answer {
                Some(fallback) => (fallback.clone(), None),
                None => {
                    return Err(GatewayError::MockUnmatched {
                        endpoint: request.endpoint.name.clone(),
                        question,
                    })
                }
            },
        };

        let token_logprobs = if request.want_logprobs {
            Some(explicit_logprobs.unwrap_or_else(|| {
                Self::synth_logprobs(request.fingerprint, &text)
            }))
        } else {
            None
        };

        let image_hashes: Vec<String> = request
            .messages
            .iter()
            .flat_map(|m| m.images.iter())
            .map(|bytes| hex::encode(Sha256::digest(bytes)))
            .collect();
        self.calls.lock().expect("mock call log lock").push(MockCall {
            question,
            temperature: request.params.temperature,
            seed: request.params.seed,
            sample_index: request.sample_index,
            has_image: !image_hashes.is_empty(),
            image_hashes,
            want_logprobs: request.want_logprobs,
            model_id: request.endpoint.model_id.clone(),
            response_text: text.clone(),
        });

        Ok(BackendResponse {
            response_text: text,
            token_logprobs,
        })
    }
}
