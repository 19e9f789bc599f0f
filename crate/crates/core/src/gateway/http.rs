//! HTTP backend speaking the common `/chat/completions` JSON dialect.
//!
//! Images travel inline as base64 `data:` URLs; token log-probabilities are
//! read from `choices[0].logprobs.content[*].logprob` when requested. Status
//! and transport failures map onto [`GatewayError`] variants so the gateway's
//! retry loop can distinguish transient (429/5xx/transport) from permanent
//! ones.

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendResponse, ChatRequest, EndpointSpec, GatewayError};

pub(super) struct HttpBackend {
    client: reqwest::Client,
    url: String,
    bearer_token: Option<String>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // The bearer token is a secret; never let it reach logs.
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("bearer_token", &self.bearer_token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub(super) fn new(endpoint: &EndpointSpec) -> Result<Self, GatewayError> {
        let bearer_token = if endpoint.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&endpoint.api_key_env) {
                Ok(token) if !token.is_empty() => Some(token),
                _ => {
                    return Err(GatewayError::MissingApiKey {
                        endpoint: endpoint.name.clone(),
                        var: endpoint.api_key_env.clone(),
                    })
                }
            }
        };
        let client = reqwest::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                attempts: 0,
                message: format!("client construction failed: {e}"),
            })?;
        Ok(HttpBackend {
            client,
            url: format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/')),
            bearer_token,
        })
    }
}

/// Builds the JSON request body. Text-only messages use plain string content;
/// messages with images use the typed content-part array.
pub(super) fn build_body(request: &ChatRequest<'_>) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let content = if m.images.is_empty() {
                Value::String(m.text.clone())
            } else {
                let mut parts = vec![json!({ "type": "text", "text": m.text })];
                for png in &m.images {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": { "url": format!("data:image/png;base64,{b64}") }
                    }));
                }
                Value::Array(parts)
            };
            json!({ "role": m.role.as_str(), "content": content })
        })
        .collect();

    let mut body = json!({
        "model": request.endpoint.model_id,
        "messages": messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_tokens,
        "top_p": request.params.top_p,
    });
    if let Some(seed) = request.params.seed {
        body["seed"] = json!(seed);
    }
    if request.want_logprobs {
        body["logprobs"] = json!(true);
    }
    body
}

/// Extracts text and optional log-probabilities from a response body.
pub(super) fn parse_body(
    endpoint_name: &str,
    body: &Value,
) -> Result<BackendResponse, GatewayError> {
    let malformed = |what: &str| GatewayError::Http {
        endpoint: endpoint_name.to_string(),
        status: 200,
        message: format!("malformed response body: {what}"),
    };
    let choice = body
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| malformed("missing choices[0]"))?;
    let response_text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing choices[0].message.content"))?
        .to_string();
    let token_logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|entries| {
            entries
                .iter()
                .map(|e| {
                    e.get("logprob")
                        .and_then(Value::as_f64)
                        .ok_or_else(|| malformed("logprobs entry without numeric logprob"))
                })
                .collect::<Result<Vec<f64>, _>>()
        })
        .transpose()?;
    Ok(BackendResponse {
        response_text,
        token_logprobs,
    })
}

#[async_trait::async_trait]
impl Backend for HttpBackend {
    async fn execute(&self, request: &ChatRequest<'_>) -> Result<BackendResponse, GatewayError> {
        let body = build_body(request);
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().await.map_err(|e| GatewayError::Transport {
            endpoint: request.endpoint.name.clone(),
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().await.map_err(|e| GatewayError::Transport {
            endpoint: request.endpoint.name.clone(),
            attempts: 1,
            message: format!("reading response body: {e}"),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                endpoint: request.endpoint.name.clone(),
                status: status.as_u16(),
                message: text.chars().take(500).collect(),
            });
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| GatewayError::Http {
            endpoint: request.endpoint.name.clone(),
            status: status.as_u16(),
            message: format!("response is not JSON: {e}"),
        })?;
        parse_body(&request.endpoint.name, &parsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Role, SamplingParams};

    fn spec() -> EndpointSpec {
        EndpointSpec {
            name: "subject".to_string(),
            base_url: "http://localhost:9/v1".to_string(),
            model_id: "test-model".to_string(),
            api_key_env: String::new(),
            supports_images: true,
            supports_logprobs: true,
            timeout: std::time::Duration::from_secs(5),
            max_retries: 0,
        }
    }

    #[test]
    fn body_uses_plain_content_for_text_and_parts_for_images() {
        let endpoint = spec();
        let messages = vec![
            ChatMessage::text(Role::User, "hello".to_string()),
            ChatMessage::text(Role::User, "look".to_string()).with_image(vec![1, 2, 3]),
        ];
        let params = SamplingParams {
            temperature: 0.5,
            max_tokens: 32,
            seed: Some(7),
            top_p: 0.9,
        };
        let request = ChatRequest {
            endpoint: &endpoint,
            messages: &messages,
            params,
            want_logprobs: true,
            fingerprint: "f",
            sample_index: None,
        };
        let body = build_body(&request);
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.5);
        assert_eq!(body["seed"], 7);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["messages"][0]["content"], "hello");
        let parts = body["messages"][1]["content"].as_array().unwrap();
        assert_eq!(parts[0]["type"], "text");
        assert_eq!(parts[1]["type"], "image_url");
        let url = parts[1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(url.trim_start_matches("data:image/png;base64,"), "AQID");
    }

    #[test]
    fn body_omits_seed_and_logprobs_when_unset() {
        let endpoint = spec();
        let messages = vec![ChatMessage::text(Role::User, "q".to_string())];
        let request = ChatRequest {
            endpoint: &endpoint,
            messages: &messages,
            params: SamplingParams {
                temperature: 1.0,
                max_tokens: 16,
                seed: None,
                top_p: 1.0,
            },
            want_logprobs: false,
            fingerprint: "f",
            sample_index: None,
        };
        let body = build_body(&request);
        assert!(body.get("seed").is_none());
        assert!(body.get("logprobs").is_none());
    }

    #[test]
    fn parses_text_and_logprobs_from_response() {
        let body = serde_json::json!({
            "choices": [{
                "message": { "content": "Paris" },
                "logprobs": { "content": [
                    { "token": "Par", "logprob": -0.25 },
                    { "token": "is", "logprob": -0.5 }
                ]}
            }]
        });
        let parsed = parse_body("subject", &body).unwrap();
        assert_eq!(parsed.response_text, "Paris");
        assert_eq!(parsed.token_logprobs, Some(vec![-0.25, -0.5]));
    }

    #[test]
    fn missing_content_is_a_permanent_error() {
        let body = serde_json::json!({ "choices": [] });
        let err = parse_body("subject", &body).unwrap_err();
        match err {
            GatewayError::Http { status, .. } => assert_eq!(status, 200),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(!parse_body("subject", &body).unwrap_err().is_retryable());
    }

    #[test]
    fn missing_api_key_fails_at_construction() {
        let mut endpoint = spec();
        endpoint.api_key_env = "THIS_VAR_IS_DEFINITELY_NOT_SET_12345".to_string();
        let err = HttpBackend::new(&endpoint).unwrap_err();
        assert!(matches!(err, GatewayError::MissingApiKey { .. }));
    }
}
