//! Model backends: OpenAI-compatible HTTP endpoints and a fixture-driven mock.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_TEMPERATURE: f64 = 1e-7;
pub const DEFAULT_MAX_INPUT_TOKENS: u32 = 4096;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 200;
pub const DEFAULT_PARALLELISM: usize = 8;
pub const MOCK_FALLBACK: &str = "SELECT 1";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("authentication failed for {model}: {message}")]
    Auth { model: String, message: String },
    #[error("transport failure for {model} after {attempts} attempt(s): {message}")]
    Transport {
        model: String,
        attempts: u32,
        message: String,
    },
    #[error("prompt exceeds the context window of {model}: {message}")]
    ContextOverflow { model: String, message: String },
    #[error("{model} rejected the request (HTTP {status}): {body}")]
    Rejected {
        model: String,
        status: u16,
        body: String,
    },
    #[error("invalid model spec {model}: {message}")]
    InvalidSpec { model: String, message: String },
    #[error("empty prompt for {0}")]
    EmptyPrompt(String),
    #[error("mock fixtures {path}: {message}")]
    Fixtures { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    OpenaiChat,
    OpenaiCompletion,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    /// Remote model name; defaults to `model_id`.
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub endpoint: String,
    pub api_style: ApiStyle,
    /// Explicit decoding temperature. When absent: 0 for OpenAI-family
    /// models, 1e-7 otherwise.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub openai_family: bool,
    #[serde(default = "default_max_input")]
    pub max_input_tokens: u32,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    /// Environment variable holding the API key; defaults to
    /// `PETSQL_<MODEL_ID>_API_KEY`.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    /// Mock only: JSON object mapping prompt digests to responses.
    #[serde(default)]
    pub mock_fixtures: Option<PathBuf>,
    /// Mock only: response for prompts missing from the fixtures.
    #[serde(default)]
    pub mock_fallback: Option<String>,
}

fn default_max_input() -> u32 {
    DEFAULT_MAX_INPUT_TOKENS
}

fn default_max_output() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

impl ModelSpec {
    pub fn mock(model_id: impl Into<String>) -> Self {
        ModelSpec {
            model_id: model_id.into(),
            model_name: None,
            endpoint: String::new(),
            api_style: ApiStyle::Mock,
            temperature: None,
            openai_family: false,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            auth_env_var: None,
            mock_fixtures: None,
            mock_fallback: None,
        }
    }

    pub fn openai_chat(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ModelSpec {
            endpoint: endpoint.into(),
            api_style: ApiStyle::OpenaiChat,
            ..ModelSpec::mock(model_id)
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(if self.openai_family {
            0.0
        } else {
            DEFAULT_TEMPERATURE
        })
    }

    pub fn auth_env_var(&self) -> String {
        self.auth_env_var.clone().unwrap_or_else(|| {
            let slug: String = self
                .model_id
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() {
                        c.to_ascii_uppercase()
                    } else {
                        '_'
                    }
                })
                .collect();
            format!("PETSQL_{slug}_API_KEY")
        })
    }

    pub fn remote_model(&self) -> &str {
        self.model_name.as_deref().unwrap_or(&self.model_id)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |message: &str| GatewayError::InvalidSpec {
            model: self.model_id.clone(),
            message: message.to_string(),
        };
        let t = self.temperature();
        if !(0.0..=2.0).contains(&t) {
            return Err(invalid("temperature must be within [0, 2]"));
        }
        if self.max_output_tokens < 1 {
            return Err(invalid("max_output_tokens must be at least 1"));
        }
        if self.api_style != ApiStyle::Mock && self.endpoint.is_empty() {
            return Err(invalid("endpoint is required for remote models"));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("completions") {
            return base.to_string();
        }
        match self.api_style {
            ApiStyle::OpenaiChat => format!("{base}/chat/completions"),
            _ => format!("{base}/completions"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub model_id: String,
    pub prompt_hash: String,
    pub raw_output: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub usage: Option<Usage>,
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub request_timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 1000,
            request_timeout_ms: 120_000,
        }
    }
}

/// Issues generation requests. Shared across worker threads.
pub struct Gateway {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    parallelism: usize,
    fixtures: Mutex<HashMap<PathBuf, std::sync::Arc<HashMap<String, String>>>>,
    calls: AtomicUsize,
}

enum Attempt {
    Done(String, Option<Usage>),
    Retry(String),
    Fail(GatewayError),
}

impl Gateway {
    pub fn new(retry: RetryPolicy, parallelism: usize) -> Self {
        Gateway {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_millis(retry.request_timeout_ms))
                .build()
                .expect("HTTP client"),
            retry,
            parallelism: parallelism.max(1),
            fixtures: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn generate(
        &self,
        spec: &ModelSpec,
        prompt: &str,
    ) -> Result<GenerationRecord, GatewayError> {
        spec.validate()?;
        if prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt(spec.model_id.clone()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let hash = prompt_hash(prompt);
        let (raw_output, usage) = match spec.api_style {
            ApiStyle::Mock => (self.mock_response(spec, &hash)?, None),
            _ => self.remote(spec, prompt)?,
        };
        Ok(GenerationRecord {
            model_id: spec.model_id.clone(),
            prompt_hash: hash,
            raw_output,
            latency_ms: started.elapsed().as_millis() as u64,
            usage,
        })
    }

    /// One request per `(spec, prompt)` pair, run concurrently. Results come
    /// back in input order; a failing slot does not affect the others.
    pub fn generate_all(
        &self,
        requests: &[(ModelSpec, String)],
    ) -> Vec<Result<GenerationRecord, GatewayError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<GenerationRecord, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..self.parallelism.min(requests.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((spec, prompt)) = requests.get(i) else {
                        break;
                    };
                    let result = self.generate(spec, prompt);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
            .collect()
    }

    fn fixtures_for(
        &self,
        path: &Path,
    ) -> Result<std::sync::Arc<HashMap<String, String>>, GatewayError> {
        let mut cache = self.fixtures.lock().unwrap();
        if let Some(map) = cache.get(path) {
            return Ok(map.clone());
        }
        let err = |message: String| GatewayError::Fixtures {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let map: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let map = std::sync::Arc::new(map);
        cache.insert(path.to_path_buf(), map.clone());
        Ok(map)
    }

    fn mock_response(&self, spec: &ModelSpec, hash: &str) -> Result<String, GatewayError> {
        let fallback = || {
            spec.mock_fallback
                .clone()
                .unwrap_or_else(|| MOCK_FALLBACK.to_string())
        };
        match &spec.mock_fixtures {
            Some(path) => Ok(self
                .fixtures_for(path)?
                .get(hash)
                .cloned()
                .unwrap_or_else(fallback)),
            None => Ok(fallback()),
        }
    }

    fn remote(
        &self,
        spec: &ModelSpec,
        prompt: &str,
    ) -> Result<(String, Option<Usage>), GatewayError> {
        let var = spec.auth_env_var();
        let key = std::env::var(&var).map_err(|_| GatewayError::Auth {
            model: spec.model_id.clone(),
            message: format!("environment variable {var} is not set"),
        })?;
        let body = match spec.api_style {
            ApiStyle::OpenaiChat => serde_json::json!({
                "model": spec.remote_model(),
                "messages": [{"role": "user", "content": prompt}],
                "temperature": spec.temperature(),
                "max_tokens": spec.max_output_tokens,
            }),
            _ => serde_json::json!({
                "model": spec.remote_model(),
                "prompt": prompt,
                "temperature": spec.temperature(),
                "max_tokens": spec.max_output_tokens,
            }),
        };
        let url = spec.url();
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                let wait = self
                    .retry
                    .initial_backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(spec, &url, &key, &body) {
                Attempt::Done(text, usage) => return Ok((text, usage)),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(message) => {
                    tracing::warn!(model = %spec.model_id, attempt, %message, "retrying request");
                    last = message;
                }
            }
        }
        Err(GatewayError::Transport {
            model: spec.model_id.clone(),
            attempts: self.retry.attempts.max(1),
            message: last,
        })
    }

    fn attempt(&self, spec: &ModelSpec, url: &str, key: &str, body: &serde_json::Value) -> Attempt {
        let model = spec.model_id.clone();
        let resp = match self.client.post(url).bearer_auth(key).json(body).send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}: {}", truncate(&text, 200)));
        }
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Attempt::Fail(GatewayError::Auth {
                model,
                message: format!("HTTP {status}"),
            });
        }
        if !status.is_success() {
            let lowered = text.to_lowercase();
            if lowered.contains("context_length_exceeded")
                || lowered.contains("maximum context length")
                || lowered.contains("context length")
            {
                return Attempt::Fail(GatewayError::ContextOverflow {
                    model,
                    message: truncate(&text, 300),
                });
            }
            return Attempt::Fail(GatewayError::Rejected {
                model,
                status: status.as_u16(),
                body: truncate(&text, 300),
            });
        }
        match parse_completion(spec.api_style, &text) {
            Ok((output, usage)) => {
                if let Some(u) = usage {
                    if u.prompt_tokens > spec.max_input_tokens as u64 {
                        return Attempt::Fail(GatewayError::ContextOverflow {
                            model,
                            message: format!(
                                "provider counted {} prompt tokens, limit is {}",
                                u.prompt_tokens, spec.max_input_tokens
                            ),
                        });
                    }
                }
                Attempt::Done(output, usage)
            }
            Err(message) => Attempt::Fail(GatewayError::Rejected {
                model,
                status: status.as_u16(),
                body: message,
            }),
        }
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(RetryPolicy::default(), DEFAULT_PARALLELISM)
    }
}

fn truncate(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &text[..i]),
        None => text.to_string(),
    }
}

fn parse_completion(style: ApiStyle, body: &str) -> Result<(String, Option<Usage>), String> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format!("malformed response: {e}"))?;
    let choice = &value["choices"][0];
    let text = match style {
        ApiStyle::OpenaiChat => choice["message"]["content"].as_str(),
        _ => choice["text"].as_str(),
    }
    .ok_or_else(|| "response has no completion text".to_string())?;
    let usage = value.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((text.to_string(), usage))
}
