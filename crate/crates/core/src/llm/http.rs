use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResponse, LlmError, Role, Transport, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Per-role model names; roles not listed use `model`.
    pub role_models: BTreeMap<Role, String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            role_models: BTreeMap::new(),
            api_key: None,
            max_retries: 3,
            max_concurrency: 4,
            timeout_secs: 120,
            backoff_ms: 500,
        }
    }
}

impl HttpConfig {
    /// Overlays `LLM_BASE_URL`, `LLM_MODEL` and `LLM_API_KEY` when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var("LLM_BASE_URL") {
            self.base_url = url;
        }
        if let Ok(model) = std::env::var("LLM_MODEL") {
            self.model = model;
        }
        if let Ok(key) = std::env::var("LLM_API_KEY") {
            self.api_key = Some(key);
        }
        self
    }

    pub fn model_for(&self, role: Role) -> &str {
        self.role_models.get(&role).unwrap_or(&self.model)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.freed.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completions client: POST `{base_url}/chat/completions`.
pub struct HttpTransport {
    config: HttpConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl HttpTransport {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Semaphore::new(config.max_concurrency);
        HttpTransport {
            config,
            agent,
            slots,
        }
    }

    fn attempt(
        &self,
        request: &CompletionRequest,
        model: &str,
    ) -> Result<CompletionResponse, Failure> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": model,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut call = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(body)
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {detail}")));
        }
        let reply: ChatReply = response
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Fatal(format!("malformed reply: {e}")))?;
        let text = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Failure::Fatal("reply carried no message content".into()))?;
        let usage = reply
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(CompletionResponse {
            text,
            usage,
            backend_id: format!("http:{model}"),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let model = self.config.model_for(request.role).to_string();
        let _permit = self.slots.acquire();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(request, &model) {
                Ok(response) => return Ok(response),
                Err(Failure::Fatal(msg)) => return Err(LlmError::Transport(msg)),
                Err(Failure::Retryable(msg)) => {
                    tracing::warn!(attempt, error = %msg, "completion request failed");
                    last = msg;
                }
            }
        }
        Err(LlmError::Transport(format!(
            "giving up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }
}
