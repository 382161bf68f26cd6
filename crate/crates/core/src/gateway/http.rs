use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, GatewayConfig};

pub const API_KEY_ENV: &str = "PSYPROBE_API_KEY";

/// Client for OpenAI-compatible `chat/completions` endpoints.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: String,
    limiter: RateLimiter,
}

impl HttpBackend {
    /// Reads the key from `PSYPROBE_API_KEY`.
    pub fn from_env(config: &GatewayConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| BackendError::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(
        config: &GatewayConfig,
        api_key: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model_name.clone(),
            api_key: api_key.into(),
            limiter: RateLimiter::new(config.rate_limit, Duration::from_secs(60)),
        })
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        self.limiter.acquire();
        let body = json!({
            "model": self.model,
            "temperature": request.settings.temperature,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: response.text().unwrap_or_default(),
            });
        }
        let payload: Value = response
            .json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }
}

/// Sliding-window limiter. Callers block until a slot frees up; holding the
/// lock while waiting serializes dispatch once the window is full.
struct RateLimiter {
    limit: u32,
    window: Duration,
    stamps: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    fn new(limit: u32, window: Duration) -> Self {
        Self {
            limit,
            window,
            stamps: Mutex::new(VecDeque::new()),
        }
    }

    fn acquire(&self) {
        if self.limit == 0 {
            return;
        }
        let mut stamps = self.stamps.lock();
        loop {
            let now = Instant::now();
            while stamps
                .front()
                .is_some_and(|t| now.duration_since(*t) >= self.window)
            {
                stamps.pop_front();
            }
            if stamps.len() < self.limit as usize {
                stamps.push_back(now);
                return;
            }
            let oldest = *stamps.front().expect("window is full");
            std::thread::sleep(self.window.saturating_sub(now.duration_since(oldest)));
        }
    }
}
