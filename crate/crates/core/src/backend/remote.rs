//! Blocking chat-completions client.
//!
//! POSTs `{model, messages, temperature}` and reads
//! `choices[0].message.content`. Transport errors, 429 and 5xx are retried up
//! to `max_retries` times; the whole call, including waiting for a
//! concurrency slot, is bounded by `timeout × (max_retries + 1)`.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{BackendConfig, BackendError, GenerationRequest, Generator};

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire_until(&self, deadline: Instant) -> Option<Permit<'_>> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            free = self.cv.wait_timeout(free, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
        *free -= 1;
        Some(Permit(self))
    }
}

pub struct RemoteGenerator {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
    limiter: Limiter,
}

impl RemoteGenerator {
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = config
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| BackendError::Config("remote backend requires an endpoint".into()))?;
        Ok(Self {
            endpoint,
            model: config.model_name.clone(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            timeout: config.timeout(),
            max_retries: config.max_retries,
            limiter: Limiter::new(config.max_concurrency.max(1)),
        })
    }

    fn attempt(&self, body: &Value, budget: Duration) -> Result<String, (bool, String)> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(budget))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((false, format!("HTTP {status}: {}", text.trim())));
        }
        let value: Value =
            resp.body_mut().read_json().map_err(|e| (true, format!("bad response body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let deadline = Instant::now() + self.timeout * (self.max_retries + 1);
        let Some(_permit) = self.limiter.acquire_until(deadline) else {
            return Err(BackendError::Unavailable {
                attempts: 0,
                last_error: "timed out waiting for a request slot".into(),
            });
        };
        let body = json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut attempts = 0;
        let mut last_error = String::from("deadline reached before first attempt");
        while attempts <= self.max_retries {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            attempts += 1;
            match self.attempt(&body, self.timeout.min(deadline - now)) {
                Ok(text) => return Ok(text),
                Err((retryable, msg)) => {
                    log::warn!("{}: attempt {attempts} failed: {msg}", request.op);
                    last_error = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(BackendError::Unavailable { attempts, last_error })
    }
}
