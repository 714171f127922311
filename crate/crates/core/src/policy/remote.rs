//! Remote model over HTTP. One request per decision; the response body is
//! handed to [`parse_tool_call`](super::parse_tool_call).

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_tool_call, Decision, Policy, PolicyContext, PolicyError};
use crate::episode::SYSTEM_PROMPT;
use crate::tools::schema::tool_definitions;
use crate::tools::Action;

pub const ENDPOINT_ENV: &str = "FLFORGE_LLM_ENDPOINT";
pub const KEY_ENV: &str = "FLFORGE_LLM_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Requests allowed in flight at once across all threads.
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            temperature: 0.0,
            timeout_secs: 60,
            max_in_flight: 4,
        }
    }
}

impl RemoteConfig {
    /// Defaults, with the endpoint taken from the environment when set.
    pub fn from_env() -> Self {
        let mut cfg = RemoteConfig::default();
        if let Ok(e) = std::env::var(ENDPOINT_ENV) {
            cfg.endpoint = e;
        }
        cfg
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemotePolicy {
    cfg: RemoteConfig,
    key: Option<String>,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl RemotePolicy {
    pub fn new(cfg: RemoteConfig) -> Result<Self, PolicyError> {
        if cfg.endpoint.is_empty() {
            return Err(PolicyError::Config(format!("remote policy needs an endpoint (set {ENDPOINT_ENV})")));
        }
        if cfg.max_in_flight == 0 {
            return Err(PolicyError::Config("max_in_flight must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        let limiter = Limiter { free: Mutex::new(cfg.max_in_flight), cv: Condvar::new() };
        Ok(RemotePolicy { key: std::env::var(KEY_ENV).ok(), agent, limiter, cfg })
    }

    /// The request document sent for one decision.
    pub fn request_body(&self, instruction: &str, allowed: &[Action]) -> Value {
        let tools: Vec<Value> = tool_definitions(allowed)
            .into_iter()
            .map(|t| json!({"name": t.name, "description": t.description, "parameters": t.parameters}))
            .collect();
        json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": instruction}
            ],
            "tools": tools,
            "temperature": self.cfg.temperature
        })
    }
}

impl Policy for RemotePolicy {
    fn decide(&self, instruction: &str, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let body = self.request_body(instruction, ctx.allowed);
        let _slot = self.limiter.acquire();
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let text = req
            .send_json(&body)
            .and_then(|mut resp| resp.body_mut().read_to_string())
            .map_err(|e| {
                let retryable = match &e {
                    ureq::Error::StatusCode(code) => *code >= 500 || *code == 429,
                    _ => true,
                };
                PolicyError::Transport { message: e.to_string(), retryable }
            })?;
        Ok(parse_tool_call(&text))
    }
}
