//! Text-completion clients used for dataset generation and judging.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

/// Anything that turns a prompt into a completion.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Runs `f` up to `1 + retries` times, sleeping `base * 2^attempt` between
/// failures. Only client errors are retried.
pub fn with_retries<T>(retries: u32, base: Duration, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match f() {
            Err(Error::Client(msg)) if attempt < retries => {
                tracing::warn!(attempt, %msg, "llm call failed, retrying");
                thread::sleep(base * 2u32.pow(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_retries() -> u32 {
    4
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_s() -> u64 {
    120
}

/// Chat-completions client. Temperature is fixed at 0.
pub struct HttpLlmClient {
    cfg: HttpClientConfig,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(cfg: HttpClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    fn once(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.http.post(url).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Client(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Client(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(Error::Unsupported(format!("request rejected with {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::parse("completion response has no choices[0].message.content"))
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        with_retries(self.cfg.retries, Duration::from_millis(self.cfg.backoff_ms), || self.once(prompt))
    }
}

/// Replays stored responses: the first entry whose key occurs in the prompt
/// wins.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CannedClient {
    pub entries: Vec<CannedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedEntry {
    pub key: String,
    pub response: String,
}

impl CannedClient {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        Self { entries: entries.into_iter().map(|(key, response)| CannedEntry { key, response }).collect() }
    }
}

impl LlmClient for CannedClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.entries
            .iter()
            .find(|e| prompt.contains(&e.key))
            .map(|e| e.response.clone())
            .ok_or_else(|| Error::Client("no canned response matches the prompt".into()))
    }
}

/// One logged request/response exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub sample_id: String,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<u8>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_then_succeeds() {
        let calls = Cell::new(0);
        let out = with_retries(3, Duration::ZERO, || {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(Error::Client("busy".into()))
            } else {
                Ok(7)
            }
        })
        .unwrap();
        assert_eq!((out, calls.get()), (7, 3));
    }

    #[test]
    fn gives_up_after_budget() {
        let calls = Cell::new(0);
        let out: Result<()> = with_retries(2, Duration::ZERO, || {
            calls.set(calls.get() + 1);
            Err(Error::Client("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn parse_errors_are_not_retried() {
        let calls = Cell::new(0);
        let _: Result<()> = with_retries(5, Duration::ZERO, || {
            calls.set(calls.get() + 1);
            Err(Error::parse("bad"))
        });
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn canned_lookup() {
        let c = CannedClient::new([("alpha".to_string(), "A".to_string()), ("beta".to_string(), "B".to_string())]);
        assert_eq!(c.complete("x beta y").unwrap(), "B");
        assert!(c.complete("gamma").is_err());
    }
}
