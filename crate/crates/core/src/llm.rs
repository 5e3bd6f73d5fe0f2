//! Minimal chat-completion client with fixture recording.
//!
//! Requests go to an OpenAI-style `/chat/completions` endpoint. In replay
//! mode nothing touches the network: responses come from
//! `<fixture_dir>/<request-hash>.json`, written earlier in record mode.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("language model unavailable: {0}")]
    Unavailable(String),
    #[error("language model answered with an unexpected body: {0}")]
    BadResponse(String),
    #[error("no recorded fixture for request {0}")]
    MissingFixture(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "dir", rename_all = "snake_case")]
pub enum FixtureMode {
    #[default]
    Off,
    Record(PathBuf),
    Replay(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    pub timeout_ms: u64,
    #[serde(default)]
    pub fixtures: FixtureMode,
}

impl LlmConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> LlmConfig {
        LlmConfig {
            url: url.into(),
            model: model.into(),
            token: None,
            timeout_ms: 60_000,
            fixtures: FixtureMode::Off,
        }
    }

    /// Reads `FOLDEDIT_LLM_URL`, `FOLDEDIT_LLM_MODEL` and `FOLDEDIT_LLM_TOKEN`.
    pub fn from_env() -> Option<LlmConfig> {
        let url = std::env::var("FOLDEDIT_LLM_URL").ok()?;
        let model = std::env::var("FOLDEDIT_LLM_MODEL").unwrap_or_else(|_| "default".into());
        let mut cfg = LlmConfig::new(url, model);
        cfg.token = std::env::var("FOLDEDIT_LLM_TOKEN").ok();
        Some(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Message {
        Message {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Message {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
}

#[derive(Serialize, Deserialize)]
struct Fixture {
    request: serde_json::Value,
    content: String,
}

#[derive(Clone)]
pub struct LlmClient {
    cfg: LlmConfig,
    agent: ureq::Agent,
}

impl LlmClient {
    pub fn new(cfg: LlmConfig) -> LlmClient {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        LlmClient { cfg, agent }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    /// Sends `messages` at temperature 0 and returns the first choice's text.
    pub fn complete(&self, messages: &[Message]) -> Result<String, LlmError> {
        let req = ChatRequest {
            model: &self.cfg.model,
            messages,
            temperature: 0.0,
        };
        let value = serde_json::to_value(&req).expect("request serializes");
        let key = hex::encode(Sha256::digest(value.to_string().as_bytes()));
        let fixture_path = |dir: &PathBuf| dir.join(format!("{}.json", &key[..32]));
        if let FixtureMode::Replay(dir) = &self.cfg.fixtures {
            let text = fs::read_to_string(fixture_path(dir)).map_err(|_| LlmError::MissingFixture(key.clone()))?;
            let f: Fixture = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
            return Ok(f.content);
        }
        let content = self.post(&value)?;
        if let FixtureMode::Record(dir) = &self.cfg.fixtures {
            let f = Fixture {
                request: value,
                content: content.clone(),
            };
            fs::create_dir_all(dir)
                .and_then(|()| fs::write(fixture_path(dir), serde_json::to_string_pretty(&f).expect("fixture")))
                .map_err(|e| LlmError::Unavailable(format!("writing fixture: {e}")))?;
        }
        Ok(content)
    }

    fn post(&self, body: &serde_json::Value) -> Result<String, LlmError> {
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(t) = &self.cfg.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| LlmError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(LlmError::Unavailable(format!("status {status}")));
        }
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

/// Canned chat completions on a local port. Request `i` gets `replies[i]`
/// (the last one repeats).
#[cfg(test)]
pub(crate) mod mock {
    use std::sync::{Arc, Mutex};
    use std::thread;

    pub struct MockChat {
        pub url: String,
        pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    pub fn serve(replies: Vec<String>) -> MockChat {
        let server = tiny_http::Server::http("127.0.0.1:0").expect("bind mock");
        let url = format!(
            "http://{}/v1/chat/completions",
            server.server_addr().to_ip().expect("ip")
        );
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        thread::spawn(move || {
            for (i, mut rq) in server.incoming_requests().enumerate() {
                let mut body = String::new();
                let _ = rq.as_reader().read_to_string(&mut body);
                seen.lock()
                    .unwrap()
                    .push(serde_json::from_str(&body).unwrap_or_default());
                let reply = replies.get(i).or(replies.last()).cloned().unwrap_or_default();
                let out = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply}}]});
                let _ = rq.respond(tiny_http::Response::from_string(out.to_string()));
            }
        });
        MockChat { url, requests }
    }
}
