use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENDPOINT_VAR: &str = "TRICOAT_LLM_ENDPOINT";
pub const API_KEY_VAR: &str = "TRICOAT_LLM_API_KEY";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Stub,
    Live,
}

impl std::str::FromStr for LlmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(LlmMode::Stub),
            "live" => Ok(LlmMode::Live),
            other => Err(Error::Config(format!("unknown llm mode {other:?} (expected stub or live)"))),
        }
    }
}

/// Client settings. The endpoint URL and API key come from the
/// environment only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub enabled: bool,
    pub mode: LlmMode,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub min_interval_ms: u64,
    /// JSON object mapping prompt SHA-256 (hex) to a canned reply.
    pub stub_transcript: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mode: LlmMode::Stub,
            model: "gpt-3.5-turbo".into(),
            timeout_secs: 60,
            retries: 3,
            min_interval_ms: 1000,
            stub_transcript: None,
        }
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub mode: LlmMode,
    pub model: String,
    pub prompt_sha256: String,
    /// Set when stub mode had no canned reply for this prompt.
    pub placeholder: bool,
    pub attempts: u32,
    pub timestamp: String,
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    timestamp: &'a str,
    mode: LlmMode,
    model: &'a str,
    prompt_sha256: &'a str,
    prompt: &'a str,
    response: &'a str,
    placeholder: bool,
    attempts: u32,
}

pub struct LlmClient {
    config: LlmConfig,
    endpoint: Option<String>,
    api_key: Option<String>,
    transcript: BTreeMap<String, String>,
    audit_log: PathBuf,
    last_request: Mutex<Option<Instant>>,
}

impl LlmClient {
    pub fn new(config: LlmConfig, endpoint: Option<String>, api_key: Option<String>, audit_log: PathBuf) -> Result<Self> {
        if config.mode == LlmMode::Live && endpoint.is_none() {
            return Err(Error::Config(format!("live llm mode needs {ENDPOINT_VAR} to be set")));
        }
        let transcript = match (&config.mode, &config.stub_transcript) {
            (LlmMode::Stub, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("stub transcript {}: {e}", path.display())))?
            }
            _ => BTreeMap::new(),
        };
        Ok(Self {
            config,
            endpoint,
            api_key,
            transcript,
            audit_log,
            last_request: Mutex::new(None),
        })
    }

    pub fn from_env(config: LlmConfig, audit_log: PathBuf) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.is_empty());
        let api_key = std::env::var(API_KEY_VAR).ok().filter(|s| !s.is_empty());
        Self::new(config, endpoint, api_key, audit_log)
    }

    pub fn audit_log(&self) -> &Path {
        &self.audit_log
    }

    pub fn send(&self, prompt: &str) -> Result<LlmResponse> {
        let hash = prompt_hash(prompt);
        let (text, placeholder, attempts) = match self.config.mode {
            LlmMode::Stub => match self.transcript.get(&hash) {
                Some(t) => (t.clone(), false, 0),
                None => {
                    log::warn!("no canned reply for prompt {hash}; using placeholder");
                    (format!("[placeholder: no stub transcript entry for prompt {hash}]"), true, 0)
                }
            },
            LlmMode::Live => {
                let (t, n) = self.post(prompt)?;
                (t, false, n)
            }
        };
        let response = LlmResponse {
            text,
            mode: self.config.mode,
            model: self.config.model.clone(),
            prompt_sha256: hash,
            placeholder,
            attempts,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        self.audit(prompt, &response)?;
        Ok(response)
    }

    fn audit(&self, prompt: &str, r: &LlmResponse) -> Result<()> {
        if let Some(dir) = self.audit_log.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let line = serde_json::to_string(&AuditRecord {
            timestamp: &r.timestamp,
            mode: r.mode,
            model: &r.model,
            prompt_sha256: &r.prompt_sha256,
            prompt,
            response: &r.text,
            placeholder: r.placeholder,
            attempts: r.attempts,
        })
        .expect("audit record serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.audit_log)
            .map_err(|e| Error::io(&self.audit_log, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.audit_log, e))
    }

    /// Posts one chat-completion request, holding the lock so requests to
    /// the endpoint are serialized and spaced by `min_interval_ms`.
    fn post(&self, prompt: &str) -> Result<(String, u32)> {
        let endpoint = self.endpoint.as_deref().expect("checked in new");
        let mut last = self.last_request.lock().expect("rate limiter lock");
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build();
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let interval = Duration::from_millis(self.config.min_interval_ms);
        let mut failure = String::new();
        for attempt in 1..=self.config.retries + 1 {
            if let Some(t) = *last {
                let since = t.elapsed();
                if since < interval {
                    thread::sleep(interval - since);
                }
            }
            *last = Some(Instant::now());
            let mut req = agent.post(endpoint);
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(&body) {
                Ok(resp) => {
                    let v: serde_json::Value = resp
                        .into_json()
                        .map_err(|e| Error::Llm(format!("unreadable reply from {endpoint}: {e}")))?;
                    let text = v["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| Error::Llm(format!("reply from {endpoint} has no choices[0].message.content")))?;
                    return Ok((text.to_string(), attempt));
                }
                Err(ureq::Error::Status(code, _)) if code != 429 && code < 500 => {
                    return Err(Error::Llm(format!("{endpoint} answered HTTP {code}")));
                }
                Err(e) => {
                    failure = e.to_string();
                    log::warn!("llm request attempt {attempt} failed: {failure}");
                }
            }
        }
        Err(Error::Llm(format!(
            "{endpoint} failed after {} attempts: {failure}",
            self.config.retries + 1
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn read_request(stream: &mut std::net::TcpStream) -> String {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        String::from_utf8(body).unwrap()
    }

    /// Serves `n` connections; the first `drops` are closed without a reply.
    fn mock_server(n: usize, drops: usize, reply: &'static str) -> (String, Arc<AtomicUsize>, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(AtomicUsize::new(0));
        let counter = seen.clone();
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for _ in 0..n {
                let (mut stream, _) = listener.accept().unwrap();
                let i = counter.fetch_add(1, Ordering::SeqCst);
                let body = read_request(&mut stream);
                if i < drops {
                    continue;
                }
                bodies.push(body);
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (url, seen, handle)
    }

    fn config(mode: LlmMode) -> LlmConfig {
        LlmConfig {
            enabled: true,
            mode,
            model: "test-model".into(),
            timeout_secs: 5,
            retries: 3,
            min_interval_ms: 0,
            stub_transcript: None,
        }
    }

    fn audit_lines(path: &Path) -> Vec<serde_json::Value> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn stub_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let transcript = dir.path().join("stub.json");
        let prompt = "1. hello\n";
        fs::write(&transcript, serde_json::json!({ prompt_hash(prompt): "canned reply" }).to_string()).unwrap();
        let mut cfg = config(LlmMode::Stub);
        cfg.stub_transcript = Some(transcript);
        let audit = dir.path().join("logs/audit.jsonl");
        let client = LlmClient::new(cfg, None, None, audit.clone()).unwrap();

        let hit = client.send(prompt).unwrap();
        assert_eq!(hit.text, "canned reply");
        assert!(!hit.placeholder);
        let miss = client.send("something else").unwrap();
        assert!(miss.placeholder);
        assert_eq!(miss.text, client.send("something else").unwrap().text);

        let lines = audit_lines(&audit);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["prompt"], prompt);
        assert_eq!(lines[0]["response"], "canned reply");
        assert_eq!(lines[0]["mode"], "stub");
        assert_eq!(lines[1]["placeholder"], true);
    }

    #[test]
    fn known_hash() {
        assert_eq!(
            prompt_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn live_round_trip_is_audited() {
        let (url, _, server) = mock_server(1, 0, r#"{"choices":[{"message":{"role":"assistant","content":"live answer"}}]}"#);
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("audit.jsonl");
        let client = LlmClient::new(config(LlmMode::Live), Some(url), Some("k".into()), audit.clone()).unwrap();
        let r = client.send("explain please").unwrap();
        assert_eq!((r.text.as_str(), r.attempts), ("live answer", 1));
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["messages"][0]["content"], "explain please");
        assert_eq!(sent["model"], "test-model");
        let lines = audit_lines(&audit);
        assert_eq!(lines[0]["model"], "test-model");
        assert_eq!(lines[0]["mode"], "live");
        assert!(chrono::DateTime::parse_from_rfc3339(lines[0]["timestamp"].as_str().unwrap()).is_ok());
    }

    #[test]
    fn live_retries_then_succeeds() {
        let (url, seen, server) = mock_server(3, 2, r#"{"choices":[{"message":{"content":"third time"}}]}"#);
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(config(LlmMode::Live), Some(url), None, dir.path().join("a.jsonl")).unwrap();
        let r = client.send("p").unwrap();
        server.join().unwrap();
        assert_eq!((r.text.as_str(), r.attempts), ("third time", 3));
        assert_eq!(seen.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn live_gives_up_after_retries() {
        let (url, seen, server) = mock_server(4, 4, "");
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(config(LlmMode::Live), Some(url), None, dir.path().join("a.jsonl")).unwrap();
        let err = client.send("p").unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, Error::Llm(ref m) if m.contains("4 attempts")));
        assert_eq!(seen.load(Ordering::SeqCst), 4);
        assert!(!dir.path().join("a.jsonl").exists());
    }

    #[test]
    fn live_without_endpoint_is_a_config_error() {
        let r = LlmClient::new(config(LlmMode::Live), None, None, PathBuf::from("x"));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
