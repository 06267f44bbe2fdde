//! OCR and caption providers.
//!
//! Wire contract (JSON over HTTP POST):
//!
//! * OCR: request `{"url": "<image url>"}`, response `{"text": "..."}`.
//! * Captions: request `{"url": "<image url>", "prompt": "...", "n": 3}`,
//!   response `{"captions": ["...", ...]}`.
//!
//! Auth is a bearer token read from the environment variable named in the
//! provider configuration.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::ImageArtifacts;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("{provider}: HTTP {status}")]
    Status { provider: String, status: u16 },
    #[error("{provider}: transport: {message}")]
    Transport { provider: String, message: String },
    #[error("{provider}: bad response: {message}")]
    Response { provider: String, message: String },
}

impl ProviderError {
    fn retryable(&self) -> bool {
        match self {
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            ProviderError::Transport { .. } => true,
            _ => false,
        }
    }
}

pub trait OcrProvider: Send + Sync {
    fn id(&self) -> &str;
    fn extract_text(&self, url: &str) -> Result<String, ProviderError>;
}

pub trait CaptionProvider: Send + Sync {
    fn id(&self) -> &str;
    /// Up to three captions for the image.
    fn captions(&self, url: &str) -> Result<Vec<String>, ProviderError>;
}

pub const DEFAULT_CAPTION_PROMPT: &str =
    "Describe the visual content of this image from a programming question in one sentence.";

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Identifier recorded in cached artifacts.
    pub id: String,
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Requests per second; unlimited when absent.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Caption prompt; ignored by OCR providers.
    #[serde(default)]
    pub prompt: Option<String>,
}

impl ProviderConfig {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ProviderConfig {
            id: id.into(),
            endpoint: endpoint.into(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            rate_limit: None,
            backoff_ms: default_backoff(),
            prompt: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ProviderError::Config(format!(
                "{}: timeout must be > 0",
                self.id
            )));
        }
        if let Some(r) = self.rate_limit {
            if !(r > 0.0 && r.is_finite()) {
                return Err(ProviderError::Config(format!(
                    "{}: rate limit must be > 0",
                    self.id
                )));
            }
        }
        if self.endpoint.trim().is_empty() {
            return Err(ProviderError::Config(format!(
                "{}: empty endpoint",
                self.id
            )));
        }
        Ok(())
    }
}

/// Minimum spacing between request starts.
#[derive(Debug)]
struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_sec: Option<f64>) -> Self {
        RateLimiter {
            interval: per_sec.map(|r| Duration::from_secs_f64(1.0 / r)),
            next: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Shared HTTP plumbing: auth, timeout, retries with exponential backoff and
/// rate limiting.
#[derive(Debug)]
struct HttpClient {
    config: ProviderConfig,
    token: Option<String>,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

impl HttpClient {
    fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!(
                    "{}: environment variable {var} is not set",
                    config.id
                ))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient {
            limiter: RateLimiter::new(config.rate_limit),
            config,
            token,
            agent,
        })
    }

    fn post<T: serde::de::DeserializeOwned>(
        &self,
        body: &serde_json::Value,
    ) -> Result<T, ProviderError> {
        let mut attempt = 0u32;
        loop {
            self.limiter.acquire();
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(err) if err.retryable() && attempt < self.config.max_retries => {
                    let delay = self
                        .config
                        .backoff_ms
                        .saturating_mul(1u64 << attempt.min(16));
                    log::warn!("{err}; retrying in {delay} ms");
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn post_once<T: serde::de::DeserializeOwned>(
        &self,
        body: &serde_json::Value,
    ) -> Result<T, ProviderError> {
        let provider = self.config.id.clone();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ProviderError::Transport {
            provider: provider.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status { provider, status });
        }
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| ProviderError::Response {
                provider,
                message: e.to_string(),
            })
    }
}

#[derive(Deserialize)]
struct OcrResponse {
    text: String,
}

#[derive(Deserialize)]
struct CaptionResponse {
    captions: Vec<String>,
}

#[derive(Debug)]
pub struct HttpOcrProvider {
    client: HttpClient,
}

impl HttpOcrProvider {
    /// Fails when the configured auth variable is unset.
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(HttpOcrProvider {
            client: HttpClient::new(config)?,
        })
    }
}

impl OcrProvider for HttpOcrProvider {
    fn id(&self) -> &str {
        &self.client.config.id
    }

    fn extract_text(&self, url: &str) -> Result<String, ProviderError> {
        let resp: OcrResponse = self.client.post(&json!({ "url": url }))?;
        Ok(resp.text)
    }
}

#[derive(Debug)]
pub struct HttpCaptionProvider {
    client: HttpClient,
}

impl HttpCaptionProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(HttpCaptionProvider {
            client: HttpClient::new(config)?,
        })
    }
}

impl CaptionProvider for HttpCaptionProvider {
    fn id(&self) -> &str {
        &self.client.config.id
    }

    fn captions(&self, url: &str) -> Result<Vec<String>, ProviderError> {
        let prompt = self
            .client
            .config
            .prompt
            .as_deref()
            .unwrap_or(DEFAULT_CAPTION_PROMPT);
        let body = json!({ "url": url, "prompt": prompt, "n": ImageArtifacts::MAX_CAPTIONS });
        let mut resp: CaptionResponse = self.client.post(&body)?;
        resp.captions.truncate(ImageArtifacts::MAX_CAPTIONS);
        Ok(resp.captions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serve canned responses in order, one per connection, recording request
    /// bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let (b, h) = (Arc::clone(&bodies), Arc::clone(&hits));
        thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                h.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = l.to_string();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                b.lock()
                    .unwrap()
                    .push(format!("{auth}|{}", String::from_utf8(buf).unwrap()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/"), bodies, hits)
    }

    fn config(endpoint: String) -> ProviderConfig {
        ProviderConfig {
            backoff_ms: 1,
            ..ProviderConfig::new("test", endpoint)
        }
    }

    #[test]
    fn ocr_wire_contract() {
        let (endpoint, bodies, _) = serve(vec![(
            200,
            r#"{"text":"Traceback (most recent call last)"}"#.into(),
        )]);
        std::env::set_var("DUPIMAGE_TEST_OCR_TOKEN", "secret");
        let mut cfg = config(endpoint);
        cfg.auth_env = Some("DUPIMAGE_TEST_OCR_TOKEN".into());
        let provider = HttpOcrProvider::new(cfg).unwrap();
        let text = provider
            .extract_text("https://i.sstatic.net/x.png")
            .unwrap();
        assert_eq!(text, "Traceback (most recent call last)");
        let seen = bodies.lock().unwrap();
        assert!(
            seen[0]
                .to_ascii_lowercase()
                .starts_with("authorization: bearer secret|"),
            "{}",
            seen[0]
        );
        let body: serde_json::Value =
            serde_json::from_str(seen[0].split_once('|').unwrap().1).unwrap();
        assert_eq!(body, json!({"url": "https://i.sstatic.net/x.png"}));
    }

    #[test]
    fn caption_wire_contract_and_truncation() {
        let (endpoint, bodies, _) = serve(vec![(200, r#"{"captions":["a","b","c","d"]}"#.into())]);
        let mut cfg = config(endpoint);
        cfg.prompt = Some("describe".into());
        let provider = HttpCaptionProvider::new(cfg).unwrap();
        assert_eq!(provider.captions("u").unwrap(), vec!["a", "b", "c"]);
        let seen = bodies.lock().unwrap();
        let body: serde_json::Value =
            serde_json::from_str(seen[0].split_once('|').unwrap().1).unwrap();
        assert_eq!(body, json!({"url": "u", "prompt": "describe", "n": 3}));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (endpoint, _, hits) = serve(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, r#"{"text":"ok"}"#.into()),
        ]);
        let provider = HttpOcrProvider::new(config(endpoint)).unwrap();
        assert_eq!(provider.extract_text("u").unwrap(), "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (endpoint, _, hits) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
        let mut cfg = config(endpoint);
        cfg.max_retries = 1;
        let provider = HttpOcrProvider::new(cfg).unwrap();
        assert!(matches!(
            provider.extract_text("u"),
            Err(ProviderError::Status { status: 500, .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (endpoint, _, hits) = serve(vec![(404, "{}".into()), (200, r#"{"text":"x"}"#.into())]);
        let provider = HttpOcrProvider::new(config(endpoint)).unwrap();
        assert!(provider.extract_text("u").is_err());
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn malformed_response_is_an_error() {
        let (endpoint, _, _) = serve(vec![(200, r#"{"nope":1}"#.into())]);
        let provider = HttpOcrProvider::new(config(endpoint)).unwrap();
        assert!(matches!(
            provider.extract_text("u"),
            Err(ProviderError::Response { .. })
        ));
    }

    #[test]
    fn missing_auth_variable_is_config_error() {
        let mut cfg = ProviderConfig::new("p", "http://127.0.0.1:9/");
        cfg.auth_env = Some("DUPIMAGE_SURELY_UNSET_VAR".into());
        assert!(matches!(
            HttpOcrProvider::new(cfg),
            Err(ProviderError::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ProviderConfig::new("p", "http://x/");
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ProviderConfig::new("p", "http://x/");
        cfg.rate_limit = Some(-1.0);
        assert!(cfg.validate().is_err());
        assert!(ProviderConfig::new("p", " ").validate().is_err());
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(Some(50.0));
        let start = Instant::now();
        for _ in 0..4 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
    }
}
