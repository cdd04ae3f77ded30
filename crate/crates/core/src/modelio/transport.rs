use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::protocol::{PartialFailure, PredictRequest, PredictResponse};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Transient failures worth another attempt, such as 429 or a 5xx.
    Retryable(String),
    Fatal(String),
    /// The server answered 422 with per-item errors.
    ItemErrors(PartialFailure),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Retryable(m) => write!(f, "{m}"),
            TransportError::Fatal(m) => write!(f, "{m}"),
            TransportError::ItemErrors(p) => write!(f, "{} item error(s)", p.errors.len()),
        }
    }
}

/// Something that answers prediction requests.
pub trait Transport: Send + Sync {
    fn send(&self, req: &PredictRequest) -> Result<PredictResponse, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails non-retryably, or the attempts run
    /// out. Delays double after every failed attempt.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let attempts = self.attempts.max(1);
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Err(TransportError::Retryable(msg)) if attempt < attempts => {
                    log::debug!("attempt {attempt}/{attempts} failed: {msg}; retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(TransportError::Retryable(msg)) => {
                    return Err(TransportError::Retryable(format!(
                        "giving up after {attempts} attempt(s): {msg}"
                    )))
                }
                other => return other,
            }
        }
    }
}

/// `POST <base>/predict` over HTTP.
pub struct HttpTransport {
    client: Client,
    url: String,
    bearer_token: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration, bearer_token: Option<String>) -> Result<Self, TransportError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Fatal(format!("building HTTP client: {e}")))?;
        let trimmed = base_url.trim_end_matches('/');
        let url = if trimmed.ends_with("/predict") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/predict")
        };
        Ok(HttpTransport {
            client,
            url,
            bearer_token,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &PredictRequest) -> Result<PredictResponse, TransportError> {
        let mut builder = self.client.post(&self.url).json(req);
        if let Some(token) = &self.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder
            .send()
            .map_err(|e| TransportError::Retryable(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .map_err(|e| TransportError::Retryable(format!("{}: reading body: {e}", self.url)))?;
        match status {
            StatusCode::OK => serde_json::from_slice(&body).map_err(|e| {
                TransportError::Fatal(format!("{}: malformed response: {e}", self.url))
            }),
            StatusCode::UNPROCESSABLE_ENTITY => match serde_json::from_slice(&body) {
                Ok(failure) => Err(TransportError::ItemErrors(failure)),
                Err(e) => Err(TransportError::Fatal(format!(
                    "{}: malformed 422 body: {e}",
                    self.url
                ))),
            },
            s if s == StatusCode::TOO_MANY_REQUESTS || s.is_server_error() => Err(
                TransportError::Retryable(format!("{}: HTTP {s}", self.url)),
            ),
            s => Err(TransportError::Fatal(format!(
                "{}: HTTP {s}: {}",
                self.url,
                String::from_utf8_lossy(&body)
            ))),
        }
    }
}
