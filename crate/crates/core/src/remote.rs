//! JSON-over-HTTP client for a remote scoring server.
//!
//! # Wire format
//!
//! `POST /v1/score` takes a [`ScoreRequest`]:
//!
//! - `encoder_tokens`: visible token ids, with the `i`-th masked slot (from
//!   0, left to right) written as the marker `-(i + 1)`;
//! - `decoder_prefix`: for every slot before the target, its marker followed
//!   by the tokens filling it, then the target's marker. A marker with no
//!   tokens after it (other than the target) is a slot left unfilled;
//! - `candidates`: token-id lists to score in the target slot.
//!
//! The server answers with a [`ScoreResponse`] holding one log-probability per
//! candidate. `GET /v1/info` returns a [`ServerInfo`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::{Capability, Provider};
use crate::types::{EncoderItem, MaskedQuery, TokenSeq, Violation};

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("cannot reach {url}: {detail}")]
    Connection { url: String, detail: String },
    #[error("server rejected the request ({status}): {body}")]
    Client { status: u16, body: String },
    #[error("server fault ({status}): {body}")]
    Server { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("invalid request: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidRequest(Vec<Violation>),
}

impl RemoteError {
    /// Transport failures and server faults are worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            RemoteError::Timeout { .. } | RemoteError::Connection { .. } | RemoteError::Server { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt_prefix: String,
    pub encoder_tokens: Vec<i64>,
    pub decoder_prefix: Vec<i64>,
    pub candidates: Vec<Vec<i64>>,
    pub normalize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub encoder_tokens: u64,
    pub decoder_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub log_probs: Vec<f64>,
    pub model_id: String,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub model_id: String,
    pub max_len: usize,
    pub styles: Vec<String>,
}

/// Error body returned with 4xx/5xx statuses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

fn marker(slot: usize) -> i64 {
    -(slot as i64) - 1
}

/// Encodes a query and its candidates as a request.
pub fn to_wire(query: &MaskedQuery, candidates: &[TokenSeq], prompt_prefix: &str, normalize: bool) -> ScoreRequest {
    let encoder_tokens = query
        .encoder
        .iter()
        .map(|item| match *item {
            EncoderItem::Token(t) => t as i64,
            EncoderItem::Sentinel(i) => marker(i),
        })
        .collect();
    let mut decoder_prefix = Vec::new();
    for (i, fill) in query.fills.iter().enumerate() {
        decoder_prefix.push(marker(i));
        decoder_prefix.extend(fill.iter().map(|&t| t as i64));
    }
    decoder_prefix.push(marker(query.target_slot));
    ScoreRequest {
        prompt_prefix: prompt_prefix.to_string(),
        encoder_tokens,
        decoder_prefix,
        candidates: candidates
            .iter()
            .map(|c| c.ids().iter().map(|&t| t as i64).collect())
            .collect(),
        normalize,
        request_id: None,
    }
}

fn token(v: i64, field: &str, out: &mut Vec<Violation>) -> Option<u32> {
    match u32::try_from(v) {
        Ok(t) => Some(t),
        Err(_) => {
            out.push(Violation::new(
                field,
                format!("{v} is neither a token id nor an expected marker"),
            ));
            None
        }
    }
}

impl ScoreRequest {
    /// Checks the sentinel convention; each violation names its field.
    pub fn validate(&self) -> Vec<Violation> {
        self.decode().err().unwrap_or_default()
    }

    /// Decodes a request back into a query and candidates.
    pub fn decode(&self) -> std::result::Result<(MaskedQuery, Vec<TokenSeq>), Vec<Violation>> {
        let mut v = Vec::new();
        let mut encoder = Vec::with_capacity(self.encoder_tokens.len());
        let mut slots = 0usize;
        for &t in &self.encoder_tokens {
            if t < 0 {
                if t != marker(slots) {
                    v.push(Violation::new(
                        "encoder_tokens",
                        format!("marker {t} out of order; expected {}", marker(slots)),
                    ));
                }
                encoder.push(EncoderItem::Sentinel(slots));
                slots += 1;
            } else if let Some(t) = token(t, "encoder_tokens", &mut v) {
                encoder.push(EncoderItem::Token(t));
            }
        }
        let mut fills: Vec<Vec<u32>> = Vec::new();
        let mut current: Option<Vec<u32>> = None;
        for (i, &t) in self.decoder_prefix.iter().enumerate() {
            if t < 0 {
                if t != marker(fills.len() + current.is_some() as usize) {
                    v.push(Violation::new(
                        "decoder_prefix",
                        format!("marker {t} at index {i} out of order"),
                    ));
                }
                if let Some(f) = current.take() {
                    fills.push(f);
                }
                current = Some(Vec::new());
            } else {
                match current.as_mut() {
                    None => v.push(Violation::new("decoder_prefix", "tokens before the first marker")),
                    Some(f) => {
                        if let Some(t) = token(t, "decoder_prefix", &mut v) {
                            f.push(t);
                        }
                    }
                }
            }
        }
        match &current {
            None => v.push(Violation::new("decoder_prefix", "missing the target marker")),
            Some(f) if !f.is_empty() => v.push(Violation::new("decoder_prefix", "tokens after the target marker")),
            Some(_) => {}
        }
        let target_slot = fills.len();
        if target_slot >= slots && current.is_some() {
            v.push(Violation::new(
                "decoder_prefix",
                format!("target marker {} has no slot in encoder_tokens", marker(target_slot)),
            ));
        }
        if self.candidates.is_empty() {
            v.push(Violation::new("candidates", "empty candidate list"));
        }
        let mut candidates = Vec::with_capacity(self.candidates.len());
        for (j, c) in self.candidates.iter().enumerate() {
            if c.is_empty() {
                v.push(Violation::new("candidates", format!("candidate {j} is empty")));
            }
            candidates.push(TokenSeq(
                c.iter().filter_map(|&t| token(t, "candidates", &mut v)).collect(),
            ));
        }
        if !v.is_empty() {
            return Err(v);
        }
        MaskedQuery::new(encoder, fills, target_slot)
            .map(|q| (q, candidates))
            .map_err(|e| vec![Violation::new("encoder_tokens", e.to_string())])
    }
}

impl ScoreResponse {
    /// Checks the response against the request it answers.
    pub fn check_against(&self, request: &ScoreRequest) -> std::result::Result<(), RemoteError> {
        if self.log_probs.len() != request.candidates.len() {
            return Err(RemoteError::BadResponse(format!(
                "{} log_probs for {} candidates",
                self.log_probs.len(),
                request.candidates.len()
            )));
        }
        if let Some(j) = self.log_probs.iter().position(|p| !p.is_finite()) {
            return Err(RemoteError::BadResponse(format!("log_probs[{j}] is not finite")));
        }
        if request.request_id.is_some() && self.request_id.is_some() && self.request_id != request.request_id {
            return Err(RemoteError::BadResponse(format!(
                "request_id {:?} answers {:?}",
                self.request_id, request.request_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub prompt_prefix: String,
    pub normalize: bool,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout_secs: 120.0,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
            prompt_prefix: String::new(),
            normalize: false,
        }
    }
}

fn transport_error(url: &str, e: reqwest::Error) -> RemoteError {
    if e.is_timeout() {
        RemoteError::Timeout { url: url.to_string() }
    } else {
        RemoteError::Connection {
            url: url.to_string(),
            detail: e.to_string(),
        }
    }
}

fn with_retries<T>(
    retries: u32,
    backoff: Duration,
    mut attempt: impl FnMut() -> std::result::Result<T, RemoteError>,
) -> std::result::Result<T, RemoteError> {
    let mut tries = 0;
    loop {
        match attempt() {
            Err(e) if e.is_transient() && tries < retries => {
                log::warn!("retrying after: {e}");
                thread::sleep(backoff * 2u32.saturating_pow(tries));
                tries += 1;
            }
            r => return r,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(
    url: &str,
    resp: reqwest::blocking::Response,
) -> std::result::Result<T, RemoteError> {
    let status = resp.status();
    let body = resp.text().map_err(|e| transport_error(url, e))?;
    if status.is_client_error() {
        return Err(RemoteError::Client {
            status: status.as_u16(),
            body,
        });
    }
    if status.is_server_error() || status != StatusCode::OK {
        return Err(RemoteError::Server {
            status: status.as_u16(),
            body,
        });
    }
    serde_json::from_str(&body).map_err(|e| RemoteError::BadResponse(e.to_string()))
}

/// Sends one request to `POST {endpoint}/v1/score`, retrying transient
/// failures with exponential backoff. 4xx responses are never retried.
pub fn remote_score(
    client: &Client,
    endpoint: &str,
    request: &ScoreRequest,
    retries: u32,
    backoff: Duration,
) -> std::result::Result<ScoreResponse, RemoteError> {
    let violations = request.validate();
    if !violations.is_empty() {
        return Err(RemoteError::InvalidRequest(violations));
    }
    let url = format!("{endpoint}/v1/score");
    let response: ScoreResponse = with_retries(retries, backoff, || {
        let resp = client
            .post(&url)
            .json(request)
            .send()
            .map_err(|e| transport_error(&url, e))?;
        read_json(&url, resp)
    })?;
    response.check_against(request)?;
    Ok(response)
}

/// Fetches `GET {endpoint}/v1/info`.
pub fn fetch_info(
    client: &Client,
    endpoint: &str,
    retries: u32,
    backoff: Duration,
) -> std::result::Result<ServerInfo, RemoteError> {
    let url = format!("{endpoint}/v1/info");
    with_retries(retries, backoff, || {
        let resp = client.get(&url).send().map_err(|e| transport_error(&url, e))?;
        read_json(&url, resp)
    })
}

/// An HTTP client with the configured timeout.
pub fn blocking_client(config: &RemoteConfig) -> std::result::Result<Client, RemoteError> {
    Client::builder()
        .timeout(Duration::from_secs_f64(config.timeout_secs))
        .build()
        .map_err(|e| RemoteError::Connection {
            url: config.endpoint.clone(),
            detail: e.to_string(),
        })
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// A [`Provider`] backed by a remote server. Safe to share across threads;
/// at most `max_in_flight` requests are outstanding at once.
pub struct RemoteProvider {
    client: Client,
    config: RemoteConfig,
    info: ServerInfo,
    permits: Permits,
    next_id: AtomicU64,
}

impl RemoteProvider {
    /// Connects and fetches the server's capability descriptor.
    pub fn connect(config: RemoteConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Domain("max_in_flight must be at least 1".into()));
        }
        if config.timeout_secs.is_nan() || config.timeout_secs <= 0.0 {
            return Err(Error::Domain("timeout must be positive".into()));
        }
        let client = blocking_client(&config)?;
        let info = fetch_info(
            &client,
            &config.endpoint,
            config.retries,
            Duration::from_millis(config.backoff_ms),
        )?;
        Ok(RemoteProvider {
            client,
            permits: Permits {
                free: Mutex::new(config.max_in_flight),
                cv: Condvar::new(),
            },
            config,
            info,
            next_id: AtomicU64::new(0),
        })
    }

    pub fn info(&self) -> &ServerInfo {
        &self.info
    }
}

impl Provider for RemoteProvider {
    fn capability(&self) -> Capability {
        Capability {
            max_context_len: Some(self.info.max_len),
            multi_token: true,
            deterministic: false,
            vocab_size: None,
        }
    }

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
        let mut request = to_wire(query, candidates, &self.config.prompt_prefix, self.config.normalize);
        request.request_id = Some(self.next_id.fetch_add(1, Ordering::Relaxed).to_string());
        let _permit = self.permits.acquire();
        let response = remote_score(
            &self.client,
            &self.config.endpoint,
            &request,
            self.config.retries,
            Duration::from_millis(self.config.backoff_ms),
        )?;
        Ok(response.log_probs)
    }
}
