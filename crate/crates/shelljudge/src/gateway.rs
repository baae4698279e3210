//! Model endpoint client: the only module that opens network connections.
//!
//! Requests use a minimal chat-completion JSON shape (single user message)
//! with a per-model switch for legacy completion endpoints. Transient
//! failures (timeouts, connection errors, 408/429/5xx) are retried with
//! exponential backoff. An on-disk response cache keyed by a digest of
//! (model_id, prompt, temperature, max_tokens) makes benchmark re-runs free
//! and deterministic.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_s() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiStyle {
    /// POST a `messages` array, read `choices[0].message.content`.
    #[default]
    Chat,
    /// POST a `prompt` string, read `choices[0].text`.
    Completion,
}

/// One model endpoint. Credentials are referenced by environment variable
/// name, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub endpoint_url: String,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub api_style: ApiStyle,
    /// In-flight request cap for this model; 0 means unlimited.
    #[serde(default)]
    pub max_concurrent_requests: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::Config("model_id is empty".into()));
        }
        if !(self.endpoint_url.starts_with("http://") || self.endpoint_url.starts_with("https://"))
        {
            return Err(GatewayError::Config(format!(
                "endpoint_url `{}` is not an absolute http(s) URL",
                self.endpoint_url
            )));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ModelsFile {
    models: Vec<ModelConfig>,
}

/// Load and validate a models config file (`[[models]]` entries).
pub fn load_models(path: &Path) -> Result<Vec<ModelConfig>, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        GatewayError::Config(format!("cannot read models file {}: {e}", path.display()))
    })?;
    let file: ModelsFile = toml::from_str(&text)
        .map_err(|e| GatewayError::Config(format!("models file {}: {e}", path.display())))?;
    for m in &file.models {
        m.validate()?;
    }
    Ok(file.models)
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("auth token environment variable `{0}` is not set")]
    Auth(String),
    #[error("request to {0} timed out")]
    Timeout(String),
    #[error("HTTP {status} from {url}: {body}")]
    Http {
        status: u16,
        url: String,
        body: String,
    },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("cache i/o error at {path}: {detail}")]
    CacheIo { path: PathBuf, detail: String },
    #[error("model config error: {0}")]
    Config(String),
    #[error("transport error for {url}: {detail}")]
    Transport { url: String, detail: String },
}

/// A completion and how long the endpoint took to produce it.
#[derive(Debug, Clone)]
pub struct Generation {
    pub text: String,
    pub latency: Duration,
}

fn request_body(prompt: &str, cfg: &ModelConfig) -> serde_json::Value {
    match cfg.api_style {
        ApiStyle::Chat => serde_json::json!({
            "model": cfg.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": cfg.max_tokens,
            "temperature": cfg.temperature,
        }),
        ApiStyle::Completion => serde_json::json!({
            "model": cfg.model_id,
            "prompt": prompt,
            "max_tokens": cfg.max_tokens,
            "temperature": cfg.temperature,
        }),
    }
}

fn parse_completion(body: &str, style: ApiStyle) -> Result<String, GatewayError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::BadResponse(format!("not JSON: {e}")))?;
    let text = match style {
        ApiStyle::Chat => v
            .pointer("/choices/0/message/content")
            .and_then(|t| t.as_str()),
        ApiStyle::Completion => v.pointer("/choices/0/text").and_then(|t| t.as_str()),
    };
    text.map(str::to_string).ok_or_else(|| {
        GatewayError::BadResponse(format!(
            "no completion text at the expected path in: {}",
            &body[..body.len().min(200)]
        ))
    })
}

fn retryable_status(status: u16) -> bool {
    matches!(status, 408 | 429) || (500..600).contains(&status)
}

fn backoff(attempt: u32) -> Duration {
    let base = 100u64;
    Duration::from_millis((base << attempt.min(5)).min(2_000))
}

/// A counting gate limiting in-flight requests per model.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct GatePermit(Arc<Gate>);

impl Drop for GatePermit {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

fn gates() -> &'static Mutex<HashMap<String, Arc<Gate>>> {
    static GATES: OnceLock<Mutex<HashMap<String, Arc<Gate>>>> = OnceLock::new();
    GATES.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Block until the model's concurrency cap admits another request.
fn acquire_permit(model_id: &str, cap: usize) -> Option<GatePermit> {
    if cap == 0 {
        return None;
    }
    let gate = {
        let mut map = gates().lock().expect("gate registry lock");
        Arc::clone(map.entry(model_id.to_string()).or_insert_with(|| {
            Arc::new(Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
            })
        }))
    };
    let mut n = gate.in_flight.lock().expect("gate lock");
    while *n >= cap {
        n = gate.freed.wait(n).expect("gate wait");
    }
    *n += 1;
    drop(n);
    Some(GatePermit(gate))
}

/// Cheap reachability probe used before a benchmark spends any tokens: the
/// credential must resolve and the endpoint must accept a TCP connection.
pub fn check_reachable(cfg: &ModelConfig) -> Result<(), String> {
    if let Some(name) = &cfg.auth_token_env {
        if !name.is_empty() && std::env::var(name).is_err() {
            return Err(format!(
                "auth token environment variable `{name}` is not set"
            ));
        }
    }
    let url = &cfg.endpoint_url;
    let without_scheme = url
        .strip_prefix("http://")
        .or_else(|| url.strip_prefix("https://"))
        .ok_or_else(|| format!("endpoint `{url}` is not an http(s) URL"))?;
    let host_port = without_scheme.split('/').next().unwrap_or("");
    let default_port = if url.starts_with("https://") { 443 } else { 80 };
    let addr = if host_port.contains(':') {
        host_port.to_string()
    } else {
        format!("{host_port}:{default_port}")
    };
    use std::net::ToSocketAddrs;
    let resolved = addr
        .to_socket_addrs()
        .map_err(|e| format!("cannot resolve `{addr}`: {e}"))?
        .next()
        .ok_or_else(|| format!("`{addr}` resolved to no addresses"))?;
    std::net::TcpStream::connect_timeout(&resolved, Duration::from_secs(3))
        .map_err(|e| format!("cannot connect to `{addr}`: {e}"))?;
    Ok(())
}

/// Send one prompt to the endpoint, retrying transient failures up to
/// `max_retries` times. The credential is resolved before any network call,
/// and the model's concurrency cap is honored for the whole exchange.
pub fn generate(prompt: &str, cfg: &ModelConfig) -> Result<Generation, GatewayError> {
    cfg.validate()?;
    let token = match &cfg.auth_token_env {
        Some(name) if !name.is_empty() => {
            Some(std::env::var(name).map_err(|_| GatewayError::Auth(name.clone()))?)
        }
        _ => None,
    };
    let _permit = acquire_permit(&cfg.model_id, cfg.max_concurrent_requests);

    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.request_timeout_s))
        .build()
        .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
    let body = request_body(prompt, cfg);

    let started = Instant::now();
    let mut attempt: u32 = 0;
    loop {
        let mut req = client.post(&cfg.endpoint_url).json(&body);
        if let Some(tok) = &token {
            req = req.bearer_auth(tok);
        }
        let failure: GatewayError = match req.send() {
            Ok(resp) => {
                let status = resp.status().as_u16();
                let text = resp.text().unwrap_or_default();
                if (200..300).contains(&status) {
                    let completion = parse_completion(&text, cfg.api_style)?;
                    return Ok(Generation {
                        text: completion,
                        latency: started.elapsed(),
                    });
                }
                let err = GatewayError::Http {
                    status,
                    url: cfg.endpoint_url.clone(),
                    body: text.chars().take(200).collect(),
                };
                if !retryable_status(status) {
                    return Err(err);
                }
                err
            }
            Err(e) if e.is_timeout() => GatewayError::Timeout(cfg.endpoint_url.clone()),
            Err(e) => GatewayError::Transport {
                url: cfg.endpoint_url.clone(),
                detail: e.to_string(),
            },
        };

        if attempt >= cfg.max_retries {
            if cfg.max_retries == 0 {
                return Err(failure);
            }
            return Err(GatewayError::RetriesExhausted {
                attempts: attempt + 1,
                last: failure.to_string(),
            });
        }
        std::thread::sleep(backoff(attempt));
        attempt += 1;
    }
}

/// One cached completion, with enough of the key echoed back to detect
/// corruption and to answer "what produced this".
#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    model_id: String,
    temperature: f64,
    max_tokens: u32,
    prompt_sha256: String,
    completion: String,
}

/// On-disk key → completion store under a cache directory, one JSON file per
/// entry named by the hex digest of the key. Writes are serialized through a
/// single writer and performed atomically (write-then-rename).
pub struct ResponseCache {
    dir: PathBuf,
    writer: Mutex<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, GatewayError> {
        std::fs::create_dir_all(dir).map_err(|e| GatewayError::CacheIo {
            path: dir.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(ResponseCache {
            dir: dir.to_path_buf(),
            writer: Mutex::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key: digest of (model_id, prompt, temperature, max_tokens).
    pub fn key(cfg: &ModelConfig, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(cfg.model_id.as_bytes());
        h.update([0x1f]);
        h.update(prompt.as_bytes());
        h.update([0x1f]);
        h.update(format!("{}", cfg.temperature).as_bytes());
        h.update([0x1f]);
        h.update(format!("{}", cfg.max_tokens).as_bytes());
        hex::encode(h.finalize())
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entry_path(key).is_file()
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, GatewayError> {
        let path = self.entry_path(key);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| GatewayError::CacheIo {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| GatewayError::CacheIo {
            path: path.clone(),
            detail: format!("corrupted cache entry: {e}"),
        })?;
        Ok(Some(entry.completion))
    }

    pub fn put(
        &self,
        key: &str,
        cfg: &ModelConfig,
        prompt: &str,
        completion: &str,
    ) -> Result<(), GatewayError> {
        let mut counter = self.writer.lock().expect("cache writer lock");
        *counter += 1;
        let entry = CacheEntry {
            model_id: cfg.model_id.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            prompt_sha256: hex::encode(Sha256::digest(prompt.as_bytes())),
            completion: completion.to_string(),
        };
        let path = self.entry_path(key);
        let tmp = self
            .dir
            .join(format!(".tmp-{}-{}", std::process::id(), *counter));
        let io = |e: std::io::Error| GatewayError::CacheIo {
            path: path.clone(),
            detail: e.to_string(),
        };
        std::fs::write(
            &tmp,
            serde_json::to_string_pretty(&entry).expect("serializable"),
        )
        .map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(|e| GatewayError::CacheIo {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        Ok(())
    }
}

/// Cache-through generation: a hit returns the stored text with zero network
/// calls; a miss calls [`generate`] and stores the result.
pub fn generate_cached(
    prompt: &str,
    cfg: &ModelConfig,
    cache: &ResponseCache,
) -> Result<(Generation, CacheOutcome), GatewayError> {
    let key = ResponseCache::key(cfg, prompt);
    if let Some(text) = cache.get(&key)? {
        return Ok((
            Generation {
                text,
                latency: Duration::ZERO,
            },
            CacheOutcome::Hit,
        ));
    }
    let generation = generate(prompt, cfg)?;
    cache.put(&key, cfg, prompt, &generation.text)?;
    Ok((generation, CacheOutcome::Miss))
}
