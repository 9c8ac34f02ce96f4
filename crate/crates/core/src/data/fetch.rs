//! Concurrent, rate-limited fetching from pluggable providers.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FetchConfig {
    pub max_concurrency: usize,
    pub requests_per_second: f64,
    pub retries: u32,
    pub timeout_ms: u64,
    /// First retry delay; doubles with every further attempt.
    pub backoff_ms: u64,
    pub min_dim: u32,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self { max_concurrency: 4, requests_per_second: 10.0, retries: 2, timeout_ms: 10_000, backoff_ms: 200, min_dim: 32 }
    }
}

impl FetchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrency == 0 {
            return Err("max_concurrency must be positive".into());
        }
        if !(self.requests_per_second > 0.0 && self.requests_per_second.is_finite()) {
            return Err("requests_per_second must be positive".into());
        }
        if self.timeout_ms == 0 || self.min_dim == 0 {
            return Err("timeout_ms and min_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("cannot read manifest {path}: {source}")]
    Manifest { path: String, source: std::io::Error },
    #[error("cannot list {path}: {source}")]
    Listing { path: String, source: std::io::Error },
}

/// One item to fetch. `keyword` records provenance only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceEntry {
    pub source: String,
    pub keyword: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FetchStatus {
    Ok,
    HttpError,
    Timeout,
    IoError,
}

impl FetchStatus {
    pub fn label(self) -> &'static str {
        match self {
            FetchStatus::Ok => "ok",
            FetchStatus::HttpError => "http_error",
            FetchStatus::Timeout => "timeout",
            FetchStatus::IoError => "io_error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Failure {
    pub status: FetchStatus,
    pub reason: String,
    /// Worth another attempt (timeouts, 5xx, 429, transport errors).
    pub transient: bool,
}

impl Failure {
    pub fn permanent(status: FetchStatus, reason: impl Into<String>) -> Self {
        Self { status, reason: reason.into(), transient: false }
    }

    pub fn transient(status: FetchStatus, reason: impl Into<String>) -> Self {
        Self { status, reason: reason.into(), transient: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FetchResult {
    pub source: String,
    pub keyword: Option<String>,
    pub status: FetchStatus,
    pub reason: String,
    pub bytes: Vec<u8>,
    pub attempts: u32,
    pub elapsed: Duration,
}

/// Lists entries and retrieves their bytes.
pub trait Provider: Sync {
    fn entries(&self) -> Result<Vec<SourceEntry>, FetchError>;
    fn get(&self, entry: &SourceEntry, timeout: Duration) -> Result<Vec<u8>, Failure>;
}

/// Reads `http(s)://` URLs, `file://` URLs and plain paths (relative to `base`).
pub fn get_source(source: &str, base: &Path, timeout: Duration) -> Result<Vec<u8>, Failure> {
    if source.starts_with("http://") || source.starts_with("https://") {
        http_get(source, timeout)
    } else {
        let path = source.strip_prefix("file://").unwrap_or(source);
        let path = if Path::new(path).is_absolute() { PathBuf::from(path) } else { base.join(path) };
        fs::read(&path).map_err(|e| Failure::permanent(FetchStatus::IoError, format!("{}: {e}", path.display())))
    }
}

fn http_get(url: &str, timeout: Duration) -> Result<Vec<u8>, Failure> {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
    let mut resp = agent.get(url).call().map_err(transport_failure)?;
    let code = resp.status().as_u16();
    if !(200..300).contains(&code) {
        let transient = code == 408 || code == 429 || code >= 500;
        return Err(Failure { status: FetchStatus::HttpError, reason: format!("HTTP {code}"), transient });
    }
    resp.body_mut().with_config().limit(64 << 20).read_to_vec().map_err(transport_failure)
}

fn transport_failure(e: ureq::Error) -> Failure {
    match e {
        ureq::Error::Timeout(t) => Failure::transient(FetchStatus::Timeout, format!("timed out ({t})")),
        ureq::Error::StatusCode(c) => Failure { status: FetchStatus::HttpError, reason: format!("HTTP {c}"), transient: c >= 500 || c == 429 },
        ureq::Error::BadUri(u) => Failure::permanent(FetchStatus::HttpError, format!("bad URI {u}")),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => Failure::transient(FetchStatus::Timeout, e.to_string()),
        other => Failure::transient(FetchStatus::IoError, other.to_string()),
    }
}

/// Parses `source[TAB]keyword` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Vec<SourceEntry> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            let mut parts = l.splitn(2, '\t');
            let source = parts.next().unwrap_or_default().trim().to_string();
            let keyword = parts.next().map(|k| k.trim().to_string()).filter(|k| !k.is_empty());
            SourceEntry { source, keyword }
        })
        .collect()
}

/// Entries from a manifest file; relative paths resolve against its directory.
pub struct ManifestProvider {
    pub path: PathBuf,
}

impl Provider for ManifestProvider {
    fn entries(&self) -> Result<Vec<SourceEntry>, FetchError> {
        let text = fs::read_to_string(&self.path).map_err(|source| FetchError::Manifest { path: self.path.display().to_string(), source })?;
        Ok(parse_manifest(&text))
    }

    fn get(&self, entry: &SourceEntry, timeout: Duration) -> Result<Vec<u8>, Failure> {
        get_source(&entry.source, self.path.parent().unwrap_or(Path::new(".")), timeout)
    }
}

/// Every regular file below `root`, in sorted path order; the parent
/// directory name is kept as the keyword.
pub struct DirectoryProvider {
    pub root: PathBuf,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut items: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    items.sort_by_key(|e| e.file_name());
    for e in items {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk(&p, out)?;
        } else if !e.file_name().to_string_lossy().starts_with('.') {
            out.push(p);
        }
    }
    Ok(())
}

impl Provider for DirectoryProvider {
    fn entries(&self) -> Result<Vec<SourceEntry>, FetchError> {
        let mut files = Vec::new();
        walk(&self.root, &mut files).map_err(|source| FetchError::Listing { path: self.root.display().to_string(), source })?;
        Ok(files
            .into_iter()
            .map(|p| {
                let keyword = p.parent().filter(|d| *d != self.root).and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned());
                SourceEntry { source: p.display().to_string(), keyword }
            })
            .collect())
    }

    fn get(&self, entry: &SourceEntry, timeout: Duration) -> Result<Vec<u8>, Failure> {
        // Sources already carry the root prefix.
        get_source(&entry.source, Path::new(""), timeout)
    }
}

/// A keyword image-search backend returning result URLs.
pub trait SearchApi: Sync {
    fn search(&self, keyword: &str, limit: usize) -> Result<Vec<String>, Failure>;
}

/// Runs each keyword through a [`SearchApi`]. A failed search (say, bad
/// credentials) becomes one failed entry `search:<keyword>`.
pub struct SearchProvider<A: SearchApi> {
    pub api: A,
    pub keywords: Vec<String>,
    pub per_keyword: usize,
    failed: Mutex<HashMap<String, Failure>>,
}

impl<A: SearchApi> SearchProvider<A> {
    pub fn new(api: A, keywords: Vec<String>, per_keyword: usize) -> Self {
        Self { api, keywords, per_keyword, failed: Mutex::new(HashMap::new()) }
    }
}

impl<A: SearchApi> Provider for SearchProvider<A> {
    fn entries(&self) -> Result<Vec<SourceEntry>, FetchError> {
        let mut out = Vec::new();
        let mut failed = self.failed.lock().expect("not poisoned");
        for kw in &self.keywords {
            match self.api.search(kw, self.per_keyword) {
                Ok(urls) => out.extend(urls.into_iter().map(|source| SourceEntry { source, keyword: Some(kw.clone()) })),
                Err(f) => {
                    warn!("search for {kw:?} failed: {}", f.reason);
                    let source = format!("search:{kw}");
                    failed.insert(source.clone(), f);
                    out.push(SourceEntry { source, keyword: Some(kw.clone()) });
                }
            }
        }
        Ok(out)
    }

    fn get(&self, entry: &SourceEntry, timeout: Duration) -> Result<Vec<u8>, Failure> {
        if let Some(f) = self.failed.lock().expect("not poisoned").get(&entry.source) {
            return Err(Failure { transient: false, ..f.clone() });
        }
        get_source(&entry.source, Path::new("."), timeout)
    }
}

/// Token bucket with a burst of one: grants are spaced `1 / rate` apart.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        Self { interval: Duration::from_secs_f64(1.0 / per_second), next: Mutex::new(None) }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock().expect("not poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

fn fetch_entry(provider: &dyn Provider, entry: &SourceEntry, config: &FetchConfig, limiter: &RateLimiter) -> FetchResult {
    let start = Instant::now();
    let timeout = Duration::from_millis(config.timeout_ms);
    let mut attempt = 0;
    let outcome = loop {
        limiter.acquire();
        attempt += 1;
        match provider.get(entry, timeout) {
            Ok(bytes) => break Ok(bytes),
            Err(f) if f.transient && attempt <= config.retries => {
                let delay = config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                debug!("{}: {} (attempt {attempt}), retrying in {delay} ms", entry.source, f.reason);
                thread::sleep(Duration::from_millis(delay));
            }
            Err(f) => break Err(f),
        }
    };
    let (status, reason, bytes) = match outcome {
        Ok(b) => (FetchStatus::Ok, String::new(), b),
        Err(f) => (f.status, f.reason, Vec::new()),
    };
    FetchResult { source: entry.source.clone(), keyword: entry.keyword.clone(), status, reason, bytes, attempts: attempt, elapsed: start.elapsed() }
}

/// Fetches every entry with at most `max_concurrency` in flight and a shared
/// rate limit. Results come back in entry order.
pub fn fetch(provider: &dyn Provider, config: &FetchConfig) -> Result<Vec<FetchResult>, FetchError> {
    let entries = provider.entries()?;
    Ok(fetch_entries(provider, &entries, config))
}

pub fn fetch_entries(provider: &dyn Provider, entries: &[SourceEntry], config: &FetchConfig) -> Vec<FetchResult> {
    let limiter = RateLimiter::new(config.requests_per_second);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<FetchResult>>> = entries.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..config.max_concurrency.min(entries.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(entry) = entries.get(i) else { break };
                let r = fetch_entry(provider, entry, config, &limiter);
                *slots[i].lock().expect("not poisoned") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("not poisoned").expect("every entry fetched")).collect()
}
