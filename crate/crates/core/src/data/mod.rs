//! Ingestion and persistence: fetching, quality checks, the shuffled pool,
//! image decoding and checkpoints.

mod checkpoint;
mod decode;
mod fetch;
mod pool;
mod quality;

use std::io::Write;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use decode::{decode_resize, decode_rgb, resize};
pub use fetch::{
    fetch, fetch_entries, get_source, parse_manifest, DirectoryProvider, Failure, FetchConfig, FetchError, FetchResult, FetchStatus,
    ManifestProvider, Provider, RateLimiter, SearchApi, SearchProvider, SourceEntry,
};
pub use pool::{build_pool, DataPool};
pub use quality::{content_id, probe, ImageFormat, ImageRecord, QualityChecker, Rejection};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("duplicate record id {0}")]
    Duplicate(String),
    #[error("cannot decode record {id}: {reason}")]
    Decode { id: String, reason: String },
    #[error("bad pool cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Fetch(#[from] FetchError),
}

/// One line of the fetch report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub source: String,
    /// `ok`, a fetch failure (`http_error`, `timeout`, `io_error`) or `rejected`.
    pub status: String,
    pub reason: String,
    pub bytes: usize,
    pub ms: u128,
}

#[derive(Clone, Debug)]
pub struct IngestOutcome {
    pub accepted: Vec<ImageRecord>,
    pub report: Vec<ReportRow>,
}

impl IngestOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &ReportRow> {
        self.report.iter().filter(|r| r.status != "ok")
    }
}

/// Fetches and quality-checks every entry; `known_ids` count as already seen.
pub fn ingest(provider: &dyn Provider, config: &FetchConfig, known_ids: impl IntoIterator<Item = String>) -> Result<IngestOutcome, DataError> {
    let raw = fetch(provider, config)?;
    let mut checker = QualityChecker::with_seen(config.min_dim, known_ids);
    let mut accepted = Vec::new();
    let mut report = Vec::with_capacity(raw.len());
    for r in &raw {
        let ms = r.elapsed.as_millis();
        let row = match checker.check(r) {
            Ok(rec) => {
                accepted.push(rec);
                ReportRow { source: r.source.clone(), status: "ok".into(), reason: String::new(), bytes: r.bytes.len(), ms }
            }
            Err(Rejection::Fetch(status, reason)) => ReportRow { source: r.source.clone(), status: status.label().into(), reason, bytes: 0, ms },
            Err(rej) => ReportRow { source: r.source.clone(), status: "rejected".into(), reason: rej.to_string(), bytes: r.bytes.len(), ms },
        };
        report.push(row);
    }
    Ok(IngestOutcome { accepted, report })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with header `source,status,reason,bytes,ms`.
pub fn write_report(rows: &[ReportRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "source,status,reason,bytes,ms")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", csv_field(&r.source), r.status, csv_field(&r.reason), r.bytes, r.ms)?;
    }
    Ok(())
}
