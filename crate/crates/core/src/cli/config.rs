use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::AugmentationPolicy;
use crate::contrastive::TrainConfig;
use crate::data::FetchConfig;
use crate::fewshot::{ClassifierKind, FitSettings, Protocol};
use crate::nn::{EncoderConfig, HeadConfig};

/// Everything a run needs. Every field has a default; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for pool shuffling, initialization, augmentation and episodes.
    pub seed: u64,
    pub data: DataSection,
    pub augment: AugmentationPolicy,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `source<TAB>keyword` manifest; takes precedence over `dir`.
    pub manifest: Option<PathBuf>,
    /// Directory scanned recursively for images.
    pub dir: Option<PathBuf>,
    pub fetch: FetchConfig,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Labeled `root/<class>/<image>` tree.
    pub dataset: Option<PathBuf>,
    pub episodes: usize,
    pub kinds: Vec<ClassifierKind>,
    pub fit: FitSettings,
    pub protocols: Vec<Protocol>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: None,
            episodes: 600,
            kinds: ClassifierKind::ALL.to_vec(),
            fit: FitSettings::default(),
            protocols: vec![Protocol { n_way: 5, k_shot: 1, q_query: 15 }, Protocol { n_way: 5, k_shot: 5, q_query: 15 }],
        }
    }
}

/// Output locations, relative to `--out` unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub pool: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { pool: "pool".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

impl RunConfig {
    /// Parses `text` (may be empty), applies `key.path=value` overrides, then
    /// builds and validates the config.
    pub fn resolve(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self, String> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, String> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides, seed)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.encoder.validate()?;
        if self.model.head.hidden_dim == 0 || self.model.head.out_dim == 0 {
            return Err("model.head dimensions must be positive".into());
        }
        self.train.validate()?;
        self.augment.validate().map_err(|e| e.to_string())?;
        self.data.fetch.validate()?;
        let [_, h, w] = self.model.encoder.input_size;
        if self.augment.output_size != (h, w) {
            return Err(format!("augment.output_size {:?} must equal the encoder input size ({h}, {w})", self.augment.output_size));
        }
        if self.eval.episodes == 0 {
            return Err("eval.episodes must be positive".into());
        }
        if let Some(p) = self.eval.protocols.iter().find(|p| p.n_way == 0 || p.k_shot == 0 || p.q_query == 0) {
            return Err(format!("eval protocol {p:?} has a zero entry"));
        }
        if self.eval.fit.reg < 0.0 || self.eval.fit.tolerance <= 0.0 {
            return Err("eval.fit.reg must be >= 0 and eval.fit.tolerance > 0".into());
        }
        Ok(())
    }

    /// Resolved config with a version header.
    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("# soi {}\n{body}", env!("CARGO_PKG_VERSION"))
    }
}

/// Sets `a.b.c = value`, creating tables on the way. The value is read as a
/// TOML literal when it parses as one and as a bare string otherwise.
fn apply_override(table: &mut Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{assignment}`"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("bad key `{key}`"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
