use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::quality::{content_id, ImageFormat, ImageRecord};
use super::DataError;
use crate::rng::rng_for;

/// Deduplicated records in a seeded shuffled order. Records are kept in
/// insertion order; `order` is the Fisher–Yates permutation of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPool {
    inserted: Vec<ImageRecord>,
    order: Vec<usize>,
    pub shuffle_seed: u64,
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng_for(seed, &[0x9001]));
    p
}

pub fn build_pool(records: Vec<ImageRecord>, shuffle_seed: u64) -> Result<DataPool, DataError> {
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(DataError::Duplicate(r.id.clone()));
        }
    }
    let order = permutation(records.len(), shuffle_seed);
    Ok(DataPool { inserted: records, order, shuffle_seed })
}

#[derive(Serialize, Deserialize)]
struct CachedRecord {
    id: String,
    source: String,
    keyword: Option<String>,
    width: u32,
    height: u32,
    format: ImageFormat,
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    shuffle_seed: u64,
    /// Insertion order.
    records: Vec<CachedRecord>,
}

impl DataPool {
    pub fn len(&self) -> usize {
        self.inserted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inserted.is_empty()
    }

    /// Records in pool (shuffled) order.
    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.order.iter().map(|&i| &self.inserted[i])
    }

    pub fn get(&self, i: usize) -> &ImageRecord {
        &self.inserted[self.order[i]]
    }

    pub fn insertion_order(&self) -> &[ImageRecord] {
        &self.inserted
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inserted.iter().any(|r| r.id == id)
    }

    /// Appends new records and reshuffles the whole pool.
    pub fn extend(&mut self, records: Vec<ImageRecord>) -> Result<(), DataError> {
        let mut all = std::mem::take(&mut self.inserted);
        all.extend(records);
        *self = build_pool(all, self.shuffle_seed)?;
        Ok(())
    }

    /// Writes `pool.json` plus `images/<id>.<ext>` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| DataError::Io { path: p, source }
        };
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(io(&images))?;
        for r in &self.inserted {
            let p = images.join(format!("{}.{}", r.id, r.format.extension()));
            if !p.exists() {
                fs::write(&p, &r.bytes).map_err(io(&p))?;
            }
        }
        let manifest = PoolManifest {
            shuffle_seed: self.shuffle_seed,
            records: self
                .inserted
                .iter()
                .map(|r| CachedRecord { id: r.id.clone(), source: r.source.clone(), keyword: r.keyword.clone(), width: r.width, height: r.height, format: r.format })
                .collect(),
        };
        let p = dir.join("pool.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest).expect("serializable") + "\n").map_err(io(&p))
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let p = dir.join("pool.json");
        let text = fs::read_to_string(&p).map_err(|source| DataError::Io { path: p.display().to_string(), source })?;
        let m: PoolManifest = serde_json::from_str(&text).map_err(|e| DataError::Cache(format!("{}: {e}", p.display())))?;
        let mut records = Vec::with_capacity(m.records.len());
        for c in m.records {
            let ip = dir.join("images").join(format!("{}.{}", c.id, c.format.extension()));
            let bytes = fs::read(&ip).map_err(|source| DataError::Io { path: ip.display().to_string(), source })?;
            if content_id(&bytes) != c.id {
                return Err(DataError::Cache(format!("{} does not match its content hash", ip.display())));
            }
            records.push(ImageRecord { id: c.id, source: c.source, keyword: c.keyword, bytes, width: c.width, height: c.height, format: c.format });
        }
        build_pool(records, m.shuffle_seed)
    }
}
