use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Liveness;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest entry. Paths are stored as written and resolved against the
/// manifest's directory when relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub minutiae: PathBuf,
    pub finger_id: u32,
    pub impression_id: u32,
    pub liveness: Liveness,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Checks the structural invariants without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.impression_id == 0 {
                return Err(Error::Manifest(format!("record {i}: impression_id must be >= 1")));
            }
            if r.split != Split::Test && r.liveness == Liveness::Unknown {
                return Err(Error::Manifest(format!(
                    "record {i}: {:?} record has unknown liveness",
                    r.split
                )));
            }
            if !seen.insert((r.split, r.finger_id, r.impression_id, r.liveness)) {
                return Err(Error::Manifest(format!(
                    "record {i}: duplicate (finger {}, impression {}, {}) in {:?} split",
                    r.finger_id, r.impression_id, r.liveness, r.split
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = DatasetManifest { root, records };
    for (i, r) in manifest.records.iter().enumerate() {
        for p in [&r.image, &r.minutiae] {
            let full = manifest.resolve(p);
            if !full.is_file() {
                return Err(Error::MissingFile { record: i, path: full });
            }
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(&manifest.records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Default splitter: moves `val_fraction` of the train pool (train + val
/// records) into `Val`, stratified by liveness. Test records are untouched.
pub fn assign_splits(records: &mut [ManifestRecord], val_fraction: f64, seed: u64) -> Result<()> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Param(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [Liveness::Live, Liveness::Spoof, Liveness::Unknown] {
        let mut pool: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split != Split::Test && r.liveness == class)
            .map(|(i, _)| i)
            .collect();
        pool.shuffle(&mut rng);
        let n_val = (pool.len() as f64 * val_fraction).round() as usize;
        for (k, &i) in pool.iter().enumerate() {
            records[i].split = if k < n_val { Split::Val } else { Split::Train };
        }
    }
    Ok(())
}
