//! Loading manifest records into network-ready patches.

use serde::{Deserialize, Serialize};

use crate::data_io::{load_image, read_minutiae, DatasetManifest, FingerprintImage, ManifestRecord, Minutia, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::patch::{extract_all_patches, extract_roi, Patch, PatchConfig, RoiParams};
use crate::train::{PatchSet, TeacherOracle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub roi: RoiParams,
    pub crop_roi: bool,
    pub patch: PatchConfig,
    /// Highest-quality minutiae kept per training image.
    pub train_minutiae_cap: Option<usize>,
    /// Cap at evaluation time; `None` uses every minutia.
    pub eval_minutiae_cap: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            roi: RoiParams::default(),
            crop_roi: true,
            patch: PatchConfig::default(),
            train_minutiae_cap: Some(10),
            eval_minutiae_cap: None,
        }
    }
}

/// An image cropped to its region of interest with minutiae in crop
/// coordinates. `indices[k]` is the line index of `minutiae[k]` in the
/// original sidecar file.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub key: String,
    pub record: ManifestRecord,
    pub image: FingerprintImage,
    pub minutiae: Vec<Minutia>,
    pub indices: Vec<usize>,
}

impl LoadedImage {
    /// Patches for up to `cap` minutiae; `minutia_index` refers to the
    /// original sidecar order.
    pub fn patches(&self, cap: Option<usize>, cfg: &PatchConfig, exec: Exec) -> Result<Vec<Patch>> {
        let mut ps = extract_all_patches(&self.image, &self.minutiae, cap, cfg, exec)?;
        for p in &mut ps {
            p.minutia_index = self.indices[p.minutia_index];
        }
        Ok(ps)
    }
}

pub fn load_record(manifest: &DatasetManifest, rec: &ManifestRecord, cfg: &DataConfig) -> Result<LoadedImage> {
    let image = load_image(&manifest.resolve(&rec.image))?.with_labels(rec.finger_id, rec.impression_id, rec.liveness);
    let all = read_minutiae(&manifest.resolve(&rec.minutiae))?;
    let key = rec.image.to_string_lossy().into_owned();
    let (image, pairs): (FingerprintImage, Vec<(usize, Minutia)>) = if cfg.crop_roi {
        let (bbox, crop) = extract_roi(&image, &cfg.roi)?;
        let kept = all
            .iter()
            .enumerate()
            .filter_map(|(i, m)| bbox.shift_into(m).map(|m| (i, m)))
            .collect();
        (crop, kept)
    } else {
        let kept = all
            .iter()
            .enumerate()
            .filter(|(_, m)| m.inside(image.width, image.height))
            .map(|(i, m)| (i, *m))
            .collect();
        (image, kept)
    };
    if pairs.is_empty() {
        return Err(Error::Empty(format!("{key}: no minutiae inside the usable image area")));
    }
    let (indices, minutiae) = pairs.into_iter().unzip();
    Ok(LoadedImage {
        key,
        record: rec.clone(),
        image,
        minutiae,
        indices,
    })
}

/// Loads every record of a split, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split, cfg: &DataConfig, exec: Exec) -> Result<Vec<LoadedImage>> {
    let recs: Vec<&ManifestRecord> = manifest.split(split).collect();
    exec.try_map(&recs, |r| load_record(manifest, r, cfg))
}

/// Patches, image-level labels and teacher targets for one split.
pub fn build_patch_set(
    manifest: &DatasetManifest,
    split: Split,
    teacher: &dyn TeacherOracle,
    cfg: &DataConfig,
    exec: Exec,
) -> Result<PatchSet> {
    let recs: Vec<&ManifestRecord> = manifest.split(split).collect();
    if recs.is_empty() {
        return Err(Error::Empty(format!("manifest has no {split:?} records")));
    }
    let parts = exec.try_map(&recs, |r| {
        let label = r.liveness.class_index().ok_or_else(|| {
            Error::Manifest(format!("{}: training records need a live/spoof label", r.image.display()))
        })?;
        let img = load_record(manifest, r, cfg)?;
        let mut set = PatchSet::default();
        for p in img.patches(cfg.train_minutiae_cap, &cfg.patch, Exec::Sequential)? {
            let t = teacher.descriptor(&img.key, p.minutia_index, &p)?;
            set.push(p, label, t);
        }
        Ok::<_, Error>(set)
    })?;
    let mut out = PatchSet::default();
    for p in parts {
        out.append(p);
    }
    Ok(out)
}
