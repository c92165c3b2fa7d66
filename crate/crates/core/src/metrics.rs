//! Biometric error rates, FVC-style pair enumeration and CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{DatasetManifest, Liveness, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matcher::{analyze_image, image_spoof_score, match_templates, ImageAnalysis, MatchParams, Template};
use crate::nn::DualHeadModel;
use crate::pipeline::{load_split, DataConfig};

/// Two score populations. For matching `genuine` holds same-finger scores;
/// for presentation-attack detection `genuine` holds spoof scores and
/// `imposter` live scores (higher = more spoof-like).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadErrors {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

fn nonempty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Empty(format!("no {what} scores")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Param(format!("non-finite {what} score")));
    }
    Ok(())
}

fn pct(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

/// Spoof iff score ≥ threshold.
pub fn pad_errors(live: &[f64], spoof: &[f64], threshold: f64) -> Result<PadErrors> {
    nonempty(live, "live")?;
    nonempty(spoof, "spoof")?;
    let apcer = pct(spoof.iter().filter(|&&s| s < threshold).count(), spoof.len());
    let bpcer = pct(live.iter().filter(|&&s| s >= threshold).count(), live.len());
    Ok(PadErrors {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// Smallest candidate threshold whose false-accept rate is within
/// `far_target` percent. Candidates are the imposter scores plus the next
/// float above the largest one, so a zero target is always reachable.
pub fn far_threshold(imposter: &[f64], far_target: f64) -> Result<f64> {
    nonempty(imposter, "imposter")?;
    if !(far_target >= 0.0) {
        return Err(Error::Param(format!("FAR target {far_target} must be a non-negative percent")));
    }
    let mut sorted = imposter.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        // sorted[i..] are the scores ≥ sorted[i]
        if pct(n - i, n) <= far_target {
            return Ok(sorted[i]);
        }
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
    }
    Ok(sorted[n - 1].next_up())
}

pub fn frr_at_far(genuine: &[f64], imposter: &[f64], far_target: f64) -> Result<f64> {
    nonempty(genuine, "genuine")?;
    let t = far_threshold(imposter, far_target)?;
    Ok(pct(genuine.iter().filter(|&&g| g < t).count(), genuine.len()))
}

/// Spoof misclassification rate at the threshold that keeps live
/// misclassification within `e_live` percent.
pub fn e_fake_at_e_live(live: &[f64], spoof: &[f64], e_live: f64) -> Result<f64> {
    frr_at_far(spoof, live, e_live)
}

/// A comparison between two (finger index, impression index) slots, both
/// zero-based positions in the dataset's sorted finger/impression lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairSlot {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

/// Genuine: every unordered impression pair within a finger. Imposter: the
/// first impression of each finger against the first of every other finger.
pub fn enumerate_fvc_pairs(n_fingers: usize, n_impressions: usize) -> (Vec<PairSlot>, Vec<PairSlot>) {
    let mut genuine = Vec::new();
    for f in 0..n_fingers {
        for i in 0..n_impressions {
            for j in i + 1..n_impressions {
                genuine.push(PairSlot { a: (f, i), b: (f, j) });
            }
        }
    }
    let mut imposter = Vec::new();
    if n_impressions > 0 {
        for f in 0..n_fingers {
            for g in f + 1..n_fingers {
                imposter.push(PairSlot { a: (f, 0), b: (g, 0) });
            }
        }
    }
    (genuine, imposter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrrPoint {
    pub far_target: f64,
    pub frr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub threshold: f64,
    pub e_live_target: f64,
    pub e_fake_at_e_live: f64,
    pub n_live: usize,
    pub n_spoof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub frr_at_far: Vec<FrrPoint>,
    pub n_genuine: usize,
    pub n_imposter: usize,
    pub genuine_mean: f64,
    pub imposter_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pad: Option<PadReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub matching: Option<MatchingReport>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `scores.genuine` = spoof scores, `scores.imposter` = live scores.
pub fn pad_report(scores: &ScoreSet, threshold: f64, e_live_target: f64) -> Result<PadReport> {
    let e = pad_errors(&scores.imposter, &scores.genuine, threshold)?;
    Ok(PadReport {
        apcer: e.apcer,
        bpcer: e.bpcer,
        acer: e.acer,
        threshold,
        e_live_target,
        e_fake_at_e_live: e_fake_at_e_live(&scores.imposter, &scores.genuine, e_live_target)?,
        n_live: scores.imposter.len(),
        n_spoof: scores.genuine.len(),
    })
}

pub fn matching_report(scores: &ScoreSet, far_targets: &[f64]) -> Result<MatchingReport> {
    nonempty(&scores.genuine, "genuine")?;
    nonempty(&scores.imposter, "imposter")?;
    let frr_at_far = far_targets
        .iter()
        .map(|&far| {
            Ok(FrrPoint {
                far_target: far,
                frr: frr_at_far(&scores.genuine, &scores.imposter, far)?,
                threshold: far_threshold(&scores.imposter, far)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MatchingReport {
        frr_at_far,
        n_genuine: scores.genuine.len(),
        n_imposter: scores.imposter.len(),
        genuine_mean: mean(&scores.genuine),
        imposter_mean: mean(&scores.imposter),
    })
}

/// Equal-width histogram over the union of both populations; the last bin
/// is closed on the right.
pub fn histogram_csv(scores: &ScoreSet, bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::Param("histogram needs at least one bin".into()));
    }
    let all: Vec<f64> = scores.genuine.iter().chain(&scores.imposter).copied().collect();
    if all.is_empty() {
        return Err(Error::Empty("no scores to histogram".into()));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut g = vec![0usize; bins];
    let mut im = vec![0usize; bins];
    for &v in &scores.genuine {
        g[bin_of(v)] += 1;
    }
    for &v in &scores.imposter {
        im[bin_of(v)] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,genuine,imposter\n");
    for b in 0..bins {
        let a = lo + width * b as f64;
        let _ = writeln!(out, "{a:.6},{:.6},{},{}", a + width, g[b], im[b]);
    }
    Ok(out)
}

pub fn export_histogram(scores: &ScoreSet, bins: usize, path: &Path) -> Result<()> {
    fs::write(path, histogram_csv(scores, bins)?).map_err(|e| Error::io(path, e))
}

/// One embedding row: image id, minutia index, liveness, descriptor.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub image: String,
    pub minutia_index: usize,
    pub liveness: String,
    pub descriptor: Vec<f64>,
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> Result<String> {
    let dim = rows
        .first()
        .ok_or_else(|| Error::Empty("no embeddings to export".into()))?
        .descriptor
        .len();
    let mut out = String::from("image,minutia_index,liveness");
    for d in 0..dim {
        let _ = write!(out, ",d{d}");
    }
    out.push('\n');
    for r in rows {
        if r.descriptor.len() != dim {
            return Err(Error::Shape("embedding rows differ in dimension".into()));
        }
        let _ = write!(out, "{},{},{}", r.image, r.minutia_index, r.liveness);
        for v in &r.descriptor {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    fs::write(path, embeddings_csv(rows)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub e_live_target: f64,
    pub far_targets: Vec<f64>,
    pub matcher: MatchParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            e_live_target: 0.1,
            far_targets: vec![0.0, 0.1, 1.0],
            matcher: MatchParams::default(),
        }
    }
}

/// Network outputs for every image of a split.
#[derive(Debug, Clone)]
pub struct SplitAnalysis {
    pub images: Vec<AnalyzedImage>,
}

#[derive(Debug, Clone)]
pub struct AnalyzedImage {
    pub key: String,
    pub finger_id: u32,
    pub impression_id: u32,
    pub liveness: Liveness,
    pub spoof_score: f64,
    pub analysis: ImageAnalysis,
}

pub fn analyze_split(
    model: &DualHeadModel,
    manifest: &DatasetManifest,
    split: Split,
    data: &DataConfig,
    exec: Exec,
) -> Result<SplitAnalysis> {
    let loaded = load_split(manifest, split, data, exec)?;
    if loaded.is_empty() {
        return Err(Error::Empty(format!("manifest has no {split:?} records")));
    }
    let images = exec.try_map(&loaded, |img| {
        let analysis = analyze_image(
            model,
            &img.image,
            &img.minutiae,
            data.eval_minutiae_cap,
            &data.patch,
            Exec::Sequential,
        )?;
        Ok::<_, Error>(AnalyzedImage {
            key: img.key.clone(),
            finger_id: img.record.finger_id,
            impression_id: img.record.impression_id,
            liveness: img.record.liveness,
            spoof_score: image_spoof_score(&analysis.patch_spoof_probs)?,
            analysis,
        })
    })?;
    Ok(SplitAnalysis { images })
}

impl SplitAnalysis {
    /// Image-level spoofness: `genuine` = spoof images, `imposter` = live.
    pub fn spoof_scores(&self) -> ScoreSet {
        let pick = |l: Liveness| {
            self.images
                .iter()
                .filter(|i| i.liveness == l)
                .map(|i| i.spoof_score)
                .collect()
        };
        ScoreSet {
            genuine: pick(Liveness::Spoof),
            imposter: pick(Liveness::Live),
        }
    }

    /// Live templates arranged by sorted finger id, then impression id.
    pub fn live_template_grid(&self) -> Result<Vec<Vec<&Template>>> {
        let mut fingers: std::collections::BTreeMap<u32, Vec<(u32, &Template)>> = Default::default();
        for img in self.images.iter().filter(|i| i.liveness == Liveness::Live) {
            fingers
                .entry(img.finger_id)
                .or_default()
                .push((img.impression_id, &img.analysis.template));
        }
        let grid: Vec<Vec<&Template>> = fingers
            .into_values()
            .map(|mut v| {
                v.sort_by_key(|(i, _)| *i);
                v.into_iter().map(|(_, t)| t).collect()
            })
            .collect();
        let n_imp = grid.first().map_or(0, Vec::len);
        if grid.len() < 2 || n_imp < 2 || grid.iter().any(|f| f.len() != n_imp) {
            return Err(Error::Manifest(format!(
                "matching protocol needs >= 2 fingers with the same number (>= 2) of live impressions; found {} fingers with {:?} impressions",
                grid.len(),
                grid.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(grid)
    }

    /// Scores every FVC-protocol pair of live templates.
    pub fn match_scores(&self, params: &MatchParams, exec: Exec) -> Result<ScoreSet> {
        let grid = self.live_template_grid()?;
        let (gen, imp) = enumerate_fvc_pairs(grid.len(), grid[0].len());
        let score = |pairs: &[PairSlot]| -> Result<Vec<f64>> {
            exec.try_map(pairs, |p| {
                Ok(match_templates(grid[p.a.0][p.a.1], grid[p.b.0][p.b.1], params)?.score)
            })
        };
        Ok(ScoreSet {
            genuine: score(&gen)?,
            imposter: score(&imp)?,
        })
    }

    pub fn embedding_rows(&self) -> Vec<EmbeddingRow> {
        self.images
            .iter()
            .flat_map(|img| {
                img.analysis.template.entries.iter().enumerate().map(move |(k, e)| EmbeddingRow {
                    image: img.key.clone(),
                    minutia_index: k,
                    liveness: img.liveness.as_str().to_string(),
                    descriptor: e.descriptor.clone(),
                })
            })
            .collect()
    }
}

pub fn evaluate_spoof(analysis: &SplitAnalysis, cfg: &EvalConfig) -> Result<(PadReport, ScoreSet)> {
    let scores = analysis.spoof_scores();
    if scores.genuine.is_empty() || scores.imposter.is_empty() {
        return Err(Error::Empty(format!(
            "presentation-attack evaluation needs live and spoof images (found {} live, {} spoof)",
            scores.imposter.len(),
            scores.genuine.len()
        )));
    }
    Ok((pad_report(&scores, cfg.threshold, cfg.e_live_target)?, scores))
}

pub fn evaluate_matching(analysis: &SplitAnalysis, cfg: &EvalConfig, exec: Exec) -> Result<(MatchingReport, ScoreSet)> {
    let scores = analysis.match_scores(&cfg.matcher, exec)?;
    Ok((matching_report(&scores, &cfg.far_targets)?, scores))
}

/// Runs both evaluations on one split with a single network pass.
pub fn evaluate(
    model: &DualHeadModel,
    manifest: &DatasetManifest,
    split: Split,
    data: &DataConfig,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<EvalReport> {
    let analysis = analyze_split(model, manifest, split, data, exec)?;
    Ok(EvalReport {
        pad: Some(evaluate_spoof(&analysis, cfg)?.0),
        matching: Some(evaluate_matching(&analysis, cfg, exec)?.0),
    })
}

pub fn export_embeddings(analysis: &SplitAnalysis, path: &Path) -> Result<()> {
    write_embeddings(&analysis.embedding_rows(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_examples() {
        let e = pad_errors(&[0.1, 0.2], &[0.8, 0.9], 0.5).unwrap();
        assert_eq!((e.apcer, e.bpcer, e.acer), (0.0, 0.0, 0.0));
        let e = pad_errors(&[0.1, 0.6], &[0.8, 0.4], 0.5).unwrap();
        assert_eq!((e.apcer, e.bpcer, e.acer), (50.0, 50.0, 50.0));
        // a tie counts as spoof
        let e = pad_errors(&[0.5], &[0.5], 0.5).unwrap();
        assert_eq!((e.apcer, e.bpcer), (0.0, 100.0));
        assert!(pad_errors(&[], &[0.3], 0.5).is_err());
    }

    #[test]
    fn frr_examples() {
        assert_eq!(frr_at_far(&[0.9; 5], &[0.1; 7], 0.1).unwrap(), 0.0);
        assert_eq!(frr_at_far(&[0.9, 0.4], &[0.5, 0.3, 0.2, 0.1], 25.0).unwrap(), 50.0);
        assert_eq!(frr_at_far(&[0.1, 0.2], &[0.8, 0.9], 0.0).unwrap(), 100.0);
        // zero target puts the threshold just above the top imposter
        assert_eq!(frr_at_far(&[0.8], &[0.8, 0.1], 0.0).unwrap(), 100.0);
        assert_eq!(frr_at_far(&[0.8], &[0.8, 0.1], 50.0).unwrap(), 0.0);
        assert!(frr_at_far(&[0.3], &[], 1.0).is_err());
    }

    #[test]
    fn e_fake_identical_distributions() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let v = e_fake_at_e_live(&xs, &xs, 0.1).unwrap();
        assert!((v - 99.9).abs() < 1e-9, "{v}");
    }

    #[test]
    fn fvc_counts() {
        let count = |f, i| {
            let (g, im) = enumerate_fvc_pairs(f, i);
            (g.len(), im.len())
        };
        assert_eq!(count(100, 8), (2800, 4950));
        assert_eq!(count(140, 12), (9240, 9730));
        assert_eq!(count(1, 2), (1, 0));
        assert_eq!(count(10, 4), (60, 45));
    }

    #[test]
    fn histogram_conserves_counts() {
        let s = ScoreSet {
            genuine: vec![0.9, 0.8],
            imposter: vec![0.1, 0.3],
        };
        let csv = histogram_csv(&s, 2).unwrap();
        let total: usize = csv
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f[2].parse::<usize>().unwrap() + f[3].parse::<usize>().unwrap()
            })
            .sum();
        assert_eq!(total, 4);
        let flat = ScoreSet {
            genuine: vec![0.5; 3],
            imposter: vec![],
        };
        assert!(histogram_csv(&flat, 4).unwrap().contains(",3,0"));
    }

    #[test]
    fn embedding_csv_shape() {
        let rows: Vec<EmbeddingRow> = (0..3)
            .map(|i| EmbeddingRow {
                image: format!("img{i}"),
                minutia_index: i,
                liveness: "live".into(),
                descriptor: vec![i as f64; 64],
            })
            .collect();
        let csv = embeddings_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 67));
    }
}
