//! Image-level decisions: spoofness averaging and descriptor-based
//! fingerprint comparison.
//!
//! Matching pairs minutiae by mutual nearest neighbours in cosine
//! similarity, keeps the pairs consistent with the best rigid transform
//! (position + direction), and scores the kept set by its mean similarity
//! damped for short correspondence lists.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{normalize_angle, FingerprintImage, Liveness, Minutia};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::DualHeadModel;
use crate::patch::{extract_all_patches, PatchConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub minutia: Minutia,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub image: String,
    pub finger_id: u32,
    pub impression_id: u32,
    pub entries: Vec<TemplateEntry>,
}

impl Template {
    pub fn new(image: impl Into<String>, finger_id: u32, impression_id: u32, entries: Vec<TemplateEntry>) -> Result<Self> {
        let t = Template {
            image: image.into(),
            finger_id,
            impression_id,
            entries,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.descriptor.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Empty(format!("template {} has no entries", self.image)));
        }
        let d = self.descriptor_dim();
        if d == 0 || self.entries.iter().any(|e| e.descriptor.len() != d) {
            return Err(Error::Shape(format!("template {} has uneven descriptor widths", self.image)));
        }
        Ok(())
    }
}

/// Network outputs for one image: its template and per-patch spoofness.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub template: Template,
    pub patch_spoof_probs: Vec<f64>,
}

/// Runs patch extraction and one dual-head pass over every selected
/// minutia. `minutiae` must be in `image` coordinates.
pub fn analyze_image(
    model: &DualHeadModel,
    image: &FingerprintImage,
    minutiae: &[Minutia],
    cap: Option<usize>,
    cfg: &PatchConfig,
    exec: Exec,
) -> Result<ImageAnalysis> {
    let patches = extract_all_patches(image, minutiae, cap, cfg, exec)?;
    let out = model.forward(&patches, exec)?;
    let probs = out.spoof_probabilities();
    let entries = patches
        .iter()
        .zip(out.descriptors)
        .map(|(p, d)| TemplateEntry {
            minutia: p.source_minutia,
            descriptor: d,
        })
        .collect();
    Ok(ImageAnalysis {
        template: Template::new(image.id(), image.finger_id, image.impression_id, entries)?,
        patch_spoof_probs: probs,
    })
}

pub fn extract_template(
    model: &DualHeadModel,
    image: &FingerprintImage,
    minutiae: &[Minutia],
    cfg: &PatchConfig,
    exec: Exec,
) -> Result<Template> {
    Ok(analyze_image(model, image, minutiae, None, cfg, exec)?.template)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Param("descriptor has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn descriptor_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("descriptors of width {} and {}", a.len(), b.len())));
    }
    let (a, b) = (unit(a)?, unit(b)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub tau_sim: f64,
    pub r_tol: f64,
    pub angle_tol_deg: f64,
    pub kappa: usize,
    pub seed: u64,
    /// Every candidate pair seeds a hypothesis up to this many candidates;
    /// beyond it `hypotheses` seeded draws are used.
    pub max_exhaustive: usize,
    pub hypotheses: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            tau_sim: 0.6,
            r_tol: 12.0,
            angle_tol_deg: 20.0,
            kappa: 8,
            seed: 0,
            max_exhaustive: 64,
            hypotheses: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub score: f64,
    pub correspondences: Vec<Correspondence>,
}

/// Rotation by `angle` followed by translation, mapping frame A to B.
#[derive(Debug, Clone, Copy)]
struct Rigid {
    angle: f64,
    tx: f64,
    ty: f64,
}

impl Rigid {
    fn from_pair(a: &Minutia, b: &Minutia) -> Self {
        let angle = normalize_angle(b.theta - a.theta);
        let (s, c) = angle.sin_cos();
        Rigid {
            angle,
            tx: b.x - (c * a.x - s * a.y),
            ty: b.y - (s * a.x + c * a.y),
        }
    }

    fn apply(&self, m: &Minutia) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (c * m.x - s * m.y + self.tx, s * m.x + c * m.y + self.ty)
    }

    /// Least-squares rotation + translation over the given pairs.
    fn fit(pairs: &[(&Minutia, &Minutia)]) -> Self {
        let n = pairs.len() as f64;
        let (mut ax, mut ay, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0);
        for (a, b) in pairs {
            ax += a.x;
            ay += a.y;
            bx += b.x;
            by += b.y;
        }
        let (ax, ay, bx, by) = (ax / n, ay / n, bx / n, by / n);
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (a, b) in pairs {
            let (px, py) = (a.x - ax, a.y - ay);
            let (qx, qy) = (b.x - bx, b.y - by);
            sxx += px * qx + py * qy;
            sxy += px * qy - py * qx;
        }
        let angle = if sxx == 0.0 && sxy == 0.0 {
            // single point: fall back to the mean direction difference
            let (s, c) = pairs.iter().fold((0.0, 0.0), |(s, c), (a, b)| {
                let d = b.theta - a.theta;
                (s + d.sin(), c + d.cos())
            });
            s.atan2(c)
        } else {
            sxy.atan2(sxx)
        };
        let (s, c) = angle.sin_cos();
        Rigid {
            angle,
            tx: bx - (c * ax - s * ay),
            ty: by - (s * ax + c * ay),
        }
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn similarity_matrix(a: &Template, b: &Template) -> Result<Vec<Vec<f64>>> {
    if a.descriptor_dim() != b.descriptor_dim() {
        return Err(Error::Shape(format!(
            "templates with descriptor widths {} and {}",
            a.descriptor_dim(),
            b.descriptor_dim()
        )));
    }
    let ua = a.entries.iter().map(|e| unit(&e.descriptor)).collect::<Result<Vec<_>>>()?;
    let ub = b.entries.iter().map(|e| unit(&e.descriptor)).collect::<Result<Vec<_>>>()?;
    Ok(ua
        .iter()
        .map(|x| ub.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect())
}

/// Mutual nearest neighbours above `tau`; ties go to the lower index.
fn mutual_pairs(sim: &[Vec<f64>], tau: f64) -> Vec<Correspondence> {
    let nb = sim.first().map_or(0, Vec::len);
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((usize::MAX, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let best_b: Vec<usize> = sim.iter().map(|row| argmax(&mut row.iter().copied().enumerate())).collect();
    let best_a: Vec<usize> = (0..nb)
        .map(|j| argmax(&mut sim.iter().map(|row| row[j]).enumerate()))
        .collect();
    best_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| j != usize::MAX && best_a[j] == i && sim[i][j] >= tau)
        .map(|(i, &j)| Correspondence {
            a: i,
            b: j,
            similarity: sim[i][j],
        })
        .collect()
}

fn inliers(t: &Rigid, cands: &[Correspondence], a: &Template, b: &Template, p: &MatchParams) -> Vec<usize> {
    let atol = p.angle_tol_deg.to_radians();
    cands
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let (ma, mb) = (&a.entries[c.a].minutia, &b.entries[c.b].minutia);
            let (x, y) = t.apply(ma);
            let r = ((x - mb.x).powi(2) + (y - mb.y).powi(2)).sqrt();
            r < p.r_tol && angle_diff(ma.theta + t.angle, mb.theta) < atol
        })
        .map(|(k, _)| k)
        .collect()
}

fn one_direction(a: &Template, b: &Template, sim: &[Vec<f64>], p: &MatchParams) -> MatchResult {
    let cands = mutual_pairs(sim, p.tau_sim);
    if cands.is_empty() {
        return MatchResult {
            score: 0.0,
            correspondences: Vec::new(),
        };
    }
    let seeds: Vec<usize> = if cands.len() <= p.max_exhaustive {
        (0..cands.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        (0..p.hypotheses).map(|_| rng.random_range(0..cands.len())).collect()
    };
    let weight = |set: &[usize]| set.iter().map(|&k| cands[k].similarity).sum::<f64>();
    let mut best: Vec<usize> = Vec::new();
    for &k in &seeds {
        let t = Rigid::from_pair(&a.entries[cands[k].a].minutia, &b.entries[cands[k].b].minutia);
        let set = inliers(&t, &cands, a, b, p);
        if set.len() > best.len() || (set.len() == best.len() && weight(&set) > weight(&best)) {
            best = set;
        }
    }
    let pairs: Vec<(&Minutia, &Minutia)> = best
        .iter()
        .map(|&k| (&a.entries[cands[k].a].minutia, &b.entries[cands[k].b].minutia))
        .collect();
    let refined = inliers(&Rigid::fit(&pairs), &cands, a, b, p);
    if refined.len() >= best.len() {
        best = refined;
    }
    let kept: Vec<Correspondence> = best.iter().map(|&k| cands[k]).collect();
    let mean = kept.iter().map(|c| c.similarity).sum::<f64>() / kept.len() as f64;
    let damp = (kept.len() as f64 / p.kappa.max(1) as f64).min(1.0);
    MatchResult {
        score: (mean * damp).clamp(0.0, 1.0),
        correspondences: kept,
    }
}

/// Symmetric comparison: both directions are evaluated and their scores
/// averaged; correspondences are reported in A→B order.
pub fn match_templates(a: &Template, b: &Template, p: &MatchParams) -> Result<MatchResult> {
    a.validate()?;
    b.validate()?;
    let sim = similarity_matrix(a, b)?;
    let simt: Vec<Vec<f64>> = (0..b.len()).map(|j| sim.iter().map(|row| row[j]).collect()).collect();
    let ab = one_direction(a, b, &sim, p);
    let ba = one_direction(b, a, &simt, p);
    Ok(MatchResult {
        score: 0.5 * (ab.score + ba.score),
        correspondences: ab.correspondences,
    })
}

pub fn image_spoof_score(patch_probs: &[f64]) -> Result<f64> {
    if patch_probs.is_empty() {
        return Err(Error::Empty("no patch scores to aggregate".into()));
    }
    Ok(patch_probs.iter().sum::<f64>() / patch_probs.len() as f64)
}

/// Spoof iff `score ≥ threshold`.
pub fn classify_liveness(score: f64, threshold: f64) -> Liveness {
    if score >= threshold {
        Liveness::Spoof
    } else {
        Liveness::Live
    }
}

const TEMPLATE_MAGIC: &[u8; 4] = b"DHTP";
const TEMPLATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TemplateHeader {
    format: String,
    version: u32,
    image: String,
    finger_id: u32,
    impression_id: u32,
    count: usize,
    descriptor_dim: usize,
    /// `[x, y, theta, quality]` per entry
    minutiae: Vec<[f64; 4]>,
}

/// `DHTP`, u32 version, u32 header length, JSON header, then
/// `count × descriptor_dim` little-endian f32 values.
pub fn template_to_bytes(t: &Template) -> Result<Vec<u8>> {
    t.validate()?;
    let header = TemplateHeader {
        format: "dualhead-template".into(),
        version: TEMPLATE_VERSION,
        image: t.image.clone(),
        finger_id: t.finger_id,
        impression_id: t.impression_id,
        count: t.len(),
        descriptor_dim: t.descriptor_dim(),
        minutiae: t
            .entries
            .iter()
            .map(|e| [e.minutia.x, e.minutia.y, e.minutia.theta, e.minutia.quality])
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(TEMPLATE_MAGIC);
    out.extend_from_slice(&TEMPLATE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for e in &t.entries {
        for &v in &e.descriptor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn template_from_bytes(bytes: &[u8]) -> Result<Template> {
    let bad = |m: &str| Error::ModelFormat(format!("template: {m}"));
    if bytes.len() < 12 || &bytes[..4] != TEMPLATE_MAGIC {
        return Err(bad("missing DHTP magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TEMPLATE_VERSION {
        return Err(bad("unsupported version"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h: TemplateHeader =
        serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)
            .map_err(|e| Error::ModelFormat(format!("template header: {e}")))?;
    let body = &bytes[12 + hlen..];
    if h.minutiae.len() != h.count || body.len() != 4 * h.count * h.descriptor_dim {
        return Err(bad("descriptor block does not match header counts"));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let entries = h
        .minutiae
        .iter()
        .zip(vals.chunks(h.descriptor_dim.max(1)))
        .map(|(m, d)| TemplateEntry {
            minutia: Minutia::new(m[0], m[1], m[2]).with_quality(m[3]),
            descriptor: d.to_vec(),
        })
        .collect();
    Template::new(h.image, h.finger_id, h.impression_id, entries)
}

pub fn save_template(t: &Template, path: &Path) -> Result<()> {
    fs::write(path, template_to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_template(path: &Path) -> Result<Template> {
    template_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn correspondences_csv(a: &Template, b: &Template, r: &MatchResult) -> String {
    let mut out = String::from("index_a,index_b,similarity,ax,ay,bx,by\n");
    for c in &r.correspondences {
        let (ma, mb) = (&a.entries[c.a].minutia, &b.entries[c.b].minutia);
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.3},{:.3},{:.3},{:.3}",
            c.a, c.b, c.similarity, ma.x, ma.y, mb.x, mb.y
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synth::{master_minutiae, RigidTransform, SynthParams};
    use rand_distr::{Distribution, StandardNormal};

    fn random_template(minutiae: &[Minutia], seed: u64) -> Template {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = minutiae
            .iter()
            .map(|m| TemplateEntry {
                minutia: *m,
                descriptor: (0..64).map(|_| StandardNormal.sample(&mut rng)).collect(),
            })
            .collect();
        Template::new(format!("t{seed}"), 0, 1, entries).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let mut a = vec![0.0; 64];
        a[0] = 1.0;
        let mut b = a.clone();
        b[1] = 1.0;
        assert!((descriptor_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((descriptor_similarity(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        let mut c = vec![0.0; 64];
        c[2] = 1.0;
        assert_eq!(descriptor_similarity(&a, &c).unwrap(), 0.0);
        assert!(descriptor_similarity(&a, &[0.0; 64]).is_err());
    }

    #[test]
    fn self_match_pairs_every_entry() {
        let ms = master_minutiae(&SynthParams::default()).unwrap();
        let t = random_template(&ms, 3);
        let r = match_templates(&t, &t, &MatchParams::default()).unwrap();
        assert!(r.score >= 0.99);
        assert_eq!(r.correspondences.len(), t.len());
        assert!(r.correspondences.iter().all(|c| c.a == c.b));
    }

    #[test]
    fn planted_correspondences_are_recovered() {
        let ms = master_minutiae(&SynthParams::default()).unwrap();
        let a = random_template(&ms, 5);
        let tf = RigidTransform {
            rotation: 0.3,
            tx: 9.0,
            ty: -6.0,
            cx: 128.0,
            cy: 128.0,
        };
        // reverse the order so identity indexing cannot succeed by accident
        let n = a.len();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<TemplateEntry> = (0..n)
            .rev()
            .map(|i| TemplateEntry {
                minutia: tf.apply_minutia(&a.entries[i].minutia),
                descriptor: a.entries[i]
                    .descriptor
                    .iter()
                    .map(|v| v + 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect(),
            })
            .collect();
        let b = Template::new("b", 0, 2, entries).unwrap();
        let r = match_templates(&a, &b, &MatchParams::default()).unwrap();
        assert_eq!(r.correspondences.len(), n);
        assert!(r.correspondences.iter().all(|c| c.b == n - 1 - c.a));
        assert!(r.score > 0.9);
    }

    #[test]
    fn geometry_rejects_scrambled_positions() {
        let ms = master_minutiae(&SynthParams::default()).unwrap();
        let a = random_template(&ms, 5);
        let mut b = a.clone();
        // same descriptors, positions permuted: only consistent pairs survive
        let n = b.len();
        for i in 0..n {
            b.entries[i].minutia = a.entries[(i * 7 + 3) % n].minutia;
        }
        let r = match_templates(&a, &b, &MatchParams::default()).unwrap();
        assert!(r.correspondences.len() < n / 2, "{}", r.correspondences.len());
    }

    #[test]
    fn symmetric_scores() {
        let pa = SynthParams {
            identity_seed: 1,
            ..Default::default()
        };
        let pb = SynthParams {
            identity_seed: 2,
            ..Default::default()
        };
        let a = random_template(&master_minutiae(&pa).unwrap(), 1);
        let mut b = random_template(&master_minutiae(&pb).unwrap(), 2);
        for (k, e) in b.entries.iter_mut().enumerate().take(6) {
            e.descriptor = a.entries[k].descriptor.clone();
        }
        let ab = match_templates(&a, &b, &MatchParams::default()).unwrap().score;
        let ba = match_templates(&b, &a, &MatchParams::default()).unwrap().score;
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn aggregation_and_threshold() {
        assert!((image_spoof_score(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(image_spoof_score(&[0.7]).unwrap(), 0.7);
        assert!(image_spoof_score(&[]).is_err());
        assert_eq!(classify_liveness(0.49, 0.5), Liveness::Live);
        assert_eq!(classify_liveness(0.5, 0.5), Liveness::Spoof);
        assert_eq!(classify_liveness(0.51, 0.5), Liveness::Spoof);
    }

    #[test]
    fn template_file_round_trip() {
        let ms = master_minutiae(&SynthParams::default()).unwrap();
        let mut t = random_template(&ms, 8);
        for e in &mut t.entries {
            e.descriptor.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let back = template_from_bytes(&template_to_bytes(&t).unwrap()).unwrap();
        assert_eq!(back.entries.len(), t.entries.len());
        assert_eq!(back.entries[3].descriptor, t.entries[3].descriptor);
        assert!((back.entries[3].minutia.x - t.entries[3].minutia.x).abs() < 1e-12);
    }
}
