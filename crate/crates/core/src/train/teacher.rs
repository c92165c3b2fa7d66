use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::patch::Patch;

/// Source of descriptor targets for the matching head.
pub trait TeacherOracle: Sync {
    fn dim(&self) -> usize;

    /// Target for minutia `minutia_index` of the image stored under
    /// `image_key`; `patch` is the oriented patch the student will see.
    fn descriptor(&self, image_key: &str, minutia_index: usize, patch: &Patch) -> Result<Vec<f64>>;
}

/// Fixed random projection of a coarse, mean-removed view of the patch,
/// L2-normalised.
#[derive(Debug, Clone)]
pub struct PseudoTeacher {
    dim: usize,
    grid: usize,
    projection: Vec<f64>,
}

impl PseudoTeacher {
    pub const GRID: usize = 16;

    pub fn new(dim: usize, seed: u64) -> Self {
        let grid = Self::GRID;
        let n_in = grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n_in as f64).sqrt();
        let projection = (0..dim * n_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        PseudoTeacher { dim, grid, projection }
    }

    /// Block-average downsampling to `grid × grid` with the mean removed.
    pub fn coarse_view(&self, patch: &Patch) -> Vec<f64> {
        let n = patch.size;
        let g = self.grid;
        let mut cells = Vec::with_capacity(g * g);
        for gy in 0..g {
            let (y0, y1) = (gy * n / g, ((gy + 1) * n / g).max(gy * n / g + 1));
            for gx in 0..g {
                let (x0, x1) = (gx * n / g, ((gx + 1) * n / g).max(gx * n / g + 1));
                let mut acc = 0.0;
                for y in y0..y1.min(n) {
                    for x in x0..x1.min(n) {
                        acc += patch.pixels[y * n + x] as f64;
                    }
                }
                cells.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        cells.iter_mut().for_each(|c| *c -= mean);
        cells
    }

    pub fn project(&self, patch: &Patch) -> Vec<f64> {
        let v = self.coarse_view(patch);
        let k = v.len();
        let mut out: Vec<f64> = (0..self.dim)
            .map(|d| self.projection[d * k..(d + 1) * k].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        out
    }
}

impl TeacherOracle for PseudoTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn descriptor(&self, _image_key: &str, _minutia_index: usize, patch: &Patch) -> Result<Vec<f64>> {
        if patch.size < self.grid {
            return Err(Error::Shape(format!(
                "patch of size {} is smaller than the teacher grid {}",
                patch.size, self.grid
            )));
        }
        Ok(self.project(patch))
    }
}

const TEACHER_MAGIC: &[u8; 4] = b"DHTD";
const TEACHER_VERSION: u32 = 1;

/// Precomputed descriptors keyed by (image key, minutia index).
///
/// File layout, all integers u32 little-endian: `DHTD`, version, dim,
/// entry count, then per entry: key length, UTF-8 key bytes, minutia
/// index, `dim` little-endian f32 values.
#[derive(Debug, Clone, Default)]
pub struct FileTeacher {
    dim: usize,
    entries: HashMap<(String, usize), Vec<f64>>,
}

impl FileTeacher {
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, usize, Vec<f64>)>) -> Result<Self> {
        let mut map = HashMap::new();
        for (k, i, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!("teacher entry {k}#{i} has width {}", v.len())));
            }
            map.insert((k, i), v);
        }
        Ok(FileTeacher { dim, entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut keys: Vec<&(String, usize)> = self.entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        out.extend_from_slice(TEACHER_MAGIC);
        for v in [TEACHER_VERSION, self.dim as u32, keys.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for key in keys {
            out.extend_from_slice(&(key.0.len() as u32).to_le_bytes());
            out.extend_from_slice(key.0.as_bytes());
            out.extend_from_slice(&(key.1 as u32).to_le_bytes());
            for &x in &self.entries[key] {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != TEACHER_MAGIC {
            return Err(Error::ModelFormat("missing DHTD magic".into()));
        }
        let version = r.u32()?;
        if version != TEACHER_VERSION {
            return Err(Error::ModelFormat(format!("unsupported teacher file version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = HashMap::with_capacity(count);
        for _ in 0..count {
            let klen = r.u32()? as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec())
                .map_err(|_| Error::ModelFormat("teacher key is not UTF-8".into()))?;
            let idx = r.u32()? as usize;
            let vals = r
                .take(4 * dim)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            entries.insert((key, idx), vals);
        }
        Ok(FileTeacher { dim, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::ModelFormat("truncated teacher file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl TeacherOracle for FileTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn descriptor(&self, image_key: &str, minutia_index: usize, _patch: &Patch) -> Result<Vec<f64>> {
        self.entries
            .get(&(image_key.to_string(), minutia_index))
            .cloned()
            .ok_or_else(|| Error::Manifest(format!("teacher has no descriptor for {image_key} minutia {minutia_index}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Minutia;

    fn patch(f: impl Fn(usize, usize) -> f32) -> Patch {
        let n = 224;
        Patch {
            size: n,
            pixels: (0..n * n).map(|i| f(i / n, i % n)).collect(),
            source_minutia: Minutia::new(0.0, 0.0, 0.0),
            minutia_index: 0,
            source_image: "a".into(),
        }
    }

    #[test]
    fn pseudo_teacher_is_unit_norm_and_deterministic() {
        let t = PseudoTeacher::new(64, 9);
        let p = patch(|r, c| ((r * 3 + c * 7) % 23) as f32 / 23.0);
        let a = t.descriptor("x", 0, &p).unwrap();
        let b = PseudoTeacher::new(64, 9).descriptor("y", 3, &p).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn pseudo_teacher_ignores_brightness_offset() {
        let t = PseudoTeacher::new(64, 1);
        let a = t.project(&patch(|r, c| ((r / 20 + c / 30) % 2) as f32 * 0.5));
        let b = t.project(&patch(|r, c| ((r / 20 + c / 30) % 2) as f32 * 0.5 + 0.25));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn coarse_view_matches_block_means() {
        let t = PseudoTeacher::new(8, 0);
        let p = patch(|r, c| (r * 224 + c) as f32);
        let v = t.coarse_view(&p);
        // 224 / 16 = 14-pixel blocks; block (0,0) mean before centring
        let raw00 = (0..14).flat_map(|r| (0..14).map(move |c| (r * 224 + c) as f64)).sum::<f64>() / 196.0;
        let all = (0..224 * 224).map(|i| i as f64).sum::<f64>() / (224.0 * 224.0);
        assert!((v[0] - (raw00 - all)).abs() < 1e-6);
    }

    #[test]
    fn file_teacher_round_trip() {
        let t = FileTeacher::from_entries(
            3,
            vec![("img/a.png".to_string(), 2, vec![0.5, -1.0, 2.0]), ("b".to_string(), 0, vec![0.0; 3])],
        )
        .unwrap();
        let back = FileTeacher::from_bytes(&t.to_bytes()).unwrap();
        let p = patch(|_, _| 0.0);
        assert_eq!(back.descriptor("img/a.png", 2, &p).unwrap(), vec![0.5, -1.0, 2.0]);
        assert!(back.descriptor("img/a.png", 1, &p).is_err());
        assert!(FileTeacher::from_bytes(&t.to_bytes()[..20]).is_err());
        assert!(FileTeacher::from_entries(2, vec![("k".to_string(), 0, vec![1.0])]).is_err());
    }
}
