use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Liveness {
    Live,
    Spoof,
    Unknown,
}

impl Liveness {
    /// Class index used by the spoof head: 0 = live, 1 = spoof.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Liveness::Live => Some(0),
            Liveness::Spoof => Some(1),
            Liveness::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Liveness::Live => "live",
            Liveness::Spoof => "spoof",
            Liveness::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Liveness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 8-bit grayscale raster, row-major, with its identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub finger_id: u32,
    pub impression_id: u32,
    pub liveness: Liveness,
    pub sensor_tag: String,
}

impl FingerprintImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!("image size {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(FingerprintImage {
            width,
            height,
            pixels,
            finger_id: 0,
            impression_id: 1,
            liveness: Liveness::Unknown,
            sensor_tag: String::new(),
        })
    }

    pub fn with_labels(mut self, finger_id: u32, impression_id: u32, liveness: Liveness) -> Self {
        self.finger_id = finger_id;
        self.impression_id = impression_id;
        self.liveness = liveness;
        self
    }

    /// Short identifier used in exports and patch provenance.
    pub fn id(&self) -> String {
        format!(
            "f{:03}_i{:02}_{}",
            self.finger_id, self.impression_id, self.liveness
        )
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Copies the `[x0, x1) × [y0, y1)` window, keeping labels.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> FingerprintImage {
        let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        FingerprintImage {
            width: x1 - x0,
            height: y1 - y0,
            pixels,
            finger_id: self.finger_id,
            impression_id: self.impression_id,
            liveness: self.liveness,
            sensor_tag: self.sensor_tag.clone(),
        }
    }
}

/// Loads an 8-bit grayscale PNG or PGM. Colour images are converted to luma.
pub fn load_image(path: &Path) -> Result<FingerprintImage> {
    let img = ::image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    FingerprintImage::new(w as usize, h as usize, luma.into_raw())
}

/// Writes PGM for `.pgm`/`.pnm` extensions and PNG otherwise.
pub fn save_image(image: &FingerprintImage, path: &Path) -> Result<()> {
    let buf = ::image::GrayImage::from_raw(
        image.width as u32,
        image.height as u32,
        image.pixels.clone(),
    )
    .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
    let is_pnm = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pgm" | "pnm")
    );
    let result = if is_pnm {
        buf.save_with_format(path, ::image::ImageFormat::Pnm)
    } else {
        buf.save_with_format(path, ::image::ImageFormat::Png)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(FingerprintImage::new(0, 4, vec![]).is_err());
        assert!(FingerprintImage::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..12 * 7).map(|i| (i * 3 % 256) as u8).collect();
        let img = FingerprintImage::new(12, 7, pixels).unwrap();
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.pixels, img.pixels);
            assert_eq!((back.width, back.height), (12, 7));
        }
    }

    #[test]
    fn crop_copies_window() {
        let pixels: Vec<u8> = (0..16).collect();
        let img = FingerprintImage::new(4, 4, pixels).unwrap();
        let c = img.crop(1, 1, 3, 4);
        assert_eq!(c.pixels, vec![5, 6, 9, 10, 13, 14]);
    }
}
