use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A minutia keypoint: sub-pixel position, direction in radians and an
/// optional quality in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub quality: f64,
}

impl Minutia {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Minutia {
            x,
            y,
            theta: normalize_angle(theta),
            quality: 1.0,
        }
    }

    pub fn with_quality(mut self, quality: f64) -> Self {
        self.quality = quality.clamp(0.0, 1.0);
        self
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Sidecar text format: one `x y theta quality` line per minutia.
pub fn write_minutiae(path: &Path, minutiae: &[Minutia]) -> Result<()> {
    let mut out = String::new();
    for m in minutiae {
        writeln!(out, "{:.6} {:.6} {:.6} {:.4}", m.x, m.y, m.theta, m.quality).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_minutiae(path: &Path) -> Result<Vec<Minutia>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_minutiae(&text, path)
}

/// Parses sidecar text; `origin` is only used for error messages. Blank
/// lines and `#` comments are skipped.
pub fn parse_minutiae(text: &str, origin: &Path) -> Result<Vec<Minutia>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let mut vals = [0.0f64; 4];
        vals[3] = 1.0;
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("not a number: {f:?}")))?;
        }
        if !(0.0..=1.0).contains(&vals[3]) {
            return Err(err(format!("quality {} outside [0, 1]", vals[3])));
        }
        out.push(Minutia::new(vals[0], vals[1], vals[2]).with_quality(vals[3]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_minutia_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        let m = vec![Minutia::new(10.5, 20.25, 1.25)];
        write_minutiae(&p, &m).unwrap();
        let back = read_minutiae(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].x - 10.5).abs() < 1e-4);
        assert!((back[0].y - 20.25).abs() < 1e-4);
        assert!((back[0].theta - 1.25).abs() < 1e-4);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        assert!(read_minutiae(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let e = parse_minutiae("a b c\n", Path::new("x.txt")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let e = parse_minutiae("1 2 3\n\n4 5\n", Path::new("x.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn theta_is_normalized() {
        let m = Minutia::new(0.0, 0.0, -std::f64::consts::FRAC_PI_2);
        assert!((m.theta - 1.5 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(normalize_angle(TAU), 0.0);
        assert!(normalize_angle(-1e-300) < TAU);
    }

    proptest! {
        #[test]
        fn write_read_round_trip(pts in proptest::collection::vec(
            (0.0f64..2000.0, 0.0f64..2000.0, -10.0f64..10.0, 0.0f64..=1.0), 0..40)) {
            let ms: Vec<Minutia> = pts.iter()
                .map(|&(x, y, t, q)| Minutia::new(x, y, t).with_quality(q)).collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.txt");
            write_minutiae(&p, &ms).unwrap();
            let back = read_minutiae(&p).unwrap();
            prop_assert_eq!(back.len(), ms.len());
            for (a, b) in ms.iter().zip(&back) {
                prop_assert!((a.x - b.x).abs() < 1e-4);
                prop_assert!((a.y - b.y).abs() < 1e-4);
                let dt = (a.theta - b.theta).abs();
                prop_assert!(dt < 1e-4 || (TAU - dt) < 1e-4);
                prop_assert!((a.quality - b.quality).abs() < 1e-3);
            }
        }
    }
}
