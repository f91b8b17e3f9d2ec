//! Greyscale PGM import/export for demos and visual overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!("{width}x{height} image with {} pixels", data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Binary P5 encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parse P5 (binary) or P2 (ASCII) with maxval up to 255; values are
    /// rescaled to 0..=255.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |offset: usize, detail: String| Error::Corrupt {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        let mut pos = 0;
        let token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(corrupt(start, "unexpected end of header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        let magic = token(&mut pos)?;
        if magic != "P5" && magic != "P2" {
            return Err(corrupt(0, format!("expected P5 or P2, found {magic:?}")));
        }
        let num = |pos: &mut usize, what: &str| -> Result<usize> {
            let at = *pos;
            let t = token(pos)?;
            t.parse().map_err(|_| corrupt(at, format!("bad {what} {t:?}")))
        };
        let width = num(&mut pos, "width")?;
        let height = num(&mut pos, "height")?;
        let maxval = num(&mut pos, "maxval")?;
        if width == 0 || height == 0 {
            return Err(corrupt(0, "empty image".into()));
        }
        if maxval == 0 || maxval > 255 {
            return Err(corrupt(0, format!("maxval {maxval} unsupported (1..=255)")));
        }
        let n = width * height;
        let scale = |v: usize| ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8;
        let data = if magic == "P5" {
            let start = pos + 1;
            if bytes.len() < start + n {
                return Err(corrupt(bytes.len(), format!("pixel data truncated: need {n} bytes")));
            }
            bytes[start..start + n].iter().map(|&b| scale(b as usize)).collect()
        } else {
            let mut d = Vec::with_capacity(n);
            for _ in 0..n {
                d.push(scale(num(&mut pos, "pixel")?));
            }
            d
        };
        Ok(Self { width, height, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Nearest-neighbour resample to `size x size`, replicated to three
    /// channels with values in [0, 1].
    pub fn to_rgb(&self, size: usize) -> Vec<f32> {
        let mut out = vec![0f32; 3 * size * size];
        for y in 0..size {
            let sy = y * self.height / size;
            for x in 0..size {
                let sx = x * self.width / size;
                let v = self.data[sy * self.width + sx] as f32 / 255.0;
                for c in 0..3 {
                    out[c * size * size + y * size + x] = v;
                }
            }
        }
        out
    }

    /// Channel mean of a `[3, size, size]` image.
    pub fn from_rgb(image: &[f32], size: usize) -> Self {
        let n = size * size;
        let data = (0..n)
            .map(|i| {
                let m = (image[i] + image[n + i] + image[2 * n + i]) / 3.0;
                (m.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        Self {
            width: size,
            height: size,
            data,
        }
    }

    /// Values in [lo, hi] stretched to 0..=255 on an `h x w` grid, each
    /// cell drawn as a `scale x scale` block.
    pub fn from_grid(values: &[f64], h: usize, w: usize, scale: usize) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (width, height) = (w * scale, h * scale);
        let mut data = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                let v = values[(y / scale) * w + x / scale];
                data[y * width + x] = (((v - lo) / span) * 255.0).round() as u8;
            }
        }
        Self { width, height, data }
    }

    /// `base` with every cell of a label grid blended towards a grey level
    /// per label; label boundaries are drawn black.
    pub fn label_overlay(base: &Gray, labels: &[usize], h: usize, w: usize) -> Self {
        let levels = labels.iter().max().map_or(1, |m| m + 1);
        let (py, px) = (base.height / h, base.width / w);
        let mut data = base.data.clone();
        for y in 0..base.height {
            for x in 0..base.width {
                let (r, c) = ((y / py).min(h - 1), (x / px).min(w - 1));
                let l = labels[r * w + c];
                let tone = (40 + l * 200 / levels.max(1)) as u16;
                let i = y * base.width + x;
                let edge_r = y % py == 0 && r > 0 && labels[(r - 1) * w + c] != l;
                let edge_c = x % px == 0 && c > 0 && labels[r * w + c - 1] != l;
                data[i] = if edge_r || edge_c { 0 } else { ((data[i] as u16 + tone) / 2) as u8 };
            }
        }
        Self {
            width: base.width,
            height: base.height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_roundtrip() {
        let g = Gray::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        assert_eq!(Gray::decode(&g.encode(), Path::new("x")).unwrap(), g);
    }

    #[test]
    fn p2_with_comments_and_maxval() {
        let text = b"P2\n# comment\n2 2\n15\n0 15\n5 10\n";
        let g = Gray::decode(text, Path::new("x")).unwrap();
        assert_eq!(g.data, vec![0, 255, 85, 170]);
    }

    #[test]
    fn truncated_pixels() {
        let err = Gray::decode(b"P5\n4 4\n255\n\x00\x01", Path::new("t.pgm")).unwrap_err().to_string();
        assert!(err.contains("t.pgm") && err.contains("truncated"), "{err}");
        assert!(Gray::decode(b"P6\n1 1\n255\n\x00", Path::new("x")).is_err());
    }

    #[test]
    fn resample_and_back() {
        let g = Gray::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let rgb = g.to_rgb(4);
        let back = Gray::from_rgb(&rgb, 4);
        assert_eq!(back.data[0], 0);
        assert_eq!(back.data[3], 255);
        assert_eq!(back.data[15], 0);
    }
}
