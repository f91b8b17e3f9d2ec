//! Synthetic salient-object images: a textured, low-contrast background and
//! one shaped object whose class is told apart by a small high-contrast
//! part.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};
use crate::tensor::io::{RawTensor, TensorData};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["disk", "triangle", "cross", "ring"];
/// Allowed object area as a fraction of the image.
pub const AREA_RANGE: (f64, f64) = (0.10, 0.35);

const IMAGES_FILE: &str = "images.dsqt";
const MASKS_FILE: &str = "masks.dsqt";
const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[3, size, size]`, row-major per channel, values in [0, 1].
    pub image: Vec<f32>,
    pub size: usize,
    pub label: usize,
    /// `size * size` pixel mask of the object.
    pub object_mask: Vec<u8>,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn object_fraction(&self) -> f64 {
        self.object_mask.iter().filter(|m| **m != 0).count() as f64 / self.object_mask.len() as f64
    }

    /// Per-cell object coverage on a `grid x grid` patch layout.
    pub fn cell_coverage(&self, grid: usize) -> Vec<f64> {
        let p = self.size / grid;
        let mut out = vec![0.0; grid * grid];
        for y in 0..self.size {
            for x in 0..self.size {
                if self.object_mask[y * self.size + x] != 0 {
                    out[(y / p) * grid + x / p] += 1.0;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= (p * p) as f64);
        out
    }
}

/// Geometry of one object in pixel units.
struct Shape {
    label: usize,
    cx: f64,
    cy: f64,
    r: f64,
    /// Rotation of the ring gap / triangle.
    angle: f64,
}

impl Shape {
    fn rotate(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// (inside object, inside discriminative part)
    fn classify(&self, x: f64, y: f64) -> (bool, bool) {
        let (u, v) = self.rotate(x, y);
        let d = (u * u + v * v).sqrt();
        let r = self.r;
        match self.label {
            // Disk with a small bright core.
            0 => (d <= r, d <= 0.3 * r),
            // Triangle pointing along -v with a bright apex.
            1 => {
                let t = (v + r) / (1.8 * r);
                let inside = (0.0..=1.0).contains(&t) && u.abs() <= t * r;
                (inside, inside && t <= 0.4)
            }
            // Plus sign with a bright hub.
            2 => {
                let arm = 0.35 * r;
                let inside = (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r);
                (inside, u.abs() <= arm && v.abs() <= arm)
            }
            // Annulus with a gap; the ends flanking the gap are bright.
            _ => {
                let ang = v.atan2(u).abs();
                let on_ring = d <= r && d >= 0.55 * r;
                (on_ring && ang > 0.5, on_ring && ang > 0.5 && ang < 1.2)
            }
        }
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Deterministic sample for `(seed, label, size)`.
pub fn generate(seed: u64, label: usize, size: usize) -> Result<SyntheticSample> {
    if label >= NUM_CLASSES {
        return Err(Error::invalid(format!("label {label} >= {NUM_CLASSES}")));
    }
    if size < 8 {
        return Err(Error::invalid(format!("image size {size} too small (min 8)")));
    }
    let mut rng = rng::stream(seed, &[tag::DATA, label as u64]);
    let s = size as f64;
    let n = size * size;

    // Radius ranges chosen so each shape's area spans the allowed band.
    let r_range = match label {
        0 => (0.19, 0.32),
        1 => (0.25, 0.45),
        2 => (0.24, 0.42),
        _ => (0.22, 0.36),
    };
    let mut shape = None;
    for _ in 0..200 {
        let r = uniform(&mut rng, r_range.0, r_range.1) * s;
        let cand = Shape {
            label,
            cx: uniform(&mut rng, r, s - r),
            cy: uniform(&mut rng, r, s - r),
            r,
            angle: uniform(&mut rng, 0.0, std::f64::consts::TAU),
        };
        let area = (0..n)
            .filter(|&i| cand.classify((i % size) as f64 + 0.5, (i / size) as f64 + 0.5).0)
            .count() as f64
            / n as f64;
        if (AREA_RANGE.0..=AREA_RANGE.1).contains(&area) {
            shape = Some(cand);
            break;
        }
    }
    let shape = shape.ok_or_else(|| Error::Infeasible(format!("no object of class {label} fits a {size}px image")))?;

    // Background: grey base with unstructured grain (2x2-pixel blotches
    // plus per-pixel noise), so the object is the only coherent structure.
    let base = uniform(&mut rng, 0.35, 0.55);
    let cells = size.div_ceil(2);
    let grain: Vec<f64> = (0..cells * cells).map(|_| uniform(&mut rng, -0.05, 0.05)).collect();
    // Object body: brighter than the background by a moderate grey offset
    // with slight hue jitter; part: near-white.
    let lift = uniform(&mut rng, 0.12, 0.22);
    let body: [f64; 3] = std::array::from_fn(|_| base + lift + uniform(&mut rng, -0.02, 0.02));
    let part: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, 0.92, 1.0));

    let mut image = vec![0f32; 3 * n];
    let mut object_mask = vec![0u8; n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (inside, in_part) = shape.classify(x as f64 + 0.5, y as f64 + 0.5);
            object_mask[i] = inside as u8;
            let tex = grain[(y / 2) * cells + x / 2];
            for ch in 0..3 {
                let noise = uniform(&mut rng, -0.03, 0.03);
                let v = if in_part {
                    part[ch]
                } else if inside {
                    body[ch] + noise
                } else {
                    base + tex + noise
                };
                image[ch * n + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(SyntheticSample {
        image,
        size,
        label,
        object_mask,
        seed,
    })
}

/// Per-sample seed derived from the dataset seed.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut r = rng::stream(dataset_seed, &[tag::DATA, 0xda7a, index as u64]);
    r.random()
}

/// `n` samples with labels cycling `0..K`.
pub fn make_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|i| generate(sample_seed(seed, i), i % NUM_CLASSES, size))
        .collect()
}

/// Write `images.dsqt` (f32 `[n, 3, S, S]`), `masks.dsqt` (u8 `[n, S, S]`)
/// and `index.csv` (`id,label,seed`) into `dir`.
pub fn write_dataset(samples: &[SyntheticSample], size: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * size * size);
    let mut masks = Vec::with_capacity(n * size * size);
    let mut index = String::from("id,label,seed\n");
    for (i, s) in samples.iter().enumerate() {
        if s.size != size {
            return Err(Error::invalid(format!("sample {i} has size {}, expected {size}", s.size)));
        }
        images.extend_from_slice(&s.image);
        masks.extend_from_slice(&s.object_mask);
        writeln!(index, "{i},{},{}", s.label, s.seed).expect("string write");
    }
    RawTensor::new(vec![n, 3, size, size], TensorData::F32(images))?.write_file(dir.join(IMAGES_FILE))?;
    RawTensor::u8(vec![n, size, size], masks)?.write_file(dir.join(MASKS_FILE))?;
    let p = dir.join(INDEX_FILE);
    fs::write(&p, index).map_err(|e| Error::io(&p, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SyntheticSample>> {
    let dir = dir.as_ref();
    let images = RawTensor::read_file(dir.join(IMAGES_FILE))?;
    let masks = RawTensor::read_file(dir.join(MASKS_FILE))?;
    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;

    let corrupt = |path: &Path, detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: 0,
        detail,
    };
    let img_path = dir.join(IMAGES_FILE);
    let (n, size) = match (images.shape.as_slice(), &images.data) {
        ([n, 3, s, s2], TensorData::F32(_)) if s == s2 => (*n, *s),
        _ => return Err(corrupt(&img_path, format!("expected f32 [n, 3, S, S], got {:?}", images.shape))),
    };
    let TensorData::F32(img_data) = images.data else { unreachable!() };
    let mask_path = dir.join(MASKS_FILE);
    let mask_data = match (&masks.shape[..], masks.data) {
        ([m, s, s2], TensorData::U8(d)) if *m == n && *s == size && *s2 == size => d,
        _ => return Err(corrupt(&mask_path, format!("expected u8 [{n}, {size}, {size}], got {:?}", masks.shape))),
    };

    let mut lines = index.lines();
    if lines.next() != Some("id,label,seed") {
        return Err(corrupt(&index_path, "missing header id,label,seed".into()));
    }
    let mut out = Vec::with_capacity(n);
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = |what: &str| corrupt(&index_path, format!("line {}: {what}: {line:?}", row + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let id: usize = f[0].parse().map_err(|_| bad("bad id"))?;
        let label: usize = f[1].parse().map_err(|_| bad("bad label"))?;
        let seed: u64 = f[2].parse().map_err(|_| bad("bad seed"))?;
        if id != row || id >= n {
            return Err(bad("id out of sequence"));
        }
        if label >= NUM_CLASSES {
            return Err(bad("label out of range"));
        }
        let (ip, mp) = (3 * size * size, size * size);
        out.push(SyntheticSample {
            image: img_data[id * ip..(id + 1) * ip].to_vec(),
            size,
            label,
            object_mask: mask_data[id * mp..(id + 1) * mp].to_vec(),
            seed,
        });
    }
    if out.len() != n {
        return Err(corrupt(&index_path, format!("{} index rows for {n} images", out.len())));
    }
    Ok(out)
}
