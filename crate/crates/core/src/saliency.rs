//! Class-token / patch similarity maps taken from an intermediate block of
//! the target encoder.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Float, Tensor};
use crate::vit::{Encoder, Visibility};

/// How CLS and patch embeddings are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            _ => Err(Error::Config(format!("unknown similarity {s:?} (cosine|dot)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        }
    }
}

/// Row-major `h x w` grid of per-patch saliency values.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    /// 1-based block the map was read from (0 when synthetic).
    pub layer: usize,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape("saliency_map", format!("{} values for a {h}x{w} grid", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("saliency value {v} is not finite")));
        }
        Ok(Self { h, w, values, layer: 0 })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.w + c]
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Default saliency block: two thirds of the depth, rounded.
pub fn default_layer(depth: usize) -> usize {
    ((2.0 * depth as f64 / 3.0).round() as usize).clamp(1, depth.max(1))
}

/// Similarity between row 0 (CLS) and every other row of `tokens`, which
/// must hold `1 + h*w` rows in CLS-then-row-major order.
pub fn map_from_tokens<F: Float>(tokens: &Tensor<F>, h: usize, w: usize, sim: Similarity) -> Result<SaliencyMap> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != 1 + h * w {
        return Err(Error::shape("saliency", format!("tokens {s:?} for a {h}x{w} grid plus CLS")));
    }
    let d = s[1];
    let data = tokens.to_f64();
    let cls = &data[..d];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let cls_norm = dot(cls, cls).sqrt();
    let values = (0..h * w)
        .map(|i| {
            let p = &data[(i + 1) * d..(i + 2) * d];
            match sim {
                Similarity::Dot => dot(cls, p),
                Similarity::Cosine => {
                    let denom = cls_norm * dot(p, p).sqrt();
                    if denom > 0.0 {
                        dot(cls, p) / denom
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();
    SaliencyMap::new(h, w, values)
}

/// Saliency of `image` from block `layer` (1-based) of `target`, computed
/// with full visibility and without recording gradients.
pub fn attention_map<F: Float>(
    target: &Encoder<F>,
    image: &Tensor<F>,
    layer: usize,
    sim: Similarity,
) -> Result<SaliencyMap> {
    if layer == 0 || layer > target.cfg.depth {
        return Err(Error::invalid(format!("saliency layer {layer} out of range 1..={}", target.cfg.depth)));
    }
    no_grad(|| {
        let seq = target.patchify(image)?;
        let out = target.encode_with_taps(&seq, Visibility::All, &[layer])?;
        let g = target.cfg.grid();
        let mut map = map_from_tokens(&out.taps[0], g, g, sim)?;
        map.layer = layer;
        Ok(map)
    })
}

/// Cells equal to the maximum of their `window x window` neighbourhood
/// (clipped at the border). Ties mark every tied cell.
pub fn local_maxima(map: &SaliencyMap, window: usize) -> Result<Vec<bool>> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd and >= 3, got {window}")));
    }
    let r = window / 2;
    let (h, w) = (map.h, map.w);
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut m = f64::NEG_INFINITY;
            for y in i.saturating_sub(r)..(i + r + 1).min(h) {
                for x in j.saturating_sub(r)..(j + r + 1).min(w) {
                    m = m.max(map.get(y, x));
                }
            }
            out[i * w + j] = map.get(i, j) == m;
        }
    }
    Ok(out)
}
