use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::regionsel::RegionParams;
use crate::saliency::{default_layer, Similarity};
use crate::seqpred::OrderScheme;
use crate::vit::VitConfig;

/// Every knob of a pre-training run. Serialized as flat `key = value`
/// text, which is also stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub grad_clip: f64,
    pub huber_delta: f64,
    /// 1-based block for saliency; 0 selects two thirds of the depth.
    pub saliency_layer: usize,
    pub similarity: Similarity,
    pub order: OrderScheme,
    pub regions: RegionParams,
    pub model: VitConfig,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Write a checkpoint every this many epochs (the final epoch always).
    pub checkpoint_every: usize,
    /// Abort after this many consecutive non-finite batch losses.
    pub max_nonfinite: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_start: 1e-4,
            lr_peak: 1e-3,
            lr_final: 1e-6,
            warmup_epochs: 5,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.996,
            ema_end: 1.0,
            grad_clip: 1.0,
            huber_delta: 1.0,
            saliency_layer: 0,
            similarity: Similarity::Cosine,
            order: OrderScheme::Sequential,
            regions: RegionParams::default(),
            model: VitConfig::desk(),
            seed: 0,
            dataset: PathBuf::from("data"),
            checkpoint_every: 10,
            max_nonfinite: 3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Resolved saliency block.
    pub fn layer(&self) -> usize {
        if self.saliency_layer == 0 {
            default_layer(self.model.depth)
        } else {
            self.saliency_layer
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.regions.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (k, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_final", self.lr_final),
            ("wd_start", self.wd_start),
            ("wd_end", self.wd_end),
            ("grad_clip", self.grad_clip),
            ("huber_delta", self.huber_delta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be finite and positive, got {v}"));
            }
        }
        for (k, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.layer() > self.model.depth {
            return bad(format!("saliency_layer {} exceeds depth {}", self.layer(), self.model.depth));
        }
        if self.checkpoint_every == 0 || self.max_nonfinite == 0 {
            return bad("checkpoint_every and max_nonfinite must be positive".into());
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, shortest round-trip floats.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let r = &self.regions;
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_start", self.lr_start.to_string());
        kv("lr_peak", self.lr_peak.to_string());
        kv("lr_final", self.lr_final.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("wd_start", self.wd_start.to_string());
        kv("wd_end", self.wd_end.to_string());
        kv("ema_start", self.ema_start.to_string());
        kv("ema_end", self.ema_end.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("huber_delta", self.huber_delta.to_string());
        kv("saliency_layer", self.saliency_layer.to_string());
        kv("similarity", self.similarity.as_str().to_string());
        kv("order", self.order.as_str().to_string());
        kv("regions", r.n.to_string());
        kv("alpha", r.alpha.to_string());
        kv("otsu_bins", r.bins.to_string());
        kv("mask_scale_min", r.scale.0.to_string());
        kv("mask_scale_max", r.scale.1.to_string());
        kv("min_patches", r.min_patches.to_string());
        kv("aspect_min", r.aspect.0.to_string());
        kv("aspect_max", r.aspect.1.to_string());
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("channels", m.channels.to_string());
        kv("depth", m.depth.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("predictor_depth", m.predictor_depth.to_string());
        kv("predictor_dim", m.predictor_dim.to_string());
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("max_nonfinite", self.max_nonfinite.to_string());
        s
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let r = &mut self.regions;
        match key {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr_start" => self.lr_start = parse_num(key, v)?,
            "lr_peak" => self.lr_peak = parse_num(key, v)?,
            "lr_final" => self.lr_final = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "wd_start" => self.wd_start = parse_num(key, v)?,
            "wd_end" => self.wd_end = parse_num(key, v)?,
            "ema_start" => self.ema_start = parse_num(key, v)?,
            "ema_end" => self.ema_end = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "huber_delta" => self.huber_delta = parse_num(key, v)?,
            "saliency_layer" => self.saliency_layer = parse_num(key, v)?,
            "similarity" => self.similarity = Similarity::parse(v)?,
            "order" => self.order = OrderScheme::parse(v)?,
            "regions" => r.n = parse_num(key, v)?,
            "alpha" => r.alpha = parse_num(key, v)?,
            "otsu_bins" => r.bins = parse_num(key, v)?,
            "mask_scale_min" => r.scale.0 = parse_num(key, v)?,
            "mask_scale_max" => r.scale.1 = parse_num(key, v)?,
            "min_patches" => r.min_patches = parse_num(key, v)?,
            "aspect_min" => r.aspect.0 = parse_num(key, v)?,
            "aspect_max" => r.aspect.1 = parse_num(key, v)?,
            "image_size" => m.image_size = parse_num(key, v)?,
            "patch_size" => m.patch_size = parse_num(key, v)?,
            "channels" => m.channels = parse_num(key, v)?,
            "depth" => m.depth = parse_num(key, v)?,
            "dim" => m.dim = parse_num(key, v)?,
            "heads" => m.heads = parse_num(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_num(key, v)?,
            "predictor_depth" => m.predictor_depth = parse_num(key, v)?,
            "predictor_dim" => m.predictor_dim = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "max_nonfinite" => self.max_nonfinite = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the defaults. `#` starts a
    /// comment; blank lines are ignored; repeated keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
