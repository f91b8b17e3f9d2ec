//! Browser bindings: synthetic samples, region selection on a seeded
//! target encoder, and the pre-training schedules.

use serde_json::json;
use wasm_bindgen::prelude::*;

use dseq_core::datagen::{generate, CLASS_NAMES};
use dseq_core::regionsel::{curriculum_select, RegionParams};
use dseq_core::rng::{stream, tag};
use dseq_core::saliency::{attention_map, default_layer, Similarity};
use dseq_core::trainer::{epoch_lambda, Schedule, TrainConfig};
use dseq_core::vit::{Encoder, VitConfig};
use dseq_core::Tensor;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes of a synthetic sample followed by its object mask as a
/// second RGBA image (white = object).
pub fn sample_pixels(seed: u64, label: usize, size: usize) -> dseq_core::Result<(Vec<u8>, Vec<u8>)> {
    let s = generate(seed, label, size)?;
    let n = size * size;
    let mut rgba = Vec::with_capacity(4 * n);
    let mut mask = Vec::with_capacity(4 * n);
    for i in 0..n {
        for c in 0..3 {
            rgba.push((s.image[c * n + i] * 255.0).round() as u8);
        }
        rgba.push(255);
        let m = if s.object_mask[i] != 0 { 255 } else { 0 };
        mask.extend_from_slice(&[m, m, m, 255]);
    }
    Ok((rgba, mask))
}

/// Saliency map of a freshly initialized desk target encoder and the
/// curriculum region selection on it, as JSON.
pub fn regions_json(
    seed: u64,
    label: usize,
    n: usize,
    alpha: f64,
    lambda: f64,
    region_seed: u64,
) -> dseq_core::Result<String> {
    let cfg = VitConfig::desk();
    let s = generate(seed, label, cfg.image_size)?;
    let image = Tensor::<f32>::new(s.image.clone(), &[3, cfg.image_size, cfg.image_size])?;
    let encoder = Encoder::<f32>::new(&cfg, &mut stream(0, &[tag::INIT]))?.frozen_copy();
    let layer = default_layer(cfg.depth);
    let map = attention_map(&encoder, &image, layer, Similarity::Cosine)?;
    let params = RegionParams {
        n,
        alpha,
        ..RegionParams::default()
    };
    let set = curriculum_select(&map, lambda, &params, &mut stream(region_seed, &[tag::REGIONS]))?;
    let coverage = s.cell_coverage(cfg.grid());
    Ok(json!({
        "grid": cfg.grid(),
        "class": CLASS_NAMES[label],
        "saliency": map.values,
        "coverage": coverage,
        "labels": set.label_grid(),
        "origins": set.origins.iter().map(|o| o.as_str()).collect::<Vec<_>>(),
        "scores": set.scores,
        "tau": set.tau,
        "fallback": set.fallback,
    })
    .to_string())
}

/// Per-step LR, weight decay and EMA momentum plus per-epoch lambda under
/// the default recipe.
pub fn schedules_json(epochs: usize, steps_per_epoch: usize, warmup_epochs: usize) -> dseq_core::Result<String> {
    let cfg = TrainConfig {
        epochs,
        warmup_epochs,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let sched = Schedule::new(&cfg, steps_per_epoch.max(1));
    let steps = sched.total_steps;
    Ok(json!({
        "steps": steps,
        "lr": (0..steps).map(|t| sched.lr_at(t)).collect::<Vec<_>>(),
        "wd": (0..steps).map(|t| sched.wd_at(t)).collect::<Vec<_>>(),
        "ema": (0..steps).map(|t| sched.ema_at(t)).collect::<Vec<_>>(),
        "lambda": (0..epochs).map(|e| epoch_lambda(e, epochs)).collect::<Vec<_>>(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn sample_rgba(seed: u64, label: usize, size: usize) -> Result<Vec<u8>, JsError> {
    sample_pixels(seed, label, size).map(|p| p.0).map_err(err)
}

#[wasm_bindgen]
pub fn sample_mask_rgba(seed: u64, label: usize, size: usize) -> Result<Vec<u8>, JsError> {
    sample_pixels(seed, label, size).map(|p| p.1).map_err(err)
}

#[wasm_bindgen]
pub fn select_regions(seed: u64, label: usize, n: usize, alpha: f64, lambda: f64, region_seed: u64) -> Result<String, JsError> {
    regions_json(seed, label, n, alpha, lambda, region_seed).map_err(err)
}

#[wasm_bindgen]
pub fn schedules(epochs: usize, steps_per_epoch: usize, warmup_epochs: usize) -> Result<String, JsError> {
    schedules_json(epochs, steps_per_epoch, warmup_epochs).map_err(err)
}

#[wasm_bindgen]
pub fn image_size() -> usize {
    VitConfig::desk().image_size
}
