//! Checkpoint files.
//!
//! Layout: magic `DSQC`, `u8` version (1), `u64` manifest length, a JSON
//! manifest (config text, counters, and `name -> offset, shape` for every
//! tensor), then the tensors as concatenated DSQT blobs. Offsets are
//! relative to the first blob. Output is a pure function of the state, so
//! equal states give byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, Moments};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::seqpred::Jepa;
use crate::tensor::io::RawTensor;
use crate::tensor::{Float, Tensor};
use crate::vit::Module;

pub const MAGIC: &[u8; 4] = b"DSQC";
pub const VERSION: u8 = 1;

/// Everything a run needs to continue: the three networks, optimizer
/// moments and counters.
#[derive(Clone)]
pub struct ModelState<F: Float> {
    pub model: Jepa<F>,
    pub opt: AdamW<F>,
    /// Optimizer steps taken (including rejected ones).
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
}

impl<F: Float> ModelState<F> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut r = rng::stream(cfg.seed, &[rng::tag::INIT]);
        Ok(Self {
            model: Jepa::new(&cfg.model, &mut r)?,
            opt: AdamW::default(),
            step: 0,
            epoch: 0,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: String,
    step: u64,
    epoch: u64,
    adam_t: u64,
    tensors: Vec<Entry>,
}

fn moment_names(name: &str) -> (String, String) {
    (format!("adam.m.{name}"), format!("adam.v.{name}"))
}

pub fn encode<F: Float>(cfg: &TrainConfig, state: &ModelState<F>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, RawTensor)> = Vec::new();
    for (name, t) in state.model.named_params() {
        tensors.push((name, RawTensor::from_tensor(&t)));
    }
    for (name, mom) in &state.opt.state {
        let (mn, vn) = moment_names(name);
        let n = mom.m.len();
        tensors.push((mn, RawTensor::from_tensor(&Tensor::new(mom.m.clone(), &[n])?)));
        tensors.push((vn, RawTensor::from_tensor(&Tensor::new(mom.v.clone(), &[n])?)));
    }
    let mut blobs = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, raw) in &tensors {
        entries.push(Entry {
            name: name.clone(),
            offset: blobs.len() as u64,
            shape: raw.shape.clone(),
        });
        blobs.extend_from_slice(&raw.encode());
    }
    let manifest = Manifest {
        config: cfg.to_text(),
        step: state.step as u64,
        epoch: state.epoch as u64,
        adam_t: state.opt.t,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(13 + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn save<F: Float>(path: impl AsRef<Path>, cfg: &TrainConfig, state: &ModelState<F>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(cfg, state)?).map_err(|e| Error::io(path, e))
}

pub fn decode<F: Float>(bytes: &[u8], path: &Path) -> Result<(TrainConfig, ModelState<F>)> {
    let corrupt = |offset: u64, detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    if bytes.len() < 13 {
        return Err(corrupt(bytes.len() as u64, "truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, "bad magic (expected DSQC)".into()));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(4, format!("unsupported version {}", bytes[4])));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let blob_start = 13usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(5, format!("manifest length {mlen} runs past end of file")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[13..blob_start]).map_err(|e| corrupt(13, format!("manifest: {e}")))?;
    let cfg = TrainConfig::parse(&manifest.config)?;
    cfg.validate()?;

    let blobs = &bytes[blob_start..];
    let mut by_name = std::collections::HashMap::new();
    for e in &manifest.tensors {
        let off = e.offset as usize;
        if off > blobs.len() {
            return Err(corrupt((blob_start + off) as u64, format!("tensor {} offset past end", e.name)));
        }
        let (raw, _) = RawTensor::decode(&blobs[off..], path, (blob_start + off) as u64)?;
        if raw.shape != e.shape {
            return Err(corrupt(
                (blob_start + off) as u64,
                format!("tensor {}: shape {:?} but manifest says {:?}", e.name, raw.shape, e.shape),
            ));
        }
        by_name.insert(e.name.clone(), raw);
    }

    let mut state = ModelState::<F>::new(&cfg)?;
    let mut err = None;
    state.model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.remove(&name) {
            None => err = Some(corrupt(13, format!("missing tensor {name}"))),
            Some(raw) if raw.shape != t.shape() => {
                err = Some(corrupt(13, format!("tensor {name}: shape {:?}, model expects {:?}", raw.shape, t.shape())))
            }
            Some(raw) => match raw.to_tensor::<F>() {
                Ok(v) => *t = if t.requires_grad() { v.into_param() } else { v },
                Err(e) => err = Some(e),
            },
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut names: Vec<String> = by_name.keys().filter(|k| k.starts_with("adam.m.")).cloned().collect();
    names.sort();
    for mn in names {
        let name = mn["adam.m.".len()..].to_string();
        let (_, vn) = moment_names(&name);
        let m = by_name.remove(&mn).expect("listed");
        let v = by_name
            .remove(&vn)
            .ok_or_else(|| corrupt(13, format!("missing tensor {vn}")))?;
        state.opt.state.insert(
            name,
            Moments {
                m: m.to_tensor::<F>()?.to_vec(),
                v: v.to_tensor::<F>()?.to_vec(),
            },
        );
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(corrupt(13, format!("unexpected tensor {extra}")));
    }
    state.opt.t = manifest.adam_t;
    state.step = manifest.step as usize;
    state.epoch = manifest.epoch as usize;
    Ok((cfg, state))
}

pub fn load<F: Float>(path: impl AsRef<Path>) -> Result<(TrainConfig, ModelState<F>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
