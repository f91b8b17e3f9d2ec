//! Pre-training: curriculum region selection from the EMA target encoder,
//! sequential prediction, AdamW on context encoder and predictor, EMA
//! update of the target encoder, checkpoints and a loss log.

pub mod checkpoint;
mod config;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;

pub use checkpoint::ModelState;
pub use config::TrainConfig;
pub use schedule::Schedule;

use crate::datagen::SyntheticSample;
use crate::error::{Error, Result};
use crate::regionsel::{curriculum_lambda, curriculum_select};
use crate::rng::{self, tag};
use crate::saliency::map_from_tokens;
use crate::seqpred::{dseq_loss, predict_steps, region_order};
use crate::tensor::{Float, Tensor};
use optim::{ema_update, zero_grads};

pub const LOG_HEADER: &str = "step,epoch,loss,lambda,lr,wd,ema";
pub const LOG_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.dsqc";
/// Pre-training set size of the desk recipe.
pub const DESK_IMAGES: usize = 256;

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-image loss of the batch (NaN when non-finite).
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub wd: f64,
    pub ema: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, self.lambda, self.lr, self.wd, self.ema
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid(format!("bad loss log row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            loss: num(2)?,
            lambda: num(3)?,
            lr: num(4)?,
            wd: num(5)?,
            ema: num(6)?,
        })
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.csv()).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::invalid(format!("{}: missing header {LOG_HEADER}", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(LogRow::parse).collect()
}

/// Curriculum probability for an epoch: 0 at the first epoch, 1 at the
/// last.
pub fn epoch_lambda(epoch: usize, epochs: usize) -> f64 {
    curriculum_lambda(epoch as f64, epochs.saturating_sub(1) as f64)
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.dsqc")
}

/// Image tensors `[C, S, S]` for a dataset.
pub fn image_tensors<F: Float>(samples: &[SyntheticSample]) -> Result<Vec<Tensor<F>>> {
    samples
        .iter()
        .map(|s| Tensor::new(s.image.iter().map(|&v| F::of(v as f64)).collect(), &[3, s.size, s.size]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: Vec<LogRow>,
    pub final_checkpoint: PathBuf,
    pub config_hash: String,
    pub rejected_steps: usize,
}

/// Loss of one image under the current model; gradients accumulate into
/// the context encoder and predictor scaled by `weight`.
fn image_step<F: Float>(
    cfg: &TrainConfig,
    state: &ModelState<F>,
    image: &Tensor<F>,
    lambda: f64,
    rng: &mut rng::Rng,
    weight: f64,
) -> Result<f64> {
    let model = &state.model;
    let (targets, taps) = model.target_forward(image, &[cfg.layer()])?;
    let g = cfg.model.grid();
    let map = map_from_tokens(&taps[0], g, g, cfg.similarity)?;
    let set = curriculum_select(&map, lambda, &cfg.regions, rng)?;
    let order = region_order(&set, cfg.order, rng);
    let tokens = model.context.patchify(image)?;
    let steps = predict_steps(&model.context, &model.predictor, &tokens, &targets, &set, &order, cfg.order)?;
    let loss = dseq_loss(&steps, F::of(cfg.huber_delta))?;
    let value = loss.item().to_f64().unwrap_or(f64::NAN);
    if value.is_finite() {
        loss.scale(F::of(weight))?.backward()?;
    }
    Ok(value)
}

/// Run (or continue) pre-training on `samples`, writing checkpoints and
/// `loss.csv` into `out_dir`. `progress` sees every log row.
pub fn train<F: Float>(
    cfg: &TrainConfig,
    samples: &[SyntheticSample],
    out_dir: &Path,
    resume: Option<ModelState<F>>,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.size != cfg.model.image_size) {
        return Err(Error::Config(format!(
            "dataset images are {}px but image_size = {}",
            s.size, cfg.model.image_size
        )));
    }
    if cfg.model.channels != 3 {
        return Err(Error::Config("the synthetic dataset has 3 channels".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("config.txt");
    fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let log_path = out_dir.join(LOG_FILE);

    let images = image_tensors::<F>(samples)?;
    let spe = steps_per_epoch(images.len(), cfg.batch_size);
    let sched = Schedule::new(cfg, spe);

    let (mut state, mut log) = match resume {
        Some(st) => {
            let log = if st.step > 0 {
                read_log(&log_path)?.into_iter().filter(|r| r.step < st.step).collect()
            } else {
                Vec::new()
            };
            (st, log)
        }
        None => (ModelState::new(cfg)?, Vec::new()),
    };
    if state.step != state.epoch * spe {
        return Err(Error::invalid(format!(
            "resume state at step {} does not sit on an epoch boundary ({} steps per epoch)",
            state.step, spe
        )));
    }

    let mut rejected = 0;
    let mut consecutive_bad = 0;
    for epoch in state.epoch..cfg.epochs {
        let lambda = epoch_lambda(epoch, cfg.epochs);
        let mut perm: Vec<usize> = (0..images.len()).collect();
        let mut shuf = rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]);
        for i in (1..perm.len()).rev() {
            perm.swap(i, shuf.random_range(0..=i));
        }
        for batch in perm.chunks(cfg.batch_size) {
            let step = state.step;
            let (lr, wd, ema) = (sched.lr_at(step), sched.wd_at(step), sched.ema_at(step));
            let weight = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            let mut finite = true;
            for &idx in batch {
                let mut r = rng::stream(cfg.seed, &[tag::REGIONS, epoch as u64, idx as u64]);
                match image_step(cfg, &state, &images[idx], lambda, &mut r, weight) {
                    Ok(v) if v.is_finite() => total += v,
                    Ok(_) | Err(Error::NonFinite { .. }) => finite = false,
                    Err(e) => return Err(e),
                }
            }
            let mut loss = total * weight;
            let ModelState { model, opt, .. } = &mut state;
            if finite {
                let report = opt.step(
                    &mut [("context", &mut model.context), ("predictor", &mut model.predictor)],
                    lr,
                    wd,
                    Some(cfg.grad_clip),
                )?;
                finite = !report.rejected;
            }
            if finite {
                ema_update(&mut model.target, &model.context, ema)?;
                consecutive_bad = 0;
            } else {
                zero_grads(&model.context);
                zero_grads(&model.predictor);
                rejected += 1;
                consecutive_bad += 1;
                loss = f64::NAN;
                if consecutive_bad >= cfg.max_nonfinite {
                    write_log(&log_path, &log)?;
                    return Err(Error::Aborted(format!(
                        "{consecutive_bad} consecutive non-finite steps (last at step {step})"
                    )));
                }
            }
            let row = LogRow {
                step,
                epoch,
                loss,
                lambda,
                lr,
                wd,
                ema,
            };
            progress(&row);
            log.push(row);
            state.step += 1;
        }
        state.epoch = epoch + 1;
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            checkpoint::save(out_dir.join(checkpoint_name(state.epoch)), cfg, &state)?;
            write_log(&log_path, &log)?;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, cfg, &state)?;
    write_log(&log_path, &log)?;
    Ok(TrainSummary {
        log,
        final_checkpoint,
        config_hash: cfg.hash(),
        rejected_steps: rejected,
    })
}

/// Mean logged loss per epoch, skipping non-finite rows.
pub fn epoch_means(log: &[LogRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log.iter().filter(|r| r.loss.is_finite()) {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.loss;
                last.2 += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}
