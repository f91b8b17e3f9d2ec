use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dseq_core::datagen::{self, NUM_CLASSES};
use dseq_core::eval::{self, ProbeConfig};
use dseq_core::pgm::Gray;
use dseq_core::regionsel::curriculum_select;
use dseq_core::rng::{self, tag};
use dseq_core::saliency::attention_map;
use dseq_core::seqpred::{dseq_grad_check, OrderScheme};
use dseq_core::tensor::gradcheck::{primitive_cases, run_case, GradCheckOptions};
use dseq_core::tensor::io::{RawTensor, TensorData};
use dseq_core::trainer::{self, checkpoint, ModelState, TrainConfig};
use dseq_core::vit::VitConfig;
use dseq_core::Tensor;

#[derive(Parser)]
#[command(name = "dseq", version, about = "Saliency-ordered sequential JEPA pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labelled dataset.
    Datagen {
        #[arg(long, default_value_t = trainer::DESK_IMAGES)]
        n: usize,
        #[arg(long, default_value_t = VitConfig::desk().image_size)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the first N images as PGM previews.
        #[arg(long, default_value_t = 0)]
        preview: usize,
    },
    /// Pre-train a model; checkpoints and loss.csv go to --out.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Select regions for one image and write masks, a sidecar and an overlay.
    Regions {
        /// PGM image, or DSQT tensor [3,S,S] / [S,S].
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Curriculum epoch (0-based); lambda follows the checkpoint's schedule.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_saliency: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear probe on frozen target-encoder features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// k-means over final patch embeddings of one image.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pgm_out: Option<PathBuf>,
    },
    /// Mean prediction loss per step index over a dataset.
    Steps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train and probe once per order scheme.
    AblateOrder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "flat,random,spatial,sequential")]
        schemes: Vec<String>,
        #[arg(long)]
        probe_train: PathBuf,
        #[arg(long)]
        probe_test: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Finite-difference checks of every primitive and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set epochs=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let data = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        Gray::read(path)?.to_rgb(size)
    } else {
        let raw = RawTensor::read_file(path)?;
        let v: Vec<f32> = raw.to_tensor::<f32>()?.to_vec();
        match raw.shape.as_slice() {
            [3, h, w] if *h == size && *w == size => v,
            [h, w] if *h == size && *w == size => [v.clone(), v.clone(), v].concat(),
            s => bail!("{}: expected a [3,{size},{size}] or [{size},{size}] tensor, found {s:?}", path.display()),
        }
    };
    Ok(Tensor::new(data, &[3, size, size])?)
}

fn load_checkpoint(path: &Path) -> Result<(TrainConfig, ModelState<f32>)> {
    let (cfg, st) = checkpoint::load::<f32>(path)?;
    println!("config hash {}", cfg.hash());
    Ok((cfg, st))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Datagen {
            n,
            size,
            seed,
            out,
            preview,
        } => {
            let samples = datagen::make_dataset(n, size, seed)?;
            datagen::write_dataset(&samples, size, &out)?;
            for (i, s) in samples.iter().take(preview).enumerate() {
                Gray::from_rgb(&s.image, size).write(out.join(format!("preview_{i:04}.pgm")))?;
            }
            println!("wrote {n} samples ({size}px, {NUM_CLASSES} classes) to {}", out.display());
        }
        Cmd::Pretrain { cfg, resume, out, quiet } => {
            let cfg = cfg.resolve()?;
            println!("config hash {}", cfg.hash());
            let samples = datagen::read_dataset(&cfg.dataset)?;
            let state = match resume {
                Some(p) => {
                    let (saved, st) = checkpoint::load::<f32>(&p)?;
                    if saved != cfg {
                        bail!(
                            "{} was written with config {} but this run resolves to {}",
                            p.display(),
                            saved.hash(),
                            cfg.hash()
                        );
                    }
                    Some(st)
                }
                None => None,
            };
            let summary = trainer::train(&cfg, &samples, &out, state, &mut |r| {
                if !quiet {
                    println!(
                        "step {:>6} epoch {:>3} loss {:.6} lambda {:.3} lr {:.3e} wd {:.4} ema {:.5}",
                        r.step, r.epoch, r.loss, r.lambda, r.lr, r.wd, r.ema
                    );
                }
            })?;
            println!(
                "done: {} steps, {} rejected, final checkpoint {}",
                summary.log.len(),
                summary.rejected_steps,
                summary.final_checkpoint.display()
            );
        }
        Cmd::Regions {
            image,
            checkpoint,
            epoch,
            out,
            dump_saliency,
            seed,
        } => {
            let (cfg, st) = load_checkpoint(&checkpoint)?;
            let img = load_image(&image, cfg.model.image_size)?;
            let map = attention_map(&st.model.target, &img, cfg.layer(), cfg.similarity)?;
            let lambda = trainer::epoch_lambda(epoch, cfg.epochs);
            let mut r = rng::stream(seed.unwrap_or(cfg.seed), &[tag::REGIONS, epoch as u64, u64::MAX]);
            let set = curriculum_select(&map, lambda, &cfg.regions, &mut r)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let (h, w) = (set.h, set.w);
            for (k, mask) in set.masks().into_iter().enumerate() {
                RawTensor::new(vec![h, w], TensorData::U8(mask))?.write_file(out.join(format!("region_{k}.dsqt")))?;
            }
            let regions: Vec<serde_json::Value> = (0..set.len())
                .map(|k| {
                    serde_json::json!({
                        "index": k,
                        "origin": set.origins[k].as_str(),
                        "score": set.scores.get(k),
                        "cells": set.regions[k],
                    })
                })
                .collect();
            let sidecar = serde_json::json!({
                "grid": [h, w],
                "tau": set.tau,
                "lambda": set.lambda,
                "fallback": set.fallback,
                "saliency_layer": map.layer,
                "regions": regions,
            });
            write(&out.join("regions.json"), serde_json::to_string_pretty(&sidecar)?)?;
            let base = Gray::from_rgb(img.data(), cfg.model.image_size);
            Gray::label_overlay(&base, &set.label_grid(), h, w).write(out.join("overlay.pgm"))?;
            if dump_saliency {
                let t = Tensor::<f64>::new(map.values.clone(), &[h, w])?;
                RawTensor::from_tensor(&t).write_file(out.join("saliency.dsqt"))?;
                Gray::from_grid(&map.values, h, w, 1).write(out.join("saliency.pgm"))?;
            }
            println!(
                "{} regions (tau {:?}, lambda {lambda}, fallback {}) written to {}",
                set.len(),
                set.tau,
                set.fallback,
                out.display()
            );
        }
        Cmd::Probe {
            checkpoint,
            train,
            test,
            out,
            epochs,
            seed,
        } => {
            let (cfg, st) = load_checkpoint(&checkpoint)?;
            let tr = datagen::read_dataset(&train)?;
            let te = datagen::read_dataset(&test)?;
            let pc = ProbeConfig {
                epochs,
                seed,
                ..ProbeConfig::default()
            };
            let mut res = eval::linear_probe(&st.model, &tr, &te, NUM_CLASSES, &pc)?;
            res.config_hash = cfg.hash();
            let csv = eval::probe_csv(&res);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
            println!("probe accuracy {:.4}", res.accuracy);
        }
        Cmd::Cluster {
            checkpoint,
            image,
            k,
            seed,
            out,
            pgm_out,
        } => {
            let (cfg, st) = load_checkpoint(&checkpoint)?;
            let img = load_image(&image, cfg.model.image_size)?;
            let pc = eval::patch_clusters(&st.model, &img, k, seed)?;
            let mut csv = String::from("row,col,cluster\n");
            for (i, id) in pc.ids.iter().enumerate() {
                csv.push_str(&format!("{},{},{id}\n", i / pc.w, i % pc.w));
            }
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
            if let Some(p) = pgm_out {
                let base = Gray::from_rgb(img.data(), cfg.model.image_size);
                Gray::label_overlay(&base, &pc.ids, pc.h, pc.w).write(p)?;
            }
            println!("inertia {} after {} passes", pc.inertia, pc.history.len());
        }
        Cmd::Steps {
            checkpoint,
            dataset,
            out,
        } => {
            let (cfg, st) = load_checkpoint(&checkpoint)?;
            let samples = datagen::read_dataset(&dataset)?;
            let rows = eval::per_step_losses(&st.model, &cfg, &samples)?;
            let csv = eval::steps_csv(&rows);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
            if let Some((early, late)) = eval::difficulty_trend(&rows) {
                let dir = if late > early { "increasing" } else { "not increasing" };
                println!("early steps {early:.6}, later steps {late:.6}: difficulty {dir}");
            }
        }
        Cmd::AblateOrder {
            cfg,
            schemes,
            probe_train,
            probe_test,
            out,
        } => {
            let cfg = cfg.resolve()?;
            println!("config hash {}", cfg.hash());
            let schemes = schemes
                .iter()
                .map(|s| OrderScheme::parse(s))
                .collect::<dseq_core::Result<Vec<_>>>()?;
            let pretrain = datagen::read_dataset(&cfg.dataset)?;
            let tr = datagen::read_dataset(&probe_train)?;
            let te = datagen::read_dataset(&probe_test)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows = eval::order_ablation(
                &cfg,
                &schemes,
                &pretrain,
                &tr,
                &te,
                NUM_CLASSES,
                &ProbeConfig::default(),
                &out,
                &mut |s, r| {
                    if r.step % 50 == 0 {
                        println!("[{}] step {} epoch {} loss {:.6}", s.as_str(), r.step, r.epoch, r.loss);
                    }
                },
            )?;
            let csv = eval::ablation_csv(&rows);
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Gradcheck { instances, seed } => {
            let opts = GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            };
            let mut failed = Vec::new();
            for case in primitive_cases() {
                let rep = run_case(&case, instances, &opts)?;
                println!("{:<22} max rel err {:.3e} {}", case.name, rep.max_rel_err, if rep.passed { "ok" } else { "FAIL" });
                if !rep.passed {
                    failed.push(case.name.to_string());
                }
            }
            let full = GradCheckOptions {
                max_per_input: Some(3),
                ..opts
            };
            for scheme in [OrderScheme::Sequential, OrderScheme::Flat] {
                let rep = dseq_grad_check(instances, scheme, &full)?;
                let name = format!("dseq_loss/{}", scheme.as_str());
                println!("{name:<22} max rel err {:.3e} {}", rep.max_rel_err, if rep.passed { "ok" } else { "FAIL" });
                if !rep.passed {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn threads_from_env() -> std::result::Result<usize, String> {
    match std::env::var("DSEQ_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("DSEQ_THREADS must be a non-negative integer, got {v:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    // Kernels are single-threaded; the variable is validated so scripts
    // written for multi-threaded builds fail loudly on typos.
    if let Err(msg) = threads_from_env() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
