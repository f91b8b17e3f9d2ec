//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! Criteria 9-11 pre-train desk models and take several minutes.

use std::collections::VecDeque;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::RngExt;

use dseq_core::datagen::{make_dataset, SyntheticSample, NUM_CLASSES};
use dseq_core::eval::{self, ProbeConfig};
use dseq_core::regionsel::{
    connected_components, curriculum_lambda, curriculum_select, otsu_boundary, Origin, RegionParams, RegionSet,
};
use dseq_core::rng::{stream, Rng};
use dseq_core::saliency::{map_from_tokens, SaliencyMap};
use dseq_core::seqpred::{dseq_grad_check, dseq_loss, huber_elem, predict_steps, region_order, Jepa, OrderScheme, StepBatch};
use dseq_core::tensor::gradcheck::{primitive_cases, run_case, GradCheckOptions};
use dseq_core::trainer::{self, epoch_means, image_tensors, steps_per_epoch, ModelState, Schedule, TrainConfig};
use dseq_core::vit::{Visibility, VitConfig};
use dseq_core::Tensor;

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const CURRICULUM_TOL: f64 = 0.02;
const LOSS_TOL: f64 = 1e-6;
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const PROBE_BAR: f64 = 0.60;
const SALIENCY_BAR: f64 = 0.70;
/// A saliency argmax cell counts as inside the object when at least this
/// fraction of its pixels belong to the object mask.
const INSIDE_COVERAGE: f64 = 0.25;
const HELD_OUT: usize = 200;
const DATA_SEED: u64 = 7;
const HELD_OUT_SEED: u64 = 2002;
const ABLATION_EPOCHS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check<'a> = Box<dyn FnOnce() -> dseq_core::Result<Outcome> + 'a>;

fn run(id: usize, name: &str, f: Check<'_>) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let (pass, detail) = match res {
        Ok(Ok(o)) => (o.pass, o.detail),
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panic: {msg}"))
        }
    };
    println!(
        "[{}] {id:>2} {name}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    pass
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> dseq_core::Result<Outcome> {
    let t = Instant::now();
    let opts = GradCheckOptions {
        tol: GRAD_TOL,
        ..GradCheckOptions::default()
    };
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    let mut cases = 0;
    for case in primitive_cases() {
        let rep = run_case(&case, GRAD_INSTANCES, &opts)?;
        cases += 1;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, case.name.to_string());
        }
        if !rep.passed {
            failed.push(case.name.to_string());
        }
    }
    let full = GradCheckOptions {
        max_per_input: Some(3),
        ..opts
    };
    for scheme in [OrderScheme::Sequential, OrderScheme::Flat] {
        let rep = dseq_grad_check(GRAD_INSTANCES, scheme, &full)?;
        let name = format!("dseq_loss/{}", scheme.as_str());
        cases += 1;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name.clone());
        }
        if !rep.passed {
            failed.push(name);
        }
    }
    let elapsed = t.elapsed();
    Ok(outcome(
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{cases} checks x {GRAD_INSTANCES} instances, worst rel err {:.2e} ({}) < {GRAD_TOL:e}, failed {failed:?}, {:.1}s < {}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

// 2 -------------------------------------------------------------------------

/// Exhaustive between-class variance sweep in floating point; values
/// within 1e-12 (relative) of the maximum count as ties, lowest boundary
/// wins.
fn otsu_oracle(hist: &[u64]) -> Option<usize> {
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let mut var = vec![None; hist.len()];
    for (b, slot) in var.iter_mut().enumerate().skip(1) {
        let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for (i, &c) in hist.iter().enumerate() {
            if i < b {
                n0 += c as f64;
                s0 += (i as f64) * c as f64;
            } else {
                n1 += c as f64;
                s1 += (i as f64) * c as f64;
            }
        }
        if n0 > 0.0 && n1 > 0.0 {
            let d = s0 / n0 - s1 / n1;
            *slot = Some((n0 / total) * (n1 / total) * d * d);
        }
    }
    let best = var.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    var.iter().position(|v| v.is_some_and(|v| v >= best * (1.0 - 1e-12)))
}

fn random_histogram(kind: usize, bins: usize, r: &mut Rng) -> Vec<u64> {
    match kind {
        0 => {
            let (m1, m2) = (r.random_range(0.0..0.45) * bins as f64, r.random_range(0.55..1.0) * bins as f64);
            let (s1, s2) = (r.random_range(1.0..6.0), r.random_range(1.0..6.0));
            let (w1, w2) = (r.random_range(20.0..200.0), r.random_range(20.0..200.0));
            (0..bins)
                .map(|i| {
                    let x = i as f64;
                    let v = w1 * (-(x - m1).powi(2) / (2.0 * s1 * s1)).exp() + w2 * (-(x - m2).powi(2) / (2.0 * s2 * s2)).exp();
                    v.round() as u64 + r.random_range(0..3)
                })
                .collect()
        }
        1 => (0..bins).map(|_| r.random_range(0..20)).collect(),
        _ => {
            let rate = r.random_range(0.05..0.5);
            let flip = r.random_bool(0.5);
            (0..bins)
                .map(|i| {
                    let x = if flip { bins - 1 - i } else { i } as f64;
                    (300.0 * (-rate * x).exp()).round() as u64 + r.random_range(0..2)
                })
                .collect()
        }
    }
}

fn otsu_equivalence() -> dseq_core::Result<Outcome> {
    let t = Instant::now();
    let mut r = stream(11, &[]);
    let mut mismatches = 0;
    let mut counts = [0usize; 3];
    for i in 0..200 {
        let kind = i % 3;
        let h = random_histogram(kind, 64, &mut r);
        counts[kind] += 1;
        let got = otsu_boundary(&h).ok();
        if got != otsu_oracle(&h) {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    Ok(outcome(
        mismatches == 0 && elapsed < ORACLE_BUDGET,
        format!(
            "200 histograms (bimodal {}, uniform {}, skewed {}), {mismatches} boundary mismatches, {:.2}s < {}s",
            counts[0],
            counts[1],
            counts[2],
            elapsed.as_secs_f64(),
            ORACLE_BUDGET.as_secs()
        ),
    ))
}

// 3 -------------------------------------------------------------------------

fn flood_fill(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for s in 0..h * w {
        if !mask[s] || seen[s] {
            continue;
        }
        let mut comp = Vec::new();
        let mut q = VecDeque::from([s]);
        seen[s] = true;
        while let Some(c) = q.pop_front() {
            comp.push(c);
            let (y, x) = ((c / w) as isize, (c % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        q.push_back(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort();
    out
}

fn ccl_equivalence() -> dseq_core::Result<Outcome> {
    let t = Instant::now();
    let mut r = stream(12, &[]);
    let mut mismatches = 0;
    for g in [4usize, 8, 16] {
        for _ in 0..500 {
            let density = r.random_range(0.1..0.9);
            let mask: Vec<bool> = (0..g * g).map(|_| r.random_bool(density)).collect();
            let mut got = connected_components(&mask, g, g)?;
            got.iter_mut().for_each(|c| c.sort_unstable());
            got.sort();
            if got != flood_fill(&mask, g, g) {
                mismatches += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    Ok(outcome(
        mismatches == 0 && elapsed < ORACLE_BUDGET,
        format!(
            "1500 masks (4x4, 8x8, 16x16), {mismatches} partition mismatches vs flood fill, {:.2}s < {}s",
            elapsed.as_secs_f64(),
            ORACLE_BUDGET.as_secs()
        ),
    ))
}

// 4 -------------------------------------------------------------------------

/// Random smooth map: a few Gaussian bumps plus a little noise.
fn random_map(g: usize, r: &mut Rng) -> SaliencyMap {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..r.random_range(1..5))
        .map(|_| {
            (
                r.random_range(0.0..g as f64),
                r.random_range(0.0..g as f64),
                r.random_range(0.6..2.5),
                r.random_range(0.3..1.0),
            )
        })
        .collect();
    let values = (0..g * g)
        .map(|i| {
            let (y, x) = ((i / g) as f64, (i % g) as f64);
            let v: f64 = bumps
                .iter()
                .map(|(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            v + r.random_range(0.0..0.05)
        })
        .collect();
    SaliencyMap::new(g, g, values).expect("finite map")
}

fn mean_normalized(map: &SaliencyMap, cells: &[usize]) -> f64 {
    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    cells.iter().map(|&c| (map.values[c] - lo) / (hi - lo)).sum::<f64>() / cells.len() as f64
}

fn partition_problem(set: &RegionSet, map: &SaliencyMap, alpha: f64) -> Option<String> {
    let n = set.h * set.w;
    let mut owners = vec![0usize; n];
    for reg in &set.regions {
        for &c in reg {
            owners[c] += 1;
        }
    }
    if owners.iter().any(|&o| o != 1) {
        return Some("regions overlap or miss cells".into());
    }
    if set.origins.last() != Some(&Origin::Residual) {
        return Some("last region is not the residual".into());
    }
    let mut prev = f64::INFINITY;
    for (k, o) in set.origins.iter().enumerate() {
        if *o != Origin::Discriminative {
            continue;
        }
        let rho = mean_normalized(map, &set.regions[k]);
        if rho > prev + 1e-12 {
            return Some(format!("rho increases at region {k}"));
        }
        prev = rho;
        if (set.regions[k].len() as f64) < alpha * n as f64 {
            return Some(format!("discriminative region {k} below the size floor"));
        }
    }
    None
}

fn partition_invariant() -> dseq_core::Result<Outcome> {
    let p = RegionParams::default();
    let total = 49.0;
    let ts = [0.0, total / 2.0, total];
    let mut r = stream(13, &[]);
    let mut problems = Vec::new();
    let mut disc = 0;
    for i in 0..1000 {
        let t = ts[i % 3];
        let map = random_map(8, &mut r);
        let set = curriculum_select(&map, curriculum_lambda(t, total), &p, &mut r)?;
        disc += set.origins.iter().filter(|o| **o == Origin::Discriminative).count();
        if let Some(msg) = partition_problem(&set, &map, p.alpha) {
            problems.push(format!("draw {i}: {msg}"));
        }
    }
    Ok(outcome(
        problems.is_empty(),
        format!(
            "1000 draws at t in {{0, T/2, T}}: {} violations, {disc} discriminative regions checked (disjoint, union = grid, rho non-increasing, size >= alpha*h*w){}",
            problems.len(),
            problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
        ),
    ))
}

// 5 -------------------------------------------------------------------------

/// Four separated 10-cell blobs on an 8x8 grid: always four candidates.
fn four_blob_map() -> SaliencyMap {
    let mut v = vec![0.0; 64];
    let mut put = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, a: f64| {
        for y in rows {
            for x in cols.clone() {
                v[y * 8 + x] = a;
            }
        }
    };
    put(0..2, 0..5, 1.0);
    put(3..5, 0..5, 0.9);
    put(6..8, 0..5, 0.8);
    put(0..5, 6..8, 0.7);
    SaliencyMap::new(8, 8, v).expect("finite map")
}

fn discriminative_fraction(map: &SaliencyMap, lambda: f64, selections: usize, seed: u64) -> dseq_core::Result<(f64, usize)> {
    let p = RegionParams::default();
    let mut r = stream(seed, &[]);
    let (mut hits, mut slots) = (0, 0);
    for _ in 0..selections {
        let set = curriculum_select(map, lambda, &p, &mut r)?;
        for o in &set.origins[..set.origins.len() - 1] {
            slots += 1;
            hits += usize::from(*o == Origin::Discriminative);
        }
    }
    Ok((hits as f64 / slots as f64, slots))
}

fn curriculum_statistics() -> dseq_core::Result<Outcome> {
    let map = four_blob_map();
    let total = 49.0;
    let (mid, n_mid) = discriminative_fraction(&map, curriculum_lambda(total / 2.0, total), 2500, 14)?;
    let (start, _) = discriminative_fraction(&map, curriculum_lambda(0.0, total), 500, 15)?;
    let (end, _) = discriminative_fraction(&map, curriculum_lambda(total, total), 500, 16)?;
    Ok(outcome(
        (mid - 0.5).abs() <= CURRICULUM_TOL && start == 0.0 && end == 1.0,
        format!("t=T/2: {mid:.4} over {n_mid} slots from 2500 selections (0.5 +/- {CURRICULUM_TOL}); t=0: {start}; t=T: {end}"),
    ))
}

// 6 -------------------------------------------------------------------------

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn causality() -> dseq_core::Result<Outcome> {
    let cfg = VitConfig::desk();
    let model = Jepa::<f32>::new(&cfg, &mut stream(21, &[]))?;
    let samples = make_dataset(20, cfg.image_size, 21)?;
    let images = image_tensors::<f32>(&samples)?;
    let (s, g, p) = (cfg.image_size, cfg.grid(), cfg.patch_size);
    let params = RegionParams::default();
    let mut r = stream(22, &[]);
    let (mut checked, mut broken, mut control_missed) = (0, 0, 0);
    for img in &images {
        let (targets, taps) = model.target_forward(img, &[3])?;
        let map = map_from_tokens(&taps[0], g, g, Default::default())?;
        let set = curriculum_select(&map, 0.5, &params, &mut r)?;
        let order = region_order(&set, OrderScheme::Sequential, &mut r);
        let tokens = model.context.patchify(img)?;
        let base = predict_steps(&model.context, &model.predictor, &tokens, &targets, &set, &order, OrderScheme::Sequential)?;
        for k in 1..set.len() {
            let ctx = base[k - 1].context_cells.clone();
            let mut inside = vec![false; g * g];
            ctx.iter().for_each(|&c| inside[c] = true);
            let mut data = img.to_vec();
            let mut control = img.to_vec();
            for ch in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let i = ch * s * s + y * s + x;
                        if inside[(y / p) * g + x / p] {
                            control[i] = 1.0 - control[i];
                        } else {
                            data[i] = r.random_range(0.0..1.0);
                        }
                    }
                }
            }
            let pert = Tensor::new(data, img.shape())?;
            let pt = model.context.patchify(&pert)?;
            let steps: Vec<StepBatch<f32>> =
                predict_steps(&model.context, &model.predictor, &pt, &targets, &set, &order, OrderScheme::Sequential)?;
            let enc_a = model.context.encode(&tokens, Visibility::Cells(&ctx))?;
            let enc_b = model.context.encode(&pt, Visibility::Cells(&ctx))?;
            checked += 1;
            if bits(&enc_a.tokens) != bits(&enc_b.tokens) || bits(&base[k - 1].predicted) != bits(&steps[k - 1].predicted) {
                broken += 1;
            }
            // Changing pixels inside the context must change the prediction.
            let ct = model.context.patchify(&Tensor::new(control, img.shape())?)?;
            let cs = predict_steps(&model.context, &model.predictor, &ct, &targets, &set, &order, OrderScheme::Sequential)?;
            if bits(&cs[k - 1].predicted) == bits(&base[k - 1].predicted) {
                control_missed += 1;
            }
        }
    }
    Ok(outcome(
        broken == 0 && control_missed == 0 && checked > 0,
        format!(
            "20 images, {checked} (image, k) pairs: {broken} with step-k inputs or prediction changed by pixels outside R_1..R_k; in-context control changed {}/{checked}",
            checked - control_missed
        ),
    ))
}

// 7 -------------------------------------------------------------------------

fn psi(x: f64, d: f64) -> f64 {
    if x.abs() <= d {
        0.5 * x * x
    } else {
        d * (x.abs() - 0.5 * d)
    }
}

fn huber_values() -> dseq_core::Result<Outcome> {
    let exact = huber_elem(0.0f64, 1.0) == 0.0
        && huber_elem(0.5f64, 1.0) == 0.125
        && huber_elem(2.0f64, 1.0) == 1.5
        && huber_elem(-2.0f64, 1.0) == 1.5;
    let mut r = stream(31, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let nsteps = r.random_range(1..6);
        let d = r.random_range(4..16);
        let mut steps = Vec::new();
        let mut oracle = 0.0;
        for k in 0..nsteps {
            let rows = r.random_range(1..12);
            let pr: Vec<f64> = (0..rows * d).map(|_| r.random_range(-3.0..3.0)).collect();
            let tg: Vec<f64> = (0..rows * d).map(|_| r.random_range(-3.0..3.0)).collect();
            oracle += pr.iter().zip(&tg).map(|(a, b)| psi(a - b, 1.0)).sum::<f64>() / (rows * d) as f64;
            steps.push(StepBatch {
                step: k + 1,
                context_cells: vec![],
                target_cells: vec![],
                predicted: Tensor::new(pr, &[rows, d])?,
                target: Tensor::new(tg, &[rows, d])?,
            });
        }
        oracle /= nsteps as f64;
        worst = worst.max((dseq_loss(&steps, 1.0)?.item() - oracle).abs());
    }
    Ok(outcome(
        exact && worst < LOSS_TOL,
        format!("psi(0)=0, psi(0.5)=0.125, psi(2)=1.5 exact: {exact}; 50 random batches, max |loss - oracle| {worst:.2e} < {LOSS_TOL:e}"),
    ))
}

// 8 -------------------------------------------------------------------------

fn schedule_endpoints() -> dseq_core::Result<Outcome> {
    let cfg = TrainConfig::default();
    let spe = steps_per_epoch(trainer::DESK_IMAGES, cfg.batch_size);
    let s = Schedule::new(&cfg, spe);
    let last = s.total_steps - 1;
    let got = [
        s.lr_at(0),
        s.lr_at(s.warmup_steps),
        s.lr_at(last),
        s.wd_at(0),
        s.wd_at(last),
        s.ema_at(0),
        s.ema_at(last),
    ];
    let want = [1e-4, 1e-3, 1e-6, 4e-2, 4e-1, 0.996, 1.0];
    Ok(outcome(
        got == want,
        format!(
            "{} steps (warmup {}): LR {:e}/{:e}/{:e}, WD {}->{}, EMA {}->{}",
            s.total_steps, s.warmup_steps, got[0], got[1], got[2], got[3], got[4], got[5], got[6]
        ),
    ))
}

// 9 -------------------------------------------------------------------------

struct DeskRun {
    dir: PathBuf,
    elapsed: Duration,
    log: Vec<trainer::LogRow>,
}

fn desk_run(cfg: &TrainConfig, data: &[SyntheticSample], dir: &Path) -> dseq_core::Result<DeskRun> {
    let t = Instant::now();
    let summary = trainer::train::<f32>(cfg, data, dir, None, &mut |_| {})?;
    Ok(DeskRun {
        dir: dir.to_path_buf(),
        elapsed: t.elapsed(),
        log: summary.log,
    })
}

fn determinism(runs: &[DeskRun]) -> dseq_core::Result<Outcome> {
    let read = |r: &DeskRun| fs::read(r.dir.join(trainer::FINAL_CHECKPOINT)).map_err(|e| dseq_core::Error::Io {
        path: r.dir.clone(),
        source: e,
    });
    let (a, b) = (read(&runs[0])?, read(&runs[1])?);
    let same = a == b;
    let times: Vec<f64> = runs.iter().map(|r| r.elapsed.as_secs_f64()).collect();
    Ok(outcome(
        same && runs.iter().all(|r| r.elapsed < RUN_BUDGET),
        format!(
            "two {}-epoch runs on {} images: checkpoints byte-identical {same} ({} bytes); {:.0}s and {:.0}s < {}s",
            TrainConfig::default().epochs,
            trainer::DESK_IMAGES,
            a.len(),
            times[0],
            times[1],
            RUN_BUDGET.as_secs()
        ),
    ))
}

// 10 ------------------------------------------------------------------------

fn saliency_hits(model: &Jepa<f32>, cfg: &TrainConfig, held: &[SyntheticSample]) -> dseq_core::Result<(usize, usize)> {
    let g = cfg.model.grid();
    let (mut max_hits, mut min_hits) = (0, 0);
    for (img, s) in image_tensors::<f32>(held)?.iter().zip(held) {
        let (_, taps) = model.target_forward(img, &[cfg.layer()])?;
        let map = map_from_tokens(&taps[0], g, g, cfg.similarity)?;
        let cov = s.cell_coverage(g);
        max_hits += usize::from(cov[map.argmax()] >= INSIDE_COVERAGE);
        let argmin = (0..map.values.len())
            .min_by(|&a, &b| map.values[a].total_cmp(&map.values[b]))
            .expect("non-empty map");
        min_hits += usize::from(cov[argmin] >= INSIDE_COVERAGE);
    }
    Ok((max_hits, min_hits))
}

fn learning_sanity(run: &DeskRun, data: &[SyntheticSample], held: &[SyntheticSample]) -> dseq_core::Result<Outcome> {
    let means = epoch_means(&run.log);
    let k = 10.min(means.len());
    let avg = |m: &[(usize, f64)]| m.iter().map(|x| x.1).sum::<f64>() / m.len() as f64;
    let (first, last) = (avg(&means[..k]), avg(&means[means.len() - k..]));

    let (cfg, st) = trainer::checkpoint::load::<f32>(run.dir.join(trainer::FINAL_CHECKPOINT))?;
    let pc = ProbeConfig::default();
    let probe = eval::linear_probe(&st.model, data, held, NUM_CLASSES, &pc)?;
    let init = ModelState::<f32>::new(&cfg)?;
    let probe0 = eval::linear_probe(&init.model, data, held, NUM_CLASSES, &pc)?;
    let (max_hits, min_hits) = saliency_hits(&st.model, &cfg, held)?;
    let (max0, _) = saliency_hits(&init.model, &cfg, held)?;
    let frac = max_hits as f64 / held.len() as f64;

    let a = last < first;
    let b = probe.accuracy >= PROBE_BAR;
    let c = frac >= SALIENCY_BAR;
    let flag = |ok: bool| if ok { "ok" } else { "FAIL" };
    Ok(outcome(
        a && b && c,
        format!(
            "(a) loss first-10 {first:.5} -> last-10 {last:.5} [{}]; (b) probe {:.3} >= {PROBE_BAR} [{}] (untrained backbone {:.3}, chance 0.25); \
             (c) saliency argmax in object {max_hits}/{} = {frac:.2} >= {SALIENCY_BAR} [{}] (untrained {max0}; argmin in object {min_hits})",
            flag(a),
            probe.accuracy,
            flag(b),
            probe0.accuracy,
            held.len(),
            flag(c)
        ),
    ))
}

// 11 ------------------------------------------------------------------------

/// The flat scheme is single-context multi-target prediction: every step
/// sees only R_pi(1), and its outputs equal one predictor call per target
/// on that context.
fn flat_wiring_ok() -> dseq_core::Result<bool> {
    let cfg = VitConfig::desk();
    let model = Jepa::<f32>::new(&cfg, &mut stream(41, &[]))?;
    let s = &make_dataset(1, cfg.image_size, 41)?[0];
    let img = Tensor::new(s.image.clone(), &[3, cfg.image_size, cfg.image_size])?;
    let g = cfg.grid();
    let (targets, taps) = model.target_forward(&img, &[4])?;
    let map = map_from_tokens(&taps[0], g, g, Default::default())?;
    let draw = |scheme| -> dseq_core::Result<(RegionSet, Vec<usize>)> {
        let mut r = stream(42, &[]);
        let set = curriculum_select(&map, 1.0, &RegionParams::default(), &mut r)?;
        let order = region_order(&set, scheme, &mut r);
        Ok((set, order))
    };
    let (set_f, order_f) = draw(OrderScheme::Flat)?;
    let (set_s, order_s) = draw(OrderScheme::Sequential)?;
    let tokens = model.context.patchify(&img)?;
    let flat = predict_steps(&model.context, &model.predictor, &tokens, &targets, &set_f, &order_f, OrderScheme::Flat)?;
    let first = &set_f.regions[order_f[0]];
    let ctx = model.context.encode(&tokens, Visibility::Cells(first))?;
    let mut ok = set_f == set_s && order_f == order_s;
    for (k, st) in flat.iter().enumerate() {
        let direct = model.predictor.predict(&ctx, &set_f.regions[order_f[k + 1]])?;
        ok &= &st.context_cells == first && bits(&direct) == bits(&st.predicted);
    }
    Ok(ok)
}

fn ablation_harness(data: &[SyntheticSample], held: &[SyntheticSample], root: &Path) -> dseq_core::Result<Outcome> {
    let cfg = TrainConfig {
        epochs: ABLATION_EPOCHS,
        ..TrainConfig::default()
    };
    let schemes = OrderScheme::ALL;
    let out = root.join("ablation");
    let rows = eval::order_ablation(&cfg, &schemes, data, data, held, NUM_CLASSES, &ProbeConfig::default(), &out, &mut |_, _| {})?;
    let csv = eval::ablation_csv(&rows);
    fs::write(out.join("ablation.csv"), &csv).map_err(|e| dseq_core::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let complete = rows.len() == schemes.len()
        && rows.iter().zip(&schemes).all(|(r, s)| r.scheme == *s && r.accuracy.is_finite());
    let wiring = flat_wiring_ok()?;
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.scheme.as_str(), r.accuracy)).collect();
    Ok(outcome(
        complete && wiring && csv.lines().count() == schemes.len() + 1,
        format!(
            "{} schemes x {ABLATION_EPOCHS} epochs, seed {}: probe [{}] (reported, not asserted); flat masks and single-context wiring match {wiring}",
            rows.len(),
            cfg.seed,
            table.join(", ")
        ),
    ))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    println!("acceptance suite");
    let mut results = vec![
        run(1, "gradient suite", Box::new(gradient_suite)),
        run(2, "otsu oracle equivalence", Box::new(otsu_equivalence)),
        run(3, "ccl oracle equivalence", Box::new(ccl_equivalence)),
        run(4, "partition invariant", Box::new(partition_invariant)),
        run(5, "curriculum statistics", Box::new(curriculum_statistics)),
        run(6, "causality", Box::new(causality)),
        run(7, "huber values", Box::new(huber_values)),
        run(8, "schedule endpoints", Box::new(schedule_endpoints)),
    ];

    let tmp = tempfile::tempdir().expect("temp dir");
    let cfg = TrainConfig::default();
    let data = make_dataset(trainer::DESK_IMAGES, cfg.model.image_size, DATA_SEED).expect("desk dataset");
    let held = make_dataset(HELD_OUT, cfg.model.image_size, HELD_OUT_SEED).expect("held-out set");
    let mut runs = Vec::new();
    let mut run_err = None;
    for name in ["a", "b"] {
        match desk_run(&cfg, &data, &tmp.path().join(name)) {
            Ok(r) => runs.push(r),
            Err(e) => run_err = Some(e),
        }
    }
    let runs_ok = runs.len() == 2;
    let err_text = run_err.map(|e| e.to_string()).unwrap_or_default();
    results.push(run(
        9,
        "determinism",
        Box::new(|| {
            if runs_ok {
                determinism(&runs)
            } else {
                Err(dseq_core::Error::Aborted(err_text.clone()))
            }
        }),
    ));
    results.push(run(
        10,
        "learning sanity",
        Box::new(|| {
            if runs_ok {
                learning_sanity(&runs[0], &data, &held)
            } else {
                Err(dseq_core::Error::Aborted(err_text.clone()))
            }
        }),
    ));
    results.push(run(11, "ablation harness", Box::new(|| ablation_harness(&data, &held, tmp.path()))));

    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
