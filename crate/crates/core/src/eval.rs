//! Evaluation: linear probe on frozen target features, patch k-means,
//! per-step prediction difficulty and the order-scheme ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::RngExt;

use crate::datagen::SyntheticSample;
use crate::error::{Error, Result};
use crate::regionsel::curriculum_select;
use crate::rng::{self, tag, Rng};
use crate::saliency::map_from_tokens;
use crate::seqpred::{predict_steps, region_order, step_loss, Jepa, OrderScheme};
use crate::tensor::{no_grad, Float, Tensor};
use crate::trainer::{self, image_tensors, ModelState, TrainConfig};

/// Region streams for evaluation use this epoch slot, outside any
/// training epoch.
const EVAL_EPOCH: u64 = u64::MAX;

/// Blocks whose pooled outputs form the probe features: the last four
/// (or all of them in shallower models).
pub fn feature_blocks(depth: usize) -> Vec<usize> {
    (depth.saturating_sub(3).max(1)..=depth).collect()
}

/// Concatenated mean-pooled patch tokens of the last blocks of the target
/// encoder.
pub fn features<F: Float>(model: &Jepa<F>, image: &Tensor<F>) -> Result<Vec<f64>> {
    let blocks = feature_blocks(model.cfg().depth);
    let (_, taps) = model.target_forward(image, &blocks)?;
    let mut out = Vec::new();
    for t in &taps {
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let data = t.to_f64();
        let mut mean = vec![0.0; d];
        for r in 1..rows {
            for (m, v) in mean.iter_mut().zip(&data[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        out.extend(mean.into_iter().map(|m| m / (rows - 1) as f64));
    }
    Ok(out)
}

pub fn dataset_features<F: Float>(model: &Jepa<F>, samples: &[SyntheticSample]) -> Result<Vec<Vec<f64>>> {
    image_tensors::<F>(samples)?
        .iter()
        .map(|img| features(model, img))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            milestones: vec![10, 20],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub epochs: usize,
    /// Hash of the pre-training config that produced the features (empty
    /// for raw feature probes).
    pub config_hash: String,
}

/// Per-dimension mean and standard deviation of `x` (std floored at 1e-8).
pub fn fit_standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for row in x {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, std.into_iter().map(|s| s.sqrt().max(1e-8)).collect())
}

fn standardize(x: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| row.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect())
        .collect()
}

/// Softmax linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `[classes, dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.b[c] + self.w[c * self.dim..(c + 1) * self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Highest logit, lowest class on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for c in 1..l.len() {
            if l[c] > l[best] {
                best = c;
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_labels(y: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("{what} label {bad} >= {classes} classes")));
    }
    Ok(())
}

/// Train a softmax head with Nesterov SGD on standardized `train_x` and
/// report accuracy on `test_x`.
pub fn probe_features(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    pc: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::invalid("probe: features and labels differ in length"));
    }
    if test_x.is_empty() {
        return Err(Error::invalid("probe: empty test set"));
    }
    check_labels(train_y, classes, "train")?;
    check_labels(test_y, classes, "test")?;
    for c in 0..classes {
        if !train_y.contains(&c) {
            return Err(Error::invalid(format!("probe: class {c} absent from the training set")));
        }
    }
    let dim = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != dim) {
        return Err(Error::invalid("probe: ragged feature rows"));
    }
    if pc.batch_size == 0 {
        return Err(Error::invalid("probe: batch_size must be positive"));
    }
    let (mean, std) = fit_standardizer(train_x);
    let xs = standardize(train_x, &mean, &std);
    let xt = standardize(test_x, &mean, &std);

    let mut head = LinearHead::zeros(classes, dim);
    let mut buf_w = vec![0.0; head.w.len()];
    let mut buf_b = vec![0.0; classes];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..pc.epochs {
        let lr = pc.lr_at(epoch);
        let mut r = rng::stream(pc.seed, &[tag::PROBE, epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        for batch in order.chunks(pc.batch_size) {
            let mut gw = vec![0.0; head.w.len()];
            let mut gb = vec![0.0; classes];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = softmax(&head.logits(&xs[i]));
                for c in 0..classes {
                    let d = (p[c] - if c == train_y[i] { 1.0 } else { 0.0 }) * scale;
                    gb[c] += d;
                    for (g, v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(&xs[i]) {
                        *g += d * v;
                    }
                }
            }
            let params = head.w.iter_mut().zip(gw).zip(buf_w.iter_mut());
            let params = params.chain(head.b.iter_mut().zip(gb).zip(buf_b.iter_mut()));
            for ((p, g), buf) in params {
                let g = g + pc.weight_decay * *p;
                *buf = pc.momentum * *buf + g;
                *p -= lr * (g + pc.momentum * *buf);
            }
        }
    }

    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (x, &y) in xt.iter().zip(test_y) {
        count[y] += 1;
        if head.predict(x) == y {
            hit[y] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(ProbeResult {
        accuracy: correct as f64 / test_y.len() as f64,
        per_class: hit
            .iter()
            .zip(&count)
            .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
            .collect(),
        epochs: pc.epochs,
        config_hash: String::new(),
    })
}

/// Probe the target encoder of `model`. The backbone is only read.
pub fn linear_probe<F: Float>(
    model: &Jepa<F>,
    train: &[SyntheticSample],
    test: &[SyntheticSample],
    classes: usize,
    pc: &ProbeConfig,
) -> Result<ProbeResult> {
    let fx = dataset_features(model, train)?;
    let tx = dataset_features(model, test)?;
    let fy: Vec<usize> = train.iter().map(|s| s.label).collect();
    let ty: Vec<usize> = test.iter().map(|s| s.label).collect();
    probe_features(&fx, &fy, &tx, &ty, classes, pc)
}

pub fn probe_csv(r: &ProbeResult) -> String {
    let mut s = String::from("class,accuracy\n");
    for (c, a) in r.per_class.iter().enumerate() {
        writeln!(s, "{c},{a}").expect("string write");
    }
    writeln!(s, "all,{}", r.accuracy).expect("string write");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster id per point.
    pub assign: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment pass.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the largest centre
/// shift is at most `tol` or `max_iter` passes ran.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, tol: f64, rng: &mut Rng) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::invalid(format!("k-means needs k >= 2, got {k}")));
    }
    if k > points.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} points", points.len())));
    }
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut assign = vec![0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (a, p) in assign.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centers);
            *a = j;
            inertia += d;
        }
        history.push(inertia);
        if iterations == max_iter {
            break;
        }
        iterations += 1;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(dist2(&c, &centers[j]).sqrt());
            centers[j] = c;
        }
        if shift <= tol {
            let mut inertia = 0.0;
            for (a, p) in assign.iter_mut().zip(points) {
                let (j, d) = nearest(p, &centers);
                *a = j;
                inertia += d;
            }
            history.push(inertia);
            break;
        }
    }
    Ok(KMeans {
        inertia: *history.last().expect("at least one pass"),
        assign,
        centers,
        history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchClusters {
    pub h: usize,
    pub w: usize,
    /// Row-major cluster id per patch.
    pub ids: Vec<usize>,
    pub inertia: f64,
    pub history: Vec<f64>,
}

/// k-means over the final target-encoder patch embeddings of one image.
pub fn patch_clusters<F: Float>(model: &Jepa<F>, image: &Tensor<F>, k: usize, seed: u64) -> Result<PatchClusters> {
    let (tokens, _) = model.target_forward(image, &[])?;
    let d = tokens.shape()[1];
    let data = tokens.to_f64();
    let points: Vec<Vec<f64>> = (1..tokens.shape()[0]).map(|r| data[r * d..(r + 1) * d].to_vec()).collect();
    let mut r = rng::stream(seed, &[tag::CLUSTER]);
    let km = kmeans(&points, k, 100, 1e-6, &mut r)?;
    let g = model.cfg().grid();
    Ok(PatchClusters {
        h: g,
        w: g,
        ids: km.assign,
        inertia: km.inertia,
        history: km.history,
    })
}

/// Per-image step losses with regions drawn from the target saliency map
/// at full curriculum (discriminative selection whenever possible).
pub fn image_step_losses<F: Float>(
    model: &Jepa<F>,
    cfg: &TrainConfig,
    image: &Tensor<F>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    no_grad(|| {
        let (targets, taps) = model.target_forward(image, &[cfg.layer()])?;
        let g = cfg.model.grid();
        let map = map_from_tokens(&taps[0], g, g, cfg.similarity)?;
        let set = curriculum_select(&map, 1.0, &cfg.regions, rng)?;
        let order = region_order(&set, cfg.order, rng);
        let tokens = model.context.patchify(image)?;
        let steps = predict_steps(&model.context, &model.predictor, &tokens, &targets, &set, &order, cfg.order)?;
        steps
            .iter()
            .map(|s| Ok(step_loss(s, F::of(cfg.huber_delta))?.item().to_f64().unwrap_or(f64::NAN)))
            .collect()
    })
}

/// Mean step loss grouped by step index `k` (1-based, predicting region
/// `k + 1`).
pub fn per_step_losses<F: Float>(model: &Jepa<F>, cfg: &TrainConfig, samples: &[SyntheticSample]) -> Result<Vec<(usize, f64)>> {
    let images = image_tensors::<F>(samples)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &[tag::REGIONS, EVAL_EPOCH, i as u64]);
        rows.push(image_step_losses(model, cfg, img, &mut r)?);
    }
    Ok(step_means(&rows))
}

pub fn step_means(rows: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let steps = rows.iter().map(Vec::len).max().unwrap_or(0);
    (0..steps)
        .map(|k| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(k).copied()).collect();
            (k + 1, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

pub fn steps_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("step,region,mean_loss\n");
    for (k, m) in rows {
        writeln!(s, "{k},{},{m}", k + 1).expect("string write");
    }
    s
}

/// Early (first two steps) versus late (remaining steps) mean difficulty.
pub fn difficulty_trend(rows: &[(usize, f64)]) -> Option<(f64, f64)> {
    if rows.len() < 3 {
        return None;
    }
    let mean = |r: &[(usize, f64)]| r.iter().map(|x| x.1).sum::<f64>() / r.len() as f64;
    Some((mean(&rows[..2]), mean(&rows[2..])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub scheme: OrderScheme,
    pub accuracy: f64,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub config_hash: String,
}

/// Pre-train one model per scheme from the same config and seed, then
/// probe each. Runs land in `out_dir/<scheme>`.
#[allow(clippy::too_many_arguments)]
pub fn order_ablation(
    base: &TrainConfig,
    schemes: &[OrderScheme],
    pretrain: &[SyntheticSample],
    probe_train: &[SyntheticSample],
    probe_test: &[SyntheticSample],
    classes: usize,
    pc: &ProbeConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(OrderScheme, &trainer::LogRow),
) -> Result<Vec<AblationRow>> {
    if schemes.is_empty() {
        return Err(Error::invalid("ablation: no schemes requested"));
    }
    let mut rows = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let cfg = TrainConfig {
            order: scheme,
            ..base.clone()
        };
        let dir = out_dir.join(scheme.as_str());
        let summary = trainer::train::<f32>(&cfg, pretrain, &dir, None, &mut |r| progress(scheme, r))?;
        let (_, state): (_, ModelState<f32>) = trainer::checkpoint::load(&summary.final_checkpoint)?;
        let mut result = linear_probe(&state.model, probe_train, probe_test, classes, pc)?;
        result.config_hash = cfg.hash();
        fs::write(dir.join("probe.csv"), probe_csv(&result)).map_err(|e| Error::io(&dir, e))?;
        let means = trainer::epoch_means(&summary.log);
        rows.push(AblationRow {
            scheme,
            accuracy: result.accuracy,
            first_epoch_loss: means.first().map_or(f64::NAN, |m| m.1),
            last_epoch_loss: means.last().map_or(f64::NAN, |m| m.1),
            config_hash: result.config_hash,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("scheme,probe_accuracy,first_epoch_loss,last_epoch_loss,config_hash\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.scheme.as_str(),
            r.accuracy,
            r.first_epoch_loss,
            r.last_epoch_loss,
            r.config_hash
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_dataset;
    use crate::vit::VitConfig;

    #[test]
    fn one_hot_features_are_separable() {
        let y: Vec<usize> = (0..64).map(|i| i % 4).collect();
        let x: Vec<Vec<f64>> = y.iter().map(|&l| (0..4).map(|c| f64::from(u8::from(c == l))).collect()).collect();
        let r = probe_features(&x, &y, &x, &y, 4, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class, vec![1.0; 4]);
    }

    #[test]
    fn missing_class_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        let err = probe_features(&x, &[0, 0], &x, &[0, 1], 2, &ProbeConfig::default()).unwrap_err();
        assert!(err.to_string().contains("class 1 absent"));
    }

    #[test]
    fn probe_lr_steps() {
        let pc = ProbeConfig::default();
        assert_eq!(pc.lr_at(0), 0.01);
        assert_eq!(pc.lr_at(9), 0.01);
        assert!((pc.lr_at(10) - 1e-3).abs() < 1e-18);
        assert!((pc.lr_at(29) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn kmeans_singletons_and_duplicates() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans(&pts, 6, 100, 1e-6, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut pts2 = pts.clone();
        pts2.push(pts[2].clone());
        pts2.push(pts[2].clone());
        let km = kmeans(&pts2, 3, 100, 1e-6, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(km.assign[2], km.assign[6]);
        assert_eq!(km.assign[6], km.assign[7]);
        assert!(kmeans(&pts, 7, 100, 1e-6, &mut rng::stream(0, &[])).is_err());
        assert!(kmeans(&pts, 1, 100, 1e-6, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn step_means_group_by_index() {
        let m = step_means(&[vec![1.0, 2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0, 6.0]]);
        assert_eq!(m, vec![(1, 2.0), (2, 3.0), (3, 4.0), (4, 5.0)]);
        assert_eq!(difficulty_trend(&m), Some((2.5, 4.5)));
    }

    #[test]
    fn step_losses_one_row_per_step() {
        let cfg = TrainConfig {
            model: VitConfig::tiny(),
            saliency_layer: 1,
            regions: crate::regionsel::RegionParams {
                min_patches: 1,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let st = ModelState::<f64>::new(&cfg).unwrap();
        let data = make_dataset(1, cfg.model.image_size, 3).unwrap();
        let rows = per_step_losses(&st.model, &cfg, &data).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(rows.iter().all(|r| r.1.is_finite() && r.1 >= 0.0));
    }
}
