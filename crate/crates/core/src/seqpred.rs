//! Autoregressive next-region prediction and its Huber objective.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::regionsel::RegionSet;
use crate::rng::Rng;
pub use crate::tensor::huber_elem;
use crate::tensor::{no_grad, Float, Tensor};
use crate::vit::{Encoder, Module, Predictor, TokenSequence, Visibility, VitConfig};

/// Order in which regions are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderScheme {
    /// Score order, each step conditioned on all earlier regions.
    #[default]
    Sequential,
    /// Every target predicted from the first region alone.
    Flat,
    /// Uniformly shuffled order.
    Random,
    /// Row-major order of region centres.
    Spatial,
}

impl OrderScheme {
    pub const ALL: [OrderScheme; 4] = [
        OrderScheme::Flat,
        OrderScheme::Random,
        OrderScheme::Spatial,
        OrderScheme::Sequential,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "flat" => Ok(Self::Flat),
            "random" => Ok(Self::Random),
            "spatial" => Ok(Self::Spatial),
            _ => Err(Error::Config(format!(
                "unknown order scheme {s:?} (sequential|flat|random|spatial)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Flat => "flat",
            Self::Random => "random",
            Self::Spatial => "spatial",
        }
    }
}

/// Mean (row, col) of a set of cells on a grid of width `w`.
pub fn center(cells: &[usize], w: usize) -> (f64, f64) {
    let n = cells.len() as f64;
    let r = cells.iter().map(|&c| (c / w) as f64).sum::<f64>() / n;
    let c = cells.iter().map(|&c| (c % w) as f64).sum::<f64>() / n;
    (r, c)
}

/// Visiting order of the regions. Only the first `N - 1` regions are
/// permuted; the residual always comes last.
pub fn region_order(set: &RegionSet, scheme: OrderScheme, rng: &mut Rng) -> Vec<usize> {
    let n = set.len();
    let mut head: Vec<usize> = (0..n - 1).collect();
    match scheme {
        OrderScheme::Sequential | OrderScheme::Flat => {}
        OrderScheme::Random => {
            for i in (1..head.len()).rev() {
                let j = rng.random_range(0..=i);
                head.swap(i, j);
            }
        }
        OrderScheme::Spatial => {
            let centers: Vec<(f64, f64)> = set.regions.iter().map(|r| center(r, set.w)).collect();
            head.sort_by(|&a, &b| {
                let (ca, cb) = (centers[a], centers[b]);
                ca.0.total_cmp(&cb.0).then(ca.1.total_cmp(&cb.1)).then(a.cmp(&b))
            });
        }
    }
    head.push(n - 1);
    head
}

/// One prediction step: region `target_cells` predicted from `context_cells`.
#[derive(Debug, Clone)]
pub struct StepBatch<F: Float> {
    /// 1-based step index k (predicting the (k+1)-th region).
    pub step: usize,
    pub context_cells: Vec<usize>,
    pub target_cells: Vec<usize>,
    pub predicted: Tensor<F>,
    pub target: Tensor<F>,
}

/// Context encoder, EMA target encoder and predictor.
#[derive(Clone)]
pub struct Jepa<F: Float> {
    pub context: Encoder<F>,
    pub target: Encoder<F>,
    pub predictor: Predictor<F>,
}

impl<F: Float> Jepa<F> {
    /// Fresh model; the target encoder starts as a frozen copy of the
    /// context encoder.
    pub fn new(cfg: &VitConfig, rng: &mut Rng) -> Result<Self> {
        let context = Encoder::new(cfg, rng)?;
        let predictor = Predictor::new(cfg, rng)?;
        Ok(Self {
            target: context.frozen_copy(),
            context,
            predictor,
        })
    }

    pub fn cfg(&self) -> &VitConfig {
        &self.context.cfg
    }

    /// Final target-encoder tokens for the full image plus the raw outputs
    /// of the requested blocks, without gradient recording.
    pub fn target_forward(&self, image: &Tensor<F>, taps: &[usize]) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        no_grad(|| {
            let seq = self.target.patchify(image)?;
            let out = self.target.encode_with_taps(&seq, Visibility::All, taps)?;
            Ok((out.seq.tokens, out.taps))
        })
    }
}

impl<F: Float> Module<F> for Jepa<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.context.visit(&crate::vit::join(prefix, "context"), f);
        self.target.visit(&crate::vit::join(prefix, "target"), f);
        self.predictor.visit(&crate::vit::join(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.context.visit_mut(&crate::vit::join(prefix, "context"), f);
        self.target.visit_mut(&crate::vit::join(prefix, "target"), f);
        self.predictor.visit_mut(&crate::vit::join(prefix, "predictor"), f);
    }
}

/// Run the `N - 1` prediction steps over `order` (a permutation of region
/// indices). `targets_full` holds the target encoder's `[1 + h*w, D]`
/// output for the whole image; rows are gathered per target region.
pub fn predict_steps<F: Float>(
    context_encoder: &Encoder<F>,
    predictor: &Predictor<F>,
    image_tokens: &TokenSequence<F>,
    targets_full: &Tensor<F>,
    set: &RegionSet,
    order: &[usize],
    scheme: OrderScheme,
) -> Result<Vec<StepBatch<F>>> {
    set.validate()?;
    let n = set.len();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::invalid(format!("order {order:?} is not a permutation of 0..{n}")));
    }
    if targets_full.rank() != 2 || targets_full.shape()[0] != set.h * set.w + 1 {
        return Err(Error::shape(
            "predict_steps",
            format!("target tokens {:?} for a {}x{} grid", targets_full.shape(), set.h, set.w),
        ));
    }
    let mut steps = Vec::with_capacity(n - 1);
    let mut context_cells: Vec<usize> = set.regions[order[0]].clone();
    let mut encoded = context_encoder.encode(image_tokens, Visibility::Cells(&context_cells))?;
    for k in 1..n {
        let target_cells = set.regions[order[k]].clone();
        let predicted = predictor.predict(&encoded, &target_cells)?;
        let rows: Vec<usize> = target_cells.iter().map(|c| c + 1).collect();
        let target = targets_full.gather_rows(&rows)?.detach();
        steps.push(StepBatch {
            step: k,
            context_cells: context_cells.clone(),
            target_cells: target_cells.clone(),
            predicted,
            target,
        });
        if scheme != OrderScheme::Flat && k + 1 < n {
            context_cells.extend_from_slice(&target_cells);
            encoded = context_encoder.encode(image_tokens, Visibility::Cells(&context_cells))?;
        }
    }
    Ok(steps)
}

/// Patchify with the context encoder, run the target encoder once, and
/// predict every step.
pub fn sequential_predict<F: Float>(
    model: &Jepa<F>,
    image: &Tensor<F>,
    set: &RegionSet,
    order: &[usize],
    scheme: OrderScheme,
) -> Result<Vec<StepBatch<F>>> {
    let (targets, _) = model.target_forward(image, &[])?;
    let tokens = model.context.patchify(image)?;
    predict_steps(&model.context, &model.predictor, &tokens, &targets, set, order, scheme)
}

/// Mean Huber loss of one step over tokens and dimensions.
pub fn step_loss<F: Float>(step: &StepBatch<F>, delta: F) -> Result<Tensor<F>> {
    step.predicted.sub(&step.target)?.huber(delta)?.mean()
}

/// Mean over steps of [`step_loss`].
pub fn dseq_loss<F: Float>(steps: &[StepBatch<F>], delta: F) -> Result<Tensor<F>> {
    if steps.is_empty() {
        return Err(Error::invalid("dseq_loss: no steps"));
    }
    let mut total = step_loss(&steps[0], delta)?;
    for s in &steps[1..] {
        total = total.add(&step_loss(s, delta)?)?;
    }
    total.scale(F::of(1.0 / steps.len() as f64))
}

/// Finite-difference check of the full one-step objective: a tiny 64-bit
/// model, regions selected from its own target saliency, gradients of
/// every context-encoder and predictor tensor (`max_per_input` elements
/// each). Returns the worst report over `instances` seeds.
pub fn dseq_grad_check(
    instances: usize,
    scheme: OrderScheme,
    opts: &crate::tensor::gradcheck::GradCheckOptions,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::regionsel::{curriculum_select, RegionParams};
    use crate::rng::{stream, tag};
    use crate::saliency::{map_from_tokens, Similarity};
    use crate::tensor::gradcheck::grad_check;

    let cfg = VitConfig::tiny();
    let g = cfg.grid();
    let params = RegionParams {
        min_patches: 1,
        ..RegionParams::default()
    };
    let mut worst: Option<crate::tensor::gradcheck::GradCheckReport> = None;
    for inst in 0..instances {
        let seed = opts.seed.wrapping_add(inst as u64);
        let mut r = stream(seed, &[tag::INIT]);
        let model = Jepa::<f64>::new(&cfg, &mut r)?;
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        let image = Tensor::new((0..n).map(|_| r.random_range(0.0..1.0)).collect(), &[cfg.channels, cfg.image_size, cfg.image_size])?;
        let (_, taps) = model.target_forward(&image, &[1])?;
        let map = map_from_tokens(&taps[0], g, g, Similarity::Cosine)?;
        let mut rr = stream(seed, &[tag::REGIONS]);
        let set = curriculum_select(&map, 0.5, &params, &mut rr)?;
        let order = region_order(&set, scheme, &mut rr);

        let mut inputs = Vec::new();
        model.context.visit("context", &mut |_, t| {
            if t.requires_grad() {
                inputs.push((t.to_f64(), t.shape().to_vec()));
            }
        });
        model.predictor.visit("predictor", &mut |_, t| {
            if t.requires_grad() {
                inputs.push((t.to_f64(), t.shape().to_vec()));
            }
        });
        let f = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let mut m = model.clone();
            let mut i = 0;
            let mut assign = |_: String, t: &mut Tensor<f64>| {
                if t.requires_grad() {
                    *t = xs[i].clone();
                    i += 1;
                }
            };
            m.context.visit_mut("context", &mut assign);
            m.predictor.visit_mut("predictor", &mut assign);
            let steps = sequential_predict(&m, &image, &set, &order, scheme)?;
            dseq_loss(&steps, 1.0)
        };
        let rep = grad_check(f, &inputs, opts)?;
        if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
            worst = Some(rep);
        }
    }
    worst.ok_or_else(|| Error::invalid("dseq_grad_check: zero instances"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regionsel::Origin;
    use crate::rng;

    fn toy_set() -> RegionSet {
        // 4x4 grid: rows 0, 1, 2 and 3 as regions, residual = row 3.
        let regions: Vec<Vec<usize>> = (0..4).map(|r| (r * 4..r * 4 + 4).collect()).collect();
        RegionSet {
            h: 4,
            w: 4,
            regions,
            scores: vec![0.9, 0.5, 0.7],
            origins: vec![Origin::Discriminative, Origin::Random, Origin::Random, Origin::Residual],
            tau: None,
            lambda: 0.0,
            fallback: false,
        }
    }

    fn toy_image(seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        Tensor::new((0..3 * 16 * 16).map(|_| r.random_range(0.0..1.0)).collect(), &[3, 16, 16]).unwrap()
    }

    #[test]
    fn scheme_names_roundtrip() {
        for s in OrderScheme::ALL {
            assert_eq!(OrderScheme::parse(s.as_str()).unwrap(), s);
        }
        assert!(OrderScheme::parse("zigzag").is_err());
    }

    #[test]
    fn step_count_and_context_growth() {
        let model = Jepa::<f64>::new(&VitConfig::tiny(), &mut rng::stream(1, &[])).unwrap();
        let set = toy_set();
        let steps = sequential_predict(&model, &toy_image(2), &set, &[0, 1, 2, 3], OrderScheme::Sequential).unwrap();
        assert_eq!(steps.len(), 3);
        let sizes: Vec<usize> = steps.iter().map(|s| s.context_cells.len()).collect();
        assert_eq!(sizes, vec![4, 8, 12]);
        for s in &steps {
            assert_eq!(s.predicted.shape(), s.target.shape());
            assert!(!s.target.has_node());
        }
    }

    #[test]
    fn flat_matches_sequential_at_first_step_only() {
        let model = Jepa::<f64>::new(&VitConfig::tiny(), &mut rng::stream(1, &[])).unwrap();
        let set = toy_set();
        let img = toy_image(3);
        let order = [0, 1, 2, 3];
        let a = sequential_predict(&model, &img, &set, &order, OrderScheme::Sequential).unwrap();
        let b = sequential_predict(&model, &img, &set, &order, OrderScheme::Flat).unwrap();
        assert_eq!(a[0].predicted.to_f64(), b[0].predicted.to_f64());
        assert_ne!(a[1].predicted.to_f64(), b[1].predicted.to_f64());
        assert_eq!(b[2].context_cells, set.regions[0]);
    }

    #[test]
    fn spatial_order_sorts_centres() {
        let mut set = toy_set();
        set.regions.swap(0, 2);
        let order = region_order(&set, OrderScheme::Spatial, &mut rng::stream(0, &[]));
        assert_eq!(order, vec![2, 1, 0, 3]);
        let order = region_order(&set, OrderScheme::Sequential, &mut rng::stream(0, &[]));
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_order_keeps_residual_last() {
        let set = toy_set();
        let mut r = rng::stream(0, &[]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..60 {
            let o = region_order(&set, OrderScheme::Random, &mut r);
            assert_eq!(o[3], 3);
            seen.insert(o);
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn loss_examples() {
        let mk = |p: Vec<f64>, t: Vec<f64>, shape: &[usize]| StepBatch {
            step: 1,
            context_cells: vec![],
            target_cells: vec![],
            predicted: Tensor::new(p, shape).unwrap(),
            target: Tensor::new(t, shape).unwrap(),
        };
        let s = mk(vec![0.5, 2.0], vec![0.0, 0.0], &[1, 2]);
        assert_eq!(dseq_loss(&[s], 1.0).unwrap().item(), 0.8125);
        let z = mk(vec![0.3, -1.0, 4.0, 2.0], vec![0.3, -1.0, 4.0, 2.0], &[2, 2]);
        assert_eq!(dseq_loss(&[z], 1.0).unwrap().item(), 0.0);
        assert!(dseq_loss::<f64>(&[], 1.0).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut r = rng::stream(11, &[]);
        let steps: Vec<StepBatch<f64>> = (0..4)
            .map(|k| {
                let rows = 1 + k;
                let p: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-3.0..3.0)).collect();
                let t: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-3.0..3.0)).collect();
                StepBatch {
                    step: k + 1,
                    context_cells: vec![],
                    target_cells: vec![],
                    predicted: Tensor::new(p, &[rows, 3]).unwrap(),
                    target: Tensor::new(t, &[rows, 3]).unwrap(),
                }
            })
            .collect();
        let mut oracle = 0.0;
        for s in &steps {
            let (p, t) = (s.predicted.to_f64(), s.target.to_f64());
            let mut acc = 0.0;
            for i in 0..p.len() {
                acc += huber_elem(p[i] - t[i], 1.0);
            }
            oracle += acc / p.len() as f64;
        }
        oracle /= steps.len() as f64;
        assert!((dseq_loss(&steps, 1.0).unwrap().item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn target_encoder_gets_no_gradient() {
        let model = Jepa::<f64>::new(&VitConfig::tiny(), &mut rng::stream(1, &[])).unwrap();
        let steps = sequential_predict(&model, &toy_image(4), &toy_set(), &[0, 1, 2, 3], OrderScheme::Sequential).unwrap();
        dseq_loss(&steps, 1.0).unwrap().backward().unwrap();
        for (_, p) in model.target.named_params() {
            assert!(p.grad_vec().is_none());
            assert!(!p.requires_grad());
        }
        let with_grad = model
            .context
            .named_params()
            .iter()
            .chain(model.predictor.named_params().iter())
            .filter(|(_, p)| p.grad_vec().is_some_and(|g| g.iter().any(|v| *v != 0.0)))
            .count();
        assert!(with_grad > 0);
    }
}
