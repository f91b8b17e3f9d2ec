use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

const LN_EPS: f64 = 1e-6;
pub(crate) const INIT_STD: f64 = 0.02;

/// Named parameter traversal. Visit order is stable and defines the
/// checkpoint layout.
pub trait Module<F: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>));

    fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Replace every parameter with a frozen copy (no gradient).
    fn freeze(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach());
    }

    /// Replace every parameter with a fresh trainable leaf.
    fn unfreeze(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach().into_param());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, 0.02) truncated at two standard deviations.
pub(crate) fn trunc_normal<F: Float>(rng: &mut Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break F::of(z * INIT_STD);
            }
        })
        .collect();
    Tensor::param(data, shape).expect("shape matches")
}

pub(crate) fn zeros_param<F: Float>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(shape).into_param()
}

#[derive(Clone)]
pub struct Linear<F: Float> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Float> Linear<F> {
    pub fn new(rng: &mut Rng, inp: usize, out: usize) -> Self {
        Self {
            w: trunc_normal(rng, &[inp, out]),
            b: zeros_param(&[out]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.linear(&self.w, &self.b)
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

#[derive(Clone)]
pub struct LayerNorm<F: Float> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

impl<F: Float> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], F::one()).into_param(),
            beta: zeros_param(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(x.rank() - 1, &self.gamma, &self.beta, F::of(LN_EPS))
    }
}

impl<F: Float> Module<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone)]
pub struct Block<F: Float> {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Float> Block<F> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            dim,
            heads,
            norm1: LayerNorm::new(dim),
            qkv: Linear::new(rng, dim, 3 * dim),
            proj: Linear::new(rng, dim, dim),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.dim;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let q = qkv.slice(1, 0, d)?;
        let k = qkv.slice(1, d, d)?;
        let v = qkv.slice(1, 2 * d, d)?;
        let a = Tensor::scaled_dot_attention(&q, &k, &v, self.heads)?;
        let x = x.add(&self.proj.forward(&a)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        x.add(&self.fc2.forward(&h)?)
    }
}

impl<F: Float> Module<F> for Block<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
