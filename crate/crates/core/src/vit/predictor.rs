use std::collections::HashSet;

use super::layers::{join, trunc_normal, Block, LayerNorm, Linear, Module};
use super::{TokenPos, TokenSequence, VitConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Narrow ViT mapping context tokens plus positional mask tokens to
/// predicted embeddings at the masked positions.
#[derive(Clone)]
pub struct Predictor<F: Float> {
    pub cfg: VitConfig,
    pub embed: Linear<F>,
    pub mask_token: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
    pub proj: Linear<F>,
}

impl<F: Float> Predictor<F> {
    pub fn new(cfg: &VitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dp) = (cfg.dim, cfg.predictor_dim);
        Ok(Self {
            cfg: cfg.clone(),
            embed: Linear::new(rng, d, dp),
            mask_token: trunc_normal(rng, &[1, dp]),
            pos_embed: trunc_normal(rng, &[cfg.num_patches() + 1, dp]),
            blocks: (0..cfg.predictor_depth)
                .map(|_| Block::new(rng, dp, cfg.heads, cfg.hidden(dp)))
                .collect(),
            norm: LayerNorm::new(dp),
            proj: Linear::new(rng, dp, d),
        })
    }

    /// Predict `[targets.len(), D]` embeddings, one row per target cell in
    /// the given order.
    pub fn predict(&self, context: &TokenSequence<F>, targets: &[usize]) -> Result<Tensor<F>> {
        context.check()?;
        if context.is_empty() {
            return Err(Error::invalid("predict: empty context"));
        }
        if targets.is_empty() {
            return Err(Error::invalid("predict: empty target set"));
        }
        let n = self.cfg.num_patches();
        let ctx: HashSet<usize> = context.cells().into_iter().collect();
        let mut seen = HashSet::with_capacity(targets.len());
        for &t in targets {
            if t >= n {
                return Err(Error::invalid(format!("target cell {t} outside grid of {n}")));
            }
            if !seen.insert(t) {
                return Err(Error::invalid(format!("duplicate target cell {t}")));
            }
            if ctx.contains(&t) {
                return Err(Error::invalid(format!("target cell {t} is also in the context")));
            }
        }

        let ctx_rows: Vec<usize> = context.positions.iter().map(|p| p.table_row()).collect();
        let x = self
            .embed
            .forward(&context.tokens)?
            .add(&self.pos_embed.gather_rows(&ctx_rows)?)?;
        let tgt_rows: Vec<usize> = targets.iter().map(|&c| TokenPos::Cell(c).table_row()).collect();
        let m = self
            .mask_token
            .gather_rows(&vec![0; targets.len()])?
            .add(&self.pos_embed.gather_rows(&tgt_rows)?)?;

        let mut h = Tensor::concat(&[x, m], 0)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let h = self.norm.forward(&h)?.slice(0, context.len(), targets.len())?;
        self.proj.forward(&h)
    }
}

impl<F: Float> Module<F> for Predictor<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(join(prefix, "mask_token"), &self.mask_token);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(join(prefix, "mask_token"), &mut self.mask_token);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
