use super::layers::{join, trunc_normal, Block, LayerNorm, Linear, Module};
use super::{extract_patches, TokenPos, TokenSequence, VitConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Which patch tokens enter the encoder. Dropped tokens never take part in
/// the computation.
#[derive(Debug, Clone, Copy)]
pub enum Visibility<'a> {
    All,
    Cells(&'a [usize]),
}

pub struct EncodeOutput<F: Float> {
    /// Final (normalized) tokens, CLS first.
    pub seq: TokenSequence<F>,
    /// Raw outputs of the requested blocks, in request order.
    pub taps: Vec<Tensor<F>>,
}

/// ViT encoder with an auxiliary class token and learned positional
/// embeddings (row 0 for CLS, row 1 + cell for patches).
#[derive(Clone)]
pub struct Encoder<F: Float> {
    pub cfg: VitConfig,
    pub patch_embed: Linear<F>,
    pub cls_token: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
}

impl<F: Float> Encoder<F> {
    pub fn new(cfg: &VitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(rng, cfg.patch_dim(), d),
            cls_token: trunc_normal(rng, &[1, d]),
            pos_embed: trunc_normal(rng, &[cfg.num_patches() + 1, d]),
            blocks: (0..cfg.depth)
                .map(|_| Block::new(rng, d, cfg.heads, cfg.hidden(d)))
                .collect(),
            norm: LayerNorm::new(d),
        })
    }

    /// Deep copy whose parameters do not require gradients.
    pub fn frozen_copy(&self) -> Self {
        let mut out = self.clone();
        out.freeze();
        out
    }

    /// Embed every patch of a `[C, H, W]` image: CLS first, then the
    /// `h*w` patches in row-major order, positional embeddings added.
    pub fn patchify(&self, image: &Tensor<F>) -> Result<TokenSequence<F>> {
        let c = &self.cfg;
        let want = [c.channels, c.image_size, c.image_size];
        if image.shape() != want {
            return Err(Error::shape("patchify", format!("image {:?}, expected {want:?}", image.shape())));
        }
        let n = c.num_patches();
        let patches = Tensor::new(extract_patches(image.data(), c), &[n, c.patch_dim()])?;
        let tokens = self.patch_embed.forward(&patches)?;
        let tokens = Tensor::concat(&[self.cls_token.clone(), tokens], 0)?.add(&self.pos_embed)?;
        let mut positions = Vec::with_capacity(n + 1);
        positions.push(TokenPos::Cls);
        positions.extend((0..n).map(TokenPos::Cell));
        Ok(TokenSequence {
            tokens,
            positions,
            grid: (c.grid(), c.grid()),
        })
    }

    pub fn encode(&self, seq: &TokenSequence<F>, visible: Visibility<'_>) -> Result<TokenSequence<F>> {
        Ok(self.encode_with_taps(seq, visible, &[])?.seq)
    }

    /// Run the blocks over CLS plus the visible patch tokens. `taps` lists
    /// 1-based block indices whose raw outputs are returned as well.
    pub fn encode_with_taps(
        &self,
        seq: &TokenSequence<F>,
        visible: Visibility<'_>,
        taps: &[usize],
    ) -> Result<EncodeOutput<F>> {
        seq.check()?;
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.blocks.len()) {
            return Err(Error::invalid(format!("block {bad} out of range 1..={}", self.blocks.len())));
        }
        let cls_row = seq
            .positions
            .iter()
            .position(|p| *p == TokenPos::Cls)
            .ok_or_else(|| Error::invalid("token sequence has no CLS token"))?;
        let mut rows = vec![cls_row];
        let mut positions = vec![TokenPos::Cls];
        match visible {
            Visibility::All => {
                for (i, p) in seq.positions.iter().enumerate() {
                    if let TokenPos::Cell(_) = p {
                        rows.push(i);
                        positions.push(*p);
                    }
                }
            }
            Visibility::Cells(cells) => {
                if cells.is_empty() {
                    return Err(Error::invalid("encode: empty visible set"));
                }
                for &c in cells {
                    let i = seq
                        .positions
                        .iter()
                        .position(|p| *p == TokenPos::Cell(c))
                        .ok_or_else(|| Error::invalid(format!("visible cell {c} not in sequence")))?;
                    rows.push(i);
                    positions.push(TokenPos::Cell(c));
                }
            }
        }
        let mut x = seq.tokens.gather_rows(&rows)?;
        let mut tapped = vec![None; taps.len()];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            for (slot, &t) in tapped.iter_mut().zip(taps) {
                if t == i + 1 {
                    *slot = Some(x.clone());
                }
            }
        }
        let out = TokenSequence {
            tokens: self.norm.forward(&x)?,
            positions,
            grid: seq.grid,
        };
        out.check()?;
        Ok(EncodeOutput {
            seq: out,
            taps: tapped.into_iter().map(|t| t.expect("validated")).collect(),
        })
    }
}

impl<F: Float> Module<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &self.cls_token);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &mut self.cls_token);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
