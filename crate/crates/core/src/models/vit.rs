use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::layers::{interpolate_time, Conv1d, LayerNorm, Linear};
use super::store::{Init, ParamStore};
use super::ModelConfig;
use crate::error::Result;

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.vit_dim;
        let hidden = cfg.vit_mlp_ratio * d;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, rng)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, rng)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d, rng)?,
            heads: cfg.vit_heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Non-overlapping patch embedding, learned positions and pre-norm
/// transformer blocks. Inputs are zero-padded to a whole number of patches.
pub(super) struct Vit1d {
    patch_embed: Conv1d,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    patch: usize,
}

impl Vit1d {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.vit_dim;
        let patch = cfg.vit_patch;
        let tokens = cfg.vit_ref_len.div_ceil(patch);
        let patch_embed = Conv1d::new(store, "encoder.patch_embed", cfg.in_channels, d, patch, patch, 0, true, rng)?;
        let pos = store.add("encoder.pos_embed", &[1, d, tokens], Init::Normal { std: 0.02 }, rng)?;
        let blocks = (0..cfg.vit_depth)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed,
            pos,
            blocks,
            norm: LayerNorm::new(store, "encoder.norm", d, rng)?,
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let len = x.dim(2)?;
        let padded = len.div_ceil(self.patch) * self.patch;
        let x = if padded > len { x.pad_with_zeros(2, 0, padded - len)? } else { x.clone() };
        let tokens = self.patch_embed.forward(&x)?;
        let t = tokens.dim(2)?;
        let pos = if self.pos.dim(2)? == t { self.pos.clone() } else { interpolate_time(&self.pos, t)? };
        let mut h = tokens.broadcast_add(&pos)?.transpose(1, 2)?.contiguous()?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(self.norm.forward(&h)?.transpose(1, 2)?.contiguous()?)
    }
}
