use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::{max_pool2, BatchNorm1d, Conv1d, Ctx};
use super::store::ParamStore;
use super::ModelConfig;
use crate::error::Result;

struct BasicBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    shortcut: Option<(Conv1d, BatchNorm1d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv1d::new(store, &format!("{name}.down.conv"), c_in, c_out, 1, stride, 0, false, rng)?,
                BatchNorm1d::new(store, &format!("{name}.down.bn"), c_out, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng)?,
            bn1: BatchNorm1d::new(store, &format!("{name}.bn1"), c_out, rng)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng)?,
            bn2: BatchNorm1d::new(store, &format!("{name}.bn2"), c_out, rng)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, ctx)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, ctx)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, ctx)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Stem (7-wide conv, stride 2) and stride-2 pooling, then stages of basic
/// blocks; every stage after the first halves the frame rate.
pub(super) struct ResNet1d {
    stem: Conv1d,
    stem_bn: BatchNorm1d,
    blocks: Vec<BasicBlock>,
}

impl ResNet1d {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let stem_w = cfg.resnet_stem_width;
        let stem = Conv1d::new(store, "encoder.stem.conv", cfg.in_channels, stem_w, 7, 2, 3, false, rng)?;
        let stem_bn = BatchNorm1d::new(store, "encoder.stem.bn", stem_w, rng)?;
        let mut blocks = Vec::new();
        let mut c_in = stem_w;
        for (stage, (&w, &n)) in cfg.resnet_widths.iter().zip(&cfg.resnet_blocks).enumerate() {
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("encoder.layer{}.{b}", stage + 1), c_in, w, stride, rng)?);
                c_in = w;
            }
        }
        Ok(Self { stem, stem_bn, blocks })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = self.stem_bn.forward(&self.stem.forward(x)?, ctx)?.relu()?;
        h = max_pool2(&h)?;
        for block in &self.blocks {
            h = block.forward(&h, ctx)?;
        }
        Ok(h)
    }
}
