//! 1D segmentation networks: a ResNet-18 or ViT-Tiny encoder, a two-layer
//! convolutional decoder producing per-sample logits, and the projection
//! head used for pixel-level contrast.

mod layers;
mod resnet;
mod store;
mod vit;

use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Segmenter;

pub use layers::{
    conv1d, dropout, interpolate_time, interpolation_matrix, max_pool2, BatchNorm1d, Conv1d, Ctx, LayerNorm, Linear, Mode,
    BN_MOMENTUM,
};
pub use store::{read_checkpoint, save_checkpoint, Init, LoadedCheckpoint, ParamStore, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[serde(rename = "resnet18_1d")]
    Resnet18_1d,
    #[serde(rename = "vit_tiny_1d")]
    VitTiny1d,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Resnet18_1d => "resnet18_1d",
            Backbone::VitTiny1d => "vit_tiny_1d",
        }
    }

    pub const ALL: [Backbone; 2] = [Backbone::Resnet18_1d, Backbone::VitTiny1d];
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}` (expected resnet18_1d or vit_tiny_1d)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub num_classes: usize,
    pub in_channels: usize,
    pub decoder_hidden: usize,
    pub dropout_p: f64,
    pub resnet_stem_width: usize,
    pub resnet_widths: Vec<usize>,
    pub resnet_blocks: Vec<usize>,
    pub vit_patch: usize,
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    /// Input length the positional table is sized for; other lengths interpolate it.
    pub vit_ref_len: usize,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Resnet18_1d,
            num_classes: 4,
            in_channels: 1,
            decoder_hidden: 128,
            dropout_p: 0.1,
            resnet_stem_width: 64,
            resnet_widths: vec![64, 128, 256, 512],
            resnet_blocks: vec![2, 2, 2, 2],
            vit_patch: 20,
            vit_dim: 192,
            vit_depth: 12,
            vit_heads: 3,
            vit_mlp_ratio: 4,
            vit_ref_len: 2500,
            projection_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone,
            ..Self::default()
        }
    }

    /// Small variant for tests and desk-scale runs: two blocks of width `dim`.
    pub fn tiny(backbone: Backbone, dim: usize) -> Self {
        Self {
            backbone,
            decoder_hidden: 16,
            resnet_stem_width: dim,
            resnet_widths: vec![dim, dim],
            resnet_blocks: vec![1, 1],
            vit_patch: 4,
            vit_dim: dim,
            vit_depth: 2,
            vit_heads: 2,
            vit_ref_len: 64,
            projection_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.in_channels == 0 || self.decoder_hidden == 0 {
            return err("num_classes >= 2, in_channels > 0 and decoder_hidden > 0 are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p = {} must lie in [0, 1)", self.dropout_p));
        }
        match self.backbone {
            Backbone::Resnet18_1d => {
                if self.resnet_widths.is_empty() || self.resnet_widths.len() != self.resnet_blocks.len() {
                    return err("resnet_widths and resnet_blocks must be non-empty and equally long".into());
                }
                if self.resnet_blocks.contains(&0) || self.resnet_widths.contains(&0) {
                    return err("resnet stages need at least one block of non-zero width".into());
                }
            }
            Backbone::VitTiny1d => {
                if self.vit_patch == 0 || self.vit_depth == 0 || self.vit_heads == 0 {
                    return err("vit_patch, vit_depth and vit_heads must be positive".into());
                }
                if !self.vit_dim.is_multiple_of(self.vit_heads) {
                    return err(format!("vit_dim {} is not divisible by vit_heads {}", self.vit_dim, self.vit_heads));
                }
            }
        }
        Ok(())
    }

    /// Input samples per output frame.
    pub fn stride(&self) -> usize {
        match self.backbone {
            Backbone::Resnet18_1d => 4 << (self.resnet_widths.len().saturating_sub(1)),
            Backbone::VitTiny1d => self.vit_patch,
        }
    }

    /// Channel count D of the encoder output.
    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            Backbone::Resnet18_1d => *self.resnet_widths.last().unwrap_or(&0),
            Backbone::VitTiny1d => self.vit_dim,
        }
    }

    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.stride())
    }
}

/// Encoder output: (B, D, F) features plus the input samples per frame.
pub struct FeatureMap {
    pub features: Tensor,
    pub stride: usize,
}

enum Encoder {
    Resnet(resnet::ResNet1d),
    Vit(vit::Vit1d),
}

struct Decoder {
    conv1: Conv1d,
    conv2: Conv1d,
    dropout_p: f64,
}

struct Projector {
    conv1: Conv1d,
    conv2: Conv1d,
}

pub struct SegModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    projector: Option<Projector>,
}

/// Per-sample logits, the per-frame logits they were interpolated from and
/// the encoder features.
pub struct Output {
    pub logits: Tensor,
    pub frame_logits: Tensor,
    pub features: Tensor,
}

impl SegModel {
    /// Builds a model with seeded initialization. `with_projection` adds the
    /// contrastive projection head.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, with_projection: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let encoder = match config.backbone {
            Backbone::Resnet18_1d => Encoder::Resnet(resnet::ResNet1d::new(&mut store, config, &mut rng)?),
            Backbone::VitTiny1d => Encoder::Vit(vit::Vit1d::new(&mut store, config, &mut rng)?),
        };
        let d = config.feature_dim();
        let h = config.decoder_hidden;
        let decoder = Decoder {
            conv1: Conv1d::new(&mut store, "decoder.conv1", d, h, 3, 1, 1, true, &mut rng)?,
            conv2: Conv1d::new(&mut store, "decoder.classifier", h, config.num_classes, 1, 1, 0, true, &mut rng)?
                .zero_bias(&mut store, "decoder.classifier")?,
            dropout_p: config.dropout_p,
        };
        let projector = if with_projection {
            let p = config.projection_dim;
            Some(Projector {
                conv1: Conv1d::new(&mut store, "projector.conv1", d, p, 1, 1, 0, true, &mut rng)?,
                conv2: Conv1d::new(&mut store, "projector.conv2", p, p, 1, 1, 0, true, &mut rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            projector,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn has_projection(&self) -> bool {
        self.projector.is_some()
    }

    /// Trainable parameters of encoder and decoder (projection head excluded).
    pub fn num_params(&self) -> usize {
        self.store.num_params_with_prefix("encoder.") + self.store.num_params_with_prefix("decoder.")
    }

    /// (B, L) signals as a (B, 1, L) tensor in the model dtype.
    pub fn input(&self, signals: &[&[f32]]) -> Result<Tensor> {
        let len = signals.first().map(|s| s.len()).unwrap_or(0);
        if signals.iter().any(|s| s.len() != len) {
            return Err(Error::Validation("all signals in a batch must share one length".into()));
        }
        let flat: Vec<f32> = signals.iter().flat_map(|s| s.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (signals.len(), 1, len), self.store.device())?.to_dtype(self.dtype())?)
    }

    pub fn encode(&self, x: &Tensor, ctx: &Ctx) -> Result<FeatureMap> {
        let len = x.dim(2)?;
        let stride = self.config.stride();
        if len < stride {
            return Err(Error::Validation(format!(
                "input of {len} samples is shorter than the encoder stride {stride}"
            )));
        }
        let features = match &self.encoder {
            Encoder::Resnet(r) => r.forward(x, ctx)?,
            Encoder::Vit(v) => v.forward(x)?,
        };
        Ok(FeatureMap { features, stride })
    }

    /// (B, C, F) logits at frame resolution.
    pub fn decode_frames(&self, f: &FeatureMap, ctx: &Ctx) -> Result<Tensor> {
        let h = self.decoder.conv1.forward(&f.features)?.relu()?;
        let h = dropout(&h, self.decoder.dropout_p, ctx)?;
        self.decoder.conv2.forward(&h)
    }

    pub fn decode(&self, f: &FeatureMap, len: usize, ctx: &Ctx) -> Result<Tensor> {
        interpolate_time(&self.decode_frames(f, ctx)?, len)
    }

    /// (B, P, F) unit-norm embeddings per frame.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let p = self
            .projector
            .as_ref()
            .ok_or_else(|| Error::Validation("model was built without a projection head".into()))?;
        let h = p.conv1.forward(features)?.relu()?;
        let z = p.conv2.forward(&h)?;
        let norm = z.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-12)?.sqrt()?;
        Ok(z.broadcast_div(&norm)?)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Output> {
        let f = self.encode(x, ctx)?;
        let frame_logits = self.decode_frames(&f, ctx)?;
        Ok(Output {
            logits: interpolate_time(&frame_logits, x.dim(2)?)?,
            frame_logits,
            features: f.features,
        })
    }

    /// Folds the batch statistics recorded in `ctx` into the running averages.
    pub fn commit_batch_stats(&self, ctx: &Ctx) -> Result<()> {
        for (name, mean, var) in ctx.bn_stats.borrow().iter() {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{name}.{suffix}");
                let buf = self
                    .store
                    .buffer(&key)
                    .ok_or_else(|| Error::Validation(format!("no buffer `{key}`")))?;
                let old = ParamStore::values(buf.as_tensor())?;
                let new = ParamStore::values(batch)?;
                let mixed = old
                    .iter()
                    .zip(&new)
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                    .collect();
                self.store.assign(buf, mixed)?;
            }
        }
        Ok(())
    }

    /// Copies all parameters and buffers from a model of the same layout.
    pub fn copy_from(&self, other: &SegModel) -> Result<()> {
        self.store.copy_from(&other.store)
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        save_checkpoint(path, &self.store, &CheckpointMeta::new(self), step)
    }

    /// Loads a checkpoint, rebuilding the architecture from its stored config.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let ck: LoadedCheckpoint<CheckpointMeta> = read_checkpoint(path)?;
        let model = SegModel::new(&ck.config.model, 0, ck.dtype, ck.config.with_projection)?;
        ck.restore(&model.store)?;
        Ok((model, ck.step))
    }

    /// Argmax class per sample, in eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Vec<u8>>> {
        let out = self.forward(x, &Ctx::eval())?;
        let idx = out.logits.argmax(1)?.to_dtype(DType::U32)?.to_vec2::<u32>()?;
        Ok(idx.into_iter().map(|row| row.into_iter().map(|v| v as u8).collect()).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    with_projection: bool,
}

impl CheckpointMeta {
    fn new(m: &SegModel) -> Self {
        Self {
            model: m.config.clone(),
            with_projection: m.has_projection(),
        }
    }
}

/// Reads only the model configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let ck: LoadedCheckpoint<CheckpointMeta> = read_checkpoint(path)?;
    Ok(ck.config.model)
}

impl Segmenter for SegModel {
    fn segment(&self, signals: &[&[f32]]) -> Result<Vec<Vec<u8>>> {
        if signals.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.input(signals)?;
        self.predict(&x)
    }
}

/// θ_t ← decay·θ_t + (1 − decay)·θ_s for every parameter; buffers are copied.
pub fn ema_update(teacher: &SegModel, student: &SegModel, decay: f64) -> Result<()> {
    let (t, s) = (&teacher.store, &student.store);
    if t.vars().len() != s.vars().len() || t.buffers().len() != s.buffers().len() {
        return Err(Error::Validation("teacher and student parameter lists differ".into()));
    }
    for ((tn, tv), (sn, sv)) in t.vars().iter().zip(s.vars()) {
        if tn != sn || tv.shape() != sv.shape() {
            return Err(Error::Validation(format!(
                "teacher `{tn}` {:?} does not match student `{sn}` {:?}",
                tv.shape(),
                sv.shape()
            )));
        }
        let a = ParamStore::values(tv.as_tensor())?;
        let b = ParamStore::values(sv.as_tensor())?;
        let mixed = a.iter().zip(&b).map(|(x, y)| decay * x + (1.0 - decay) * y).collect();
        t.assign(tv, mixed)?;
    }
    for ((tn, tv), (sn, sv)) in t.buffers().iter().zip(s.buffers()) {
        if tn != sn || tv.shape() != sv.shape() {
            return Err(Error::Validation(format!("teacher buffer `{tn}` does not match student `{sn}`")));
        }
        t.assign(tv, ParamStore::values(sv.as_tensor())?)?;
    }
    Ok(())
}

/// Analytic count of encoder + decoder trainable parameters.
pub fn param_count(config: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k + if bias { cout } else { 0 };
    let bn = |c: usize| 2 * c;
    let encoder = match config.backbone {
        Backbone::Resnet18_1d => {
            let stem = config.resnet_stem_width;
            let mut n = conv(config.in_channels, stem, 7, false) + bn(stem);
            let mut c_in = stem;
            for (stage, (&w, &blocks)) in config.resnet_widths.iter().zip(&config.resnet_blocks).enumerate() {
                for b in 0..blocks {
                    let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                    n += conv(c_in, w, 3, false) + bn(w) + conv(w, w, 3, false) + bn(w);
                    if stride != 1 || c_in != w {
                        n += conv(c_in, w, 1, false) + bn(w);
                    }
                    c_in = w;
                }
            }
            n
        }
        Backbone::VitTiny1d => {
            let d = config.vit_dim;
            let tokens = config.vit_ref_len.div_ceil(config.vit_patch);
            let hidden = config.vit_mlp_ratio * d;
            let linear = |i: usize, o: usize| i * o + o;
            let block = 2 * bn(d) + linear(d, 3 * d) + linear(d, d) + linear(d, hidden) + linear(hidden, d);
            conv(config.in_channels, d, config.vit_patch, true) + tokens * d + config.vit_depth * block + bn(d)
        }
    };
    let d = config.feature_dim();
    let h = config.decoder_hidden;
    encoder + conv(d, h, 3, true) + conv(h, config.num_classes, 1, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, l: usize) -> Vec<Vec<f32>> {
        (0..b)
            .map(|k| (0..l).map(|i| ((i + k) as f32 * 0.07).sin()).collect())
            .collect()
    }

    #[test]
    fn end_to_end_shapes() {
        for backbone in Backbone::ALL {
            let cfg = ModelConfig::tiny(backbone, 8);
            let m = SegModel::new(&cfg, 0, DType::F32, true).unwrap();
            for l in [64, 100, 257] {
                let sig = ramp(2, l);
                let refs: Vec<&[f32]> = sig.iter().map(|s| s.as_slice()).collect();
                let x = m.input(&refs).unwrap();
                let ctx = Ctx::eval();
                let f = m.encode(&x, &ctx).unwrap();
                assert_eq!(f.features.dims(), &[2, cfg.feature_dim(), cfg.frames(l)]);
                assert_eq!(m.decode(&f, l, &ctx).unwrap().dims(), &[2, 4, l]);
                assert_eq!(m.project(&f.features).unwrap().dims(), &[2, 16, cfg.frames(l)]);
            }
        }
    }

    #[test]
    fn full_size_frame_counts() {
        assert_eq!(ModelConfig::new(Backbone::Resnet18_1d).frames(2500), 79);
        assert_eq!(ModelConfig::new(Backbone::VitTiny1d).frames(2500), 125);
        assert_eq!(ModelConfig::new(Backbone::Resnet18_1d).feature_dim(), 512);
    }

    #[test]
    fn analytic_count_matches_built_model() {
        for backbone in Backbone::ALL {
            let cfg = ModelConfig::tiny(backbone, 8);
            let m = SegModel::new(&cfg, 0, DType::F32, false).unwrap();
            assert_eq!(param_count(&cfg), m.num_params(), "{backbone:?}");
        }
    }

    #[test]
    fn projection_is_unit_norm() {
        let cfg = ModelConfig::tiny(Backbone::Resnet18_1d, 8);
        let m = SegModel::new(&cfg, 3, DType::F32, true).unwrap();
        let sig = ramp(1, 128);
        let x = m.input(&[&sig[0]]).unwrap();
        let f = m.encode(&x, &Ctx::eval()).unwrap();
        let z = m.project(&f.features).unwrap();
        let norms = z.sqr().unwrap().sum(1).unwrap().sqrt().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-6), "{norms:?}");
    }

    #[test]
    fn eval_is_deterministic_and_train_dropout_is_seeded() {
        let cfg = ModelConfig::tiny(Backbone::VitTiny1d, 8);
        let m = SegModel::new(&cfg, 1, DType::F32, false).unwrap();
        let sig = ramp(2, 64);
        let refs: Vec<&[f32]> = sig.iter().map(|s| s.as_slice()).collect();
        let x = m.input(&refs).unwrap();
        let a = m.forward(&x, &Ctx::eval()).unwrap().logits.to_vec3::<f32>().unwrap();
        let b = m.forward(&x, &Ctx::eval()).unwrap().logits.to_vec3::<f32>().unwrap();
        assert_eq!(a, b);
        let c = m.forward(&x, &Ctx::train(5)).unwrap().logits.to_vec3::<f32>().unwrap();
        let d = m.forward(&x, &Ctx::train(5)).unwrap().logits.to_vec3::<f32>().unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn ema_arithmetic() {
        let cfg = ModelConfig::tiny(Backbone::Resnet18_1d, 4);
        let t = SegModel::new(&cfg, 1, DType::F64, false).unwrap();
        let s = SegModel::new(&cfg, 2, DType::F64, false).unwrap();
        let before = t.store().snapshot().unwrap();
        ema_update(&t, &s, 1.0).unwrap();
        let (name, var) = &t.store().vars()[0];
        assert_eq!(ParamStore::values(var.as_tensor()).unwrap(), before[name]);
        ema_update(&t, &s, 0.0).unwrap();
        assert_eq!(t.store().snapshot().unwrap(), s.store().snapshot().unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::tiny(Backbone::VitTiny1d, 8);
        let m = SegModel::new(&cfg, 9, DType::F32, true).unwrap();
        m.save(&path, 42).unwrap();
        let (back, step) = SegModel::load(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.store().snapshot().unwrap(), m.store().snapshot().unwrap());
        assert_eq!(checkpoint_config(&path).unwrap(), cfg);
    }
}
