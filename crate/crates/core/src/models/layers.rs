//! Building blocks on top of candle tensors. Every layer borrows its
//! parameters from a `ParamStore`, so optimizer updates are visible without
//! rebuilding the network.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{Init, ParamStore};
use crate::error::Result;

/// Forward-pass behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch statistics and dropout; the seed fixes every dropout mask.
    Train { dropout_seed: u64 },
}

/// Per-forward state: dropout RNG and the batch statistics seen by each
/// normalization layer (for the running-average update after the step).
pub struct Ctx {
    pub mode: Mode,
    rng: RefCell<Option<ChaCha8Rng>>,
    pub(crate) bn_stats: RefCell<Vec<(String, Tensor, Tensor)>>,
}

impl Ctx {
    pub fn new(mode: Mode) -> Self {
        use rand::SeedableRng;
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        };
        Self {
            mode,
            rng: RefCell::new(rng),
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self::new(Mode::Train { dropout_seed })
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }
}

pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel;
        let weight = store.add(&format!("{name}.weight"), &[c_out, c_in, kernel], Init::KaimingUniform { fan_in }, rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[c_out], Init::BiasUniform { fan_in }, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero bias, for final classifiers.
    pub fn zero_bias(mut self, store: &mut ParamStore, name: &str) -> Result<Self> {
        if self.bias.is_some() {
            self.bias = Some(store.reset(&format!("{name}.bias"), Init::Zeros)?);
        }
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv1d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?)?,
            None => y,
        })
    }
}

/// Cross-correlation of (B, C_in, L) with (C_out, C_in, K) weights, written
/// as an explicit unfold followed by one matrix product so that both
/// gradients come from plain slicing and matmul.
pub fn conv1d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c_in, l) = x.dims3()?;
    let (c_out, _, k) = weight.dims3()?;
    let padded = l + 2 * padding;
    if padded < k || stride == 0 {
        return Err(crate::Error::Validation(format!(
            "conv1d: input of length {l} (padding {padding}) is shorter than kernel {k}"
        )));
    }
    let l_out = (padded - k) / stride + 1;
    let span = l_out * stride;
    let right = (k - 1 + span).saturating_sub(l + padding);
    let xp = x.pad_with_zeros(2, padding, right)?;
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let s = xp.narrow(2, j, span)?;
        cols.push(if stride == 1 {
            s
        } else {
            s.reshape((b, c_in, l_out, stride))?.narrow(3, 0, 1)?.squeeze(3)?
        });
    }
    let cols = Tensor::stack(&cols, 2)?.reshape((b, c_in * k, l_out))?;
    Ok(weight.reshape((c_out, c_in * k))?.broadcast_matmul(&cols)?)
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), &[d_out, d_in], Init::KaimingUniform { fan_in: d_in }, rng)?,
            bias: store.add(&format!("{name}.bias"), &[d_out], Init::BiasUniform { fan_in: d_in }, rng)?,
        })
    }

    /// `x`: (..., d_in).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over (batch, time) per channel.
pub struct BatchNorm1d {
    name: String,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gamma = store.add(&format!("{name}.weight"), &[channels], Init::Ones, rng)?;
        let beta = store.add(&format!("{name}.bias"), &[channels], Init::Zeros, rng)?;
        let running_mean = store.add_buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        let running_var = store.add_buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Self {
            name: name.to_string(),
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, _, l) = x.dims3()?;
        let (mean, var) = if ctx.is_train() {
            let mean = x.mean_keepdim(2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(2)?.mean_keepdim(0)?;
            let n = (b * l) as f64;
            let unbiased = if n > 1.0 { var.affine(n / (n - 1.0), 0.0)? } else { var.clone() };
            ctx.bn_stats
                .borrow_mut()
                .push((self.name.clone(), mean.flatten_all()?.detach(), unbiased.flatten_all()?.detach()));
            (mean, var)
        } else {
            (
                self.running_mean.reshape((1, (), 1))?,
                self.running_var.reshape((1, (), 1))?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape((1, (), 1))?)?
            .broadcast_add(&self.beta.reshape((1, (), 1))?)?)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.weight"), &[dim], Init::Ones, rng)?,
            beta: store.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Inverted dropout with masks drawn from the context RNG.
pub fn dropout(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.is_train() || p <= 0.0 {
        return Ok(x.clone());
    }
    let mut guard = ctx.rng.borrow_mut();
    let rng = guard.as_mut().expect("train context has an rng");
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Max pooling with kernel 2 and stride 2 along time; odd lengths are
/// padded by repeating the last sample.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    let x = if l % 2 == 1 { x.pad_with_same(2, 0, 1)? } else { x.clone() };
    let l2 = x.dim(2)? / 2;
    Ok(x.reshape((b, c, l2, 2))?.max(3)?)
}

/// (F, L) matrix that linearly interpolates `f` frames onto `l` samples
/// (half-pixel alignment, edges clamped). Rows of its transpose sum to one.
pub fn interpolation_matrix(f: usize, l: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; f * l];
    for i in 0..l {
        let src = ((i as f64 + 0.5) * f as f64 / l as f64 - 0.5).clamp(0.0, (f - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(f - 1);
        let w = src - lo as f64;
        m[lo * l + i] += 1.0 - w;
        m[hi * l + i] += w;
    }
    Ok(Tensor::from_vec(m, (f, l), device)?.to_dtype(dtype)?)
}

/// Resamples the last axis of (B, C, F) to length `l`.
pub fn interpolate_time(x: &Tensor, l: usize) -> Result<Tensor> {
    let (b, c, f) = x.dims3()?;
    if f == l {
        return Ok(x.clone());
    }
    let m = interpolation_matrix(f, l, x.dtype(), x.device())?;
    Ok(x.reshape((b * c, f))?.matmul(&m)?.reshape((b, c, l))?)
}
