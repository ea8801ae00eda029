//! Layers operating on time-major `[batch, time, channels]` tensors.

use candle_core::{DType, Tensor, Var, D};

use super::params::{Init, Scope};
use crate::error::Result;

const PROJ_STD: f64 = 0.02;

/// Forward mode for layers with train/eval behavior (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(vs: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_bias(vs, in_dim, out_dim, true)
    }

    pub fn with_bias(vs: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = vs.param("weight", (out_dim, in_dim), Init::TruncNormal(PROJ_STD))?;
        let bias = if bias {
            Some(vs.param("bias", out_dim, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, self.in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the channel (last) dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: vs.param("gamma", dim, Init::Const(1.0))?,
            beta: vs.param("beta", dim, Init::Const(0.0))?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Batch normalization over channels of `[B, T, C]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(vs: &Scope, dim: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: vs.param("gamma", dim, Init::Const(1.0))?,
            beta: vs.param("beta", dim, Init::Const(0.0))?,
            running_mean: vs.buffer("running_mean", dim, Init::Const(0.0))?,
            running_var: vs.buffer("running_var", dim, Init::Const(1.0))?,
            eps,
            momentum,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (mean, var) = match mode {
            Mode::Eval => (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            ),
            Mode::Train => {
                let (b, t, c) = x.dims3()?;
                let flat = x.reshape((b * t, c))?;
                let mean = flat.mean(0)?;
                let xc = flat.broadcast_sub(&mean)?;
                let var = xc.sqr()?.mean(0)?;
                let n = (b * t) as f64;
                let unbiased = if n > 1.0 {
                    (var.detach() * (n / (n - 1.0)))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
        };
        let y = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    /// Per-channel `(scale, shift)` equivalent to eval mode.
    pub fn eval_affine(&self) -> Result<(Tensor, Tensor)> {
        let scale = self
            .gamma
            .broadcast_div(&(self.running_var.as_tensor() + self.eps)?.sqrt()?)?;
        let shift = (&self.beta - self.running_mean.as_tensor().mul(&scale)?)?;
        Ok((scale, shift))
    }
}

/// Per-channel PReLU.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub fn new(vs: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            slope: vs.param("slope", dim, Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let neg = x.neg()?.relu()?.broadcast_mul(&self.slope)?;
        Ok((x.relu()? - neg)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// `ln(1 + e^x)` in a form that is stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Zero-pads along the time axis of `[B, T, C]`.
pub fn pad_time(x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_zeros(1, left, right)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output frame t sees inputs t - (k-1)d ..= t.
    Causal,
    /// Output frame t sees inputs t - (k-1)d/2 ..= t + (k-1)d/2.
    Same,
}

impl Padding {
    fn split(self, context: usize) -> (usize, usize) {
        match self {
            Padding::Causal => (context, 0),
            Padding::Same => (context / 2, context - context / 2),
        }
    }
}

/// Depthwise 1-D convolution computed as a sum of shifted, scaled copies.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: Tensor, // [kernel, channels]
    bias: Tensor,
    kernel: usize,
    dilation: usize,
    padding: Padding,
}

impl DepthwiseConv {
    pub fn new(
        vs: &Scope,
        channels: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        let tap = match padding {
            Padding::Causal => kernel - 1,
            Padding::Same => kernel / 2,
        };
        Ok(Self {
            weight: vs.param(
                "weight",
                (kernel, channels),
                Init::DepthwiseIdentity { tap, std: PROJ_STD },
            )?,
            bias: vs.param("bias", channels, Init::Const(0.0))?,
            kernel,
            dilation,
            padding,
        })
    }

    /// Frames of left context a streaming caller must retain.
    pub fn context(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (left, right) = self.padding.split(self.context());
        let t = x.dim(1)?;
        self.apply_padded(&pad_time(x, left, right)?, t)
    }

    /// `padded` holds `out_len + context` frames; returns `out_len` frames.
    fn apply_padded(&self, padded: &Tensor, out_len: usize) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for k in 0..self.kernel {
            let tap = padded
                .narrow(1, k * self.dilation, out_len)?
                .broadcast_mul(&self.weight.get(k)?)?;
            acc = Some(match acc {
                None => tap,
                Some(a) => (a + tap)?,
            });
        }
        Ok(acc.expect("kernel >= 1").broadcast_add(&self.bias)?)
    }

    /// Causal streaming step: `history` is the previous `context()` input frames.
    pub fn forward_stream(&self, x: &Tensor, history: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = x.dim(1)?;
        let full = Tensor::cat(&[history, x], 1)?;
        let ctx = self.context();
        let out = self.apply_padded(&full, t)?;
        let new_history = full.narrow(1, full.dim(1)? - ctx, ctx)?;
        Ok((out, new_history))
    }
}

/// Dense 1-D convolution over `[B, T, C]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor, // [out, in, kernel]
    bias: Tensor,
    kernel: usize,
    dilation: usize,
    padding: Padding,
}

impl Conv1d {
    pub fn new(
        vs: &Scope,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        padding: Padding,
    ) -> Result<Self> {
        Ok(Self {
            weight: vs.param(
                "weight",
                (out_dim, in_dim, kernel),
                Init::TruncNormal(PROJ_STD),
            )?,
            bias: vs.param("bias", out_dim, Init::Const(0.0))?,
            kernel,
            dilation: 1,
            padding,
        })
    }

    pub fn context(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    fn conv_valid(&self, padded: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv1d(&padded.transpose(1, 2)?, &self.weight, 0, 1, self.dilation)?;
        Ok(y.transpose(1, 2)?.broadcast_add(&self.bias)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (left, right) = self.padding.split(self.context());
        self.conv_valid(&pad_time(x, left, right)?)
    }

    pub fn forward_stream(&self, x: &Tensor, history: &Tensor) -> Result<(Tensor, Tensor)> {
        let full = Tensor::cat(&[history, x], 1)?;
        let ctx = self.context();
        let out = self.conv_valid(&full)?;
        let new_history = full.narrow(1, full.dim(1)? - ctx, ctx)?;
        Ok((out, new_history))
    }
}

/// ConvNeXt block: depthwise conv, layer norm, pointwise expansion, GELU,
/// pointwise projection, layer scale, residual.
#[derive(Debug, Clone)]
pub struct ConvNeXtBlock {
    dw: DepthwiseConv,
    norm: LayerNorm,
    pw1: Linear,
    pw2: Linear,
    scale: Tensor,
}

impl ConvNeXtBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &Scope,
        width: usize,
        intermediate: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        layer_scale: f64,
        ln_eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            dw: DepthwiseConv::new(&vs.pp("dw"), width, kernel, dilation, padding)?,
            norm: LayerNorm::new(&vs.pp("norm"), width, ln_eps)?,
            pw1: Linear::new(&vs.pp("pw1"), width, intermediate)?,
            pw2: Linear::new(&vs.pp("pw2"), intermediate, width)?,
            scale: vs.param("scale", width, Init::Const(layer_scale))?,
        })
    }

    pub fn context(&self) -> usize {
        self.dw.context()
    }

    fn tail(&self, x: &Tensor, h: Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&h)?;
        let h = gelu(&self.pw1.forward(&h)?)?;
        let h = self.pw2.forward(&h)?.broadcast_mul(&self.scale)?;
        Ok((x + h)?)
    }

    /// `mask` is `[B, T, 1]` with 1 on valid frames; padded frames are zeroed
    /// on input and output so they never leak into valid frames.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = match mask {
            Some(m) => x.broadcast_mul(m)?,
            None => x.clone(),
        };
        let h = self.dw.forward(&x)?;
        let y = self.tail(&x, h)?;
        match mask {
            Some(m) => Ok(y.broadcast_mul(m)?),
            None => Ok(y),
        }
    }

    pub fn forward_stream(&self, x: &Tensor, history: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, hist) = self.dw.forward_stream(x, history)?;
        Ok((self.tail(x, h)?, hist))
    }
}

/// Builds a `[B, T, 1]` validity mask from per-item lengths.
pub fn length_mask(lengths: &[usize], max_len: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(lengths.len() * max_len);
    for &l in lengths {
        v.extend((0..max_len).map(|t| if t < l { 1.0f64 } else { 0.0 }));
    }
    Ok(
        Tensor::from_vec(v, (lengths.len(), max_len, 1), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::Device;

    fn randn(shape: (usize, usize, usize), seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn to_vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn linear_10_to_5_has_55_params() {
        let s = ParamStore::new(DType::F64, 0);
        Linear::new(&s.root(), 10, 5).unwrap();
        assert_eq!(s.num_params(None), 55);
    }

    #[test]
    fn depthwise_matches_direct_sum() {
        let s = ParamStore::new(DType::F64, 1);
        let conv = DepthwiseConv::new(&s.root(), 3, 3, 2, Padding::Causal).unwrap();
        let x = randn((1, 9, 3), 2);
        let y = to_vec(&conv.forward(&x).unwrap());
        let w = to_vec(&conv.weight);
        let xv = to_vec(&x);
        for t in 0..9 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let src = t as isize - ((2 - k) * 2) as isize;
                    if src >= 0 {
                        acc += w[k * 3 + c] * xv[src as usize * 3 + c];
                    }
                }
                assert!((y[t * 3 + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_conv_streaming_equals_offline() {
        let s = ParamStore::new(DType::F64, 3);
        let conv = Conv1d::new(&s.root(), 4, 5, 3, Padding::Causal).unwrap();
        let x = randn((1, 11, 4), 4);
        let full = to_vec(&conv.forward(&x).unwrap());
        let mut hist = Tensor::zeros((1, conv.context(), 4), DType::F64, &Device::Cpu).unwrap();
        let mut parts = Vec::new();
        for (start, len) in [(0, 4), (4, 1), (5, 6)] {
            let (y, h) = conv
                .forward_stream(&x.narrow(1, start, len).unwrap(), &hist)
                .unwrap();
            hist = h;
            parts.extend(to_vec(&y));
        }
        for (a, b) in full.iter().zip(&parts) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        let x = Tensor::new(&[-800.0f64, -1.0, 0.0, 1.0, 800.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((y[2] - 2f64.ln()).abs() < 1e-12);
        assert!((y[4] - 800.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_eval_affine_matches_forward() {
        let s = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&s.root(), 3, 1e-5, 0.1).unwrap();
        let x = randn((2, 7, 3), 9);
        bn.forward(&x, Mode::Train).unwrap();
        let y = to_vec(&bn.forward(&x, Mode::Eval).unwrap());
        let (scale, shift) = bn.eval_affine().unwrap();
        let z = to_vec(
            &x.broadcast_mul(&scale)
                .unwrap()
                .broadcast_add(&shift)
                .unwrap(),
        );
        for (a, b) in y.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
