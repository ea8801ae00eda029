//! Temporal compression of latents and channel-wise normalization.
//!
//! Compression folds `k_c` consecutive frames into the channel axis:
//! `out[c * k_c + j, t] = in[c, t * k_c + j]`. Sequences whose length is not a
//! multiple of `k_c` are right-padded with zero frames; the pad length is kept
//! so decompression strips it again.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Latent;
use crate::error::{Error, Result};

/// Smallest standard deviation kept by [`LatentStats::fit`].
pub const STD_EPS: f64 = 1e-5;

/// Compressed latent `[k_c * C, ceil(T / k_c)]`.
#[derive(Debug, Clone)]
pub struct CompressedLatent {
    pub values: Tensor,
    pub k_c: usize,
    /// Zero frames appended before folding.
    pub pad: usize,
}

impl CompressedLatent {
    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.dims()[1]
    }

    /// `[1, T', k_c * C]` view for the batched API.
    pub fn to_batch(&self) -> Result<Tensor> {
        Ok(self.values.t()?.unsqueeze(0)?.contiguous()?)
    }
}

/// Folds `[B, T, C]` into `[B, T / k, k * C]`; `T` must be a multiple of `k`.
pub fn compress_tensor(z: &Tensor, k: usize) -> Result<Tensor> {
    let (b, t, c) = z.dims3()?;
    if k == 0 || t % k != 0 {
        return Err(Error::Shape(format!("{t} frames are not a multiple of k_c = {k}")));
    }
    Ok(z.reshape((b, t / k, k, c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, t / k, c * k))?)
}

/// Inverse of [`compress_tensor`].
pub fn decompress_tensor(z: &Tensor, k: usize) -> Result<Tensor> {
    let (b, t, kc) = z.dims3()?;
    if k == 0 || kc % k != 0 {
        return Err(Error::Shape(format!("{kc} channels are not a multiple of k_c = {k}")));
    }
    let c = kc / k;
    Ok(z.reshape((b, t, c, k))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, t * k, c))?)
}

pub fn compress(latent: &Latent, k_c: usize) -> Result<CompressedLatent> {
    if k_c == 0 {
        return Err(Error::InvalidArgument("k_c must be positive".into()));
    }
    let (c, t) = latent.values.dims2()?;
    let pad = (k_c - t % k_c) % k_c;
    // [C, T] -> [1, T + pad, C]
    let z = latent.values.t()?.unsqueeze(0)?;
    let z = if pad > 0 {
        z.pad_with_zeros(1, 0, pad)?
    } else {
        z
    };
    let folded = compress_tensor(&z.contiguous()?, k_c)?;
    debug_assert_eq!(folded.dim(2)?, c * k_c);
    Ok(CompressedLatent {
        values: folded.squeeze(0)?.t()?.contiguous()?,
        k_c,
        pad,
    })
}

pub fn decompress(cl: &CompressedLatent, frame_rate: f64) -> Result<Latent> {
    let (kc, t) = cl.values.dims2()?;
    if cl.k_c == 0 || kc % cl.k_c != 0 {
        return Err(Error::Shape(format!(
            "{kc} channels are not a multiple of k_c = {}",
            cl.k_c
        )));
    }
    if cl.pad >= cl.k_c || (t == 0 && cl.pad > 0) {
        return Err(Error::Shape(format!("pad {} must be below k_c = {}", cl.pad, cl.k_c)));
    }
    let z = decompress_tensor(&cl.to_batch()?, cl.k_c)?.squeeze(0)?;
    let z = z.narrow(0, 0, t * cl.k_c - cl.pad)?;
    Ok(Latent {
        values: z.t()?.contiguous()?,
        frame_rate,
    })
}

/// Channel-wise mean and standard deviation of compressed latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: usize,
    pub channels: usize,
    pub k_c: usize,
}

impl LatentStats {
    /// Fits statistics over every frame of `[T_i, channels]` tensors
    /// (or batched `[B, T_i, channels]`).
    pub fn fit<'a>(items: impl IntoIterator<Item = &'a Tensor>, k_c: usize) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for t in items {
            let c = t.dim(t.rank() - 1)?;
            let rows: Vec<Vec<f64>> = t
                .to_dtype(DType::F64)?
                .reshape(((), c))?
                .to_vec2()?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::Shape(format!(
                    "channel count {c} differs from {}",
                    sum.len()
                )));
            }
            for r in rows {
                for (j, v) in r.into_iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::EmptyInput("latent statistics need at least two frames"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .enumerate()
            .map(|(j, (s, m))| {
                let var = (s / n as f64 - m * m).max(0.0);
                let sd = var.sqrt();
                if sd < STD_EPS {
                    log::warn!("latent channel {j} has near-zero variance; std clamped to {STD_EPS}");
                    STD_EPS
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self {
            channels: mean.len(),
            mean,
            std,
            sample_count: n,
            k_c,
        })
    }

    fn vectors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let m = Tensor::from_vec(self.mean.clone(), self.channels, &Device::Cpu)?.to_dtype(dtype)?;
        let s = Tensor::from_vec(self.std.clone(), self.channels, &Device::Cpu)?.to_dtype(dtype)?;
        Ok((m, s))
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        let c = z.dim(z.rank() - 1)?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "stats cover {} channels, tensor has {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `(z - mean) / std` along the last axis.
    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let (m, s) = self.vectors(z.dtype())?;
        Ok(z.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let (m, s) = self.vectors(z.dtype())?;
        Ok(z.broadcast_mul(&s)?.broadcast_add(&m)?)
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(channels: usize, k_c: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            sample_count: 0,
            channels,
            k_c,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.mean.len() != s.channels || s.std.len() != s.channels {
            return Err(Error::Shape("stats vectors do not match channel count".into()));
        }
        if s.std.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("stats std must be positive".into()));
        }
        Ok(s)
    }
}
