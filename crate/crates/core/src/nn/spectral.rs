//! Differentiable short-time spectra of waveform tensors.
//!
//! The DFT is a matmul against a cosine/sine basis with the analysis window
//! folded in, so gradients flow back to the waveform.

use candle_core::{DType, Device, Tensor};

use crate::audio::{frame_count, hann_window, mel_filterbank, reflect_index, MelConfig};
use crate::error::{Error, Result};

/// Centered, reflect-padded STFT of `[B, N]` waveforms.
#[derive(Debug, Clone)]
pub struct Stft {
    fft_size: usize,
    hop: usize,
    /// `[fft, 2 * n_freqs]`: windowed cos columns then windowed sin columns.
    basis: Tensor,
    mel: Option<Tensor>,
    floor: f64,
}

impl Stft {
    pub fn new(fft_size: usize, hop: usize, win_size: usize, dtype: DType) -> Result<Self> {
        let n_freqs = fft_size / 2 + 1;
        let window = hann_window(win_size, fft_size);
        let mut basis = vec![0.0f64; fft_size * 2 * n_freqs];
        for (j, w) in window.iter().enumerate() {
            for k in 0..n_freqs {
                let phase =
                    2.0 * std::f64::consts::PI * ((j * k) % fft_size) as f64 / fft_size as f64;
                basis[j * 2 * n_freqs + k] = w * phase.cos();
                basis[j * 2 * n_freqs + n_freqs + k] = -w * phase.sin();
            }
        }
        Ok(Self {
            fft_size,
            hop,
            basis: Tensor::from_vec(basis, (fft_size, 2 * n_freqs), &Device::Cpu)?
                .to_dtype(dtype)?,
            mel: None,
            floor: 1e-5,
        })
    }

    /// Log-mel view matching [`crate::audio::extract_logmel`].
    pub fn log_mel(cfg: &MelConfig, dtype: DType) -> Result<Self> {
        let mut s = Self::new(cfg.fft_size, cfg.hop_size, cfg.win_size, dtype)?;
        let fb = mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate);
        let (m, f) = fb.dim();
        let fb_t: Vec<f64> = fb.t().iter().copied().collect();
        s.mel = Some(Tensor::from_vec(fb_t, (f, m), &Device::Cpu)?.to_dtype(dtype)?);
        s.floor = cfg.log_floor;
        Ok(s)
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        frame_count(len, self.hop)
    }

    /// Power spectrum `[B, frames, n_freqs]`.
    pub fn power(&self, wave: &Tensor) -> Result<Tensor> {
        let (b, n) = wave.dims2()?;
        if n == 0 {
            return Err(Error::EmptyInput("waveform"));
        }
        let frames = self.frames(n);
        let pad = (self.fft_size / 2) as isize;
        let idx: Vec<u32> = (0..frames)
            .flat_map(|f| {
                let start = (f * self.hop) as isize - pad;
                (0..self.fft_size).map(move |j| reflect_index(start + j as isize, n) as u32)
            })
            .collect();
        let idx = Tensor::from_vec(idx, frames * self.fft_size, wave.device())?;
        let framed = wave
            .index_select(&idx, 1)?
            .reshape((b * frames, self.fft_size))?;
        let spec = framed.matmul(&self.basis)?;
        let nf = self.n_freqs();
        let re = spec.narrow(1, 0, nf)?;
        let im = spec.narrow(1, nf, nf)?;
        Ok((re.sqr()? + im.sqr()?)?.reshape((b, frames, nf))?)
    }

    /// `ln(max(x, floor))` of the mel (if configured) or linear power.
    pub fn log_spectrum(&self, wave: &Tensor) -> Result<Tensor> {
        let p = self.power(wave)?;
        let p = match &self.mel {
            Some(fb) => {
                let (b, t, f) = p.dims3()?;
                p.reshape((b * t, f))?
                    .matmul(fb)?
                    .reshape((b, t, fb.dim(1)?))?
            }
            None => p,
        };
        Ok(p.maximum(self.floor)?.log()?)
    }
}
