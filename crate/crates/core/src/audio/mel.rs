use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AudioWaveform;
use crate::error::{Error, Result};

/// STFT and mel-filterbank settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub log_floor: f64,
}

impl MelConfig {
    /// Encoder input features: 2048-point FFT, hop 512, 228 bands at 44.1 kHz.
    pub fn primary() -> Self {
        Self {
            fft_size: 2048,
            hop_size: 512,
            win_size: 2048,
            n_mels: 228,
            sample_rate: 44_100,
            log_floor: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bins = self.fft_size / 2 + 1;
        if self.hop_size == 0 || self.fft_size == 0 || self.sample_rate == 0 {
            return Err(Error::Config("mel sizes must be positive".into()));
        }
        if self.win_size > self.fft_size {
            return Err(Error::Config("win_size must not exceed fft_size".into()));
        }
        if self.hop_size > self.win_size {
            return Err(Error::Config("hop_size must not exceed win_size".into()));
        }
        if self.n_mels == 0 || self.n_mels >= bins {
            return Err(Error::Config(format!(
                "n_mels must be in 1..{bins}, got {}",
                self.n_mels
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Log-power mel spectrogram, `[n_mels x frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Frames produced by a centered STFT: `floor(len / hop) + 1`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Maps an index of the padded signal onto `0..n` by mirror reflection
/// (edge sample not repeated), extended periodically for pads longer than
/// the signal.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Periodic Hann window of `win_size`, zero-padded (centered) to `fft_size`.
pub fn hann_window(win_size: usize, fft_size: usize) -> Vec<f64> {
    let mut w = vec![0.0; fft_size];
    let offset = (fft_size - win_size) / 2;
    for n in 0..win_size {
        let phase = 2.0 * std::f64::consts::PI * n as f64 / win_size as f64;
        w[offset + n] = 0.5 - 0.5 * phase.cos();
    }
    w
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Band edges (n_mels + 2 points, Hz) of the Slaney mel scale on `[0, sr/2]`.
pub(crate) fn mel_band_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Slaney-normalized triangular filterbank, `[n_mels x (fft/2 + 1)]`.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let n_freqs = fft_size / 2 + 1;
    let edges = mel_band_edges(n_mels, sample_rate);
    let mut fb = Array2::zeros((n_mels, n_freqs));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for k in 0..n_freqs {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            fb[[m, k]] = up.min(down).max(0.0) * enorm;
        }
    }
    fb
}

/// Centered, reflect-padded power spectrogram, `[(fft/2 + 1) x frames]`.
pub fn stft_power(samples: &[f32], fft_size: usize, hop: usize, win_size: usize) -> Array2<f64> {
    let n = samples.len();
    let frames = frame_count(n, hop);
    let pad = (fft_size / 2) as isize;
    let window = hann_window(win_size, fft_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let n_freqs = fft_size / 2 + 1;
    let mut out = Array2::zeros((n_freqs, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for f in 0..frames {
        let start = (f * hop) as isize - pad;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = samples[reflect_index(start + j as isize, n)] as f64;
            *slot = Complex::new(s * window[j], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_freqs {
            out[[k, f]] = buf[k].norm_sqr();
        }
    }
    out
}

/// Log-power mel spectrogram: `ln(max(mel_power, log_floor))`.
pub fn extract_logmel(audio: &AudioWaveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            actual: audio.sample_rate,
        });
    }
    if audio.is_empty() {
        return Err(Error::EmptyInput("audio"));
    }
    let power = stft_power(&audio.samples, cfg.fft_size, cfg.hop_size, cfg.win_size);
    let fb = mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate);
    let mel = fb.dot(&power);
    let values = mel.mapv(|p| p.max(cfg.log_floor).ln() as f32);
    Ok(MelSpectrogram {
        values,
        config: cfg.clone(),
    })
}

/// Configs of the reconstruction-loss mel bank.
pub fn multires_configs(ffts: &[usize], mels: &[usize], sample_rate: u32) -> Vec<MelConfig> {
    ffts.iter()
        .zip(mels)
        .map(|(&fft, &n_mels)| MelConfig {
            fft_size: fft,
            hop_size: fft / 4,
            win_size: fft,
            n_mels,
            sample_rate,
            log_floor: 1e-5,
        })
        .collect()
}

/// Three log-mel views at FFT sizes 1024/2048/4096 with 64/128/128 bands.
pub fn multires_mel_bank(audio: &AudioWaveform) -> Result<Vec<MelSpectrogram>> {
    multires_configs(&[1024, 2048, 4096], &[64, 128, 128], 44_100)
        .iter()
        .map(|cfg| extract_logmel(audio, cfg))
        .collect()
}
