//! Signal-processing front end: waveforms, log-mel extraction, resampling and
//! WAV I/O.

mod mel;
mod resample;
mod wav;

pub use mel::{
    extract_logmel, frame_count, hann_window, mel_filterbank, multires_configs, multires_mel_bank,
    reflect_index, stft_power, MelConfig, MelSpectrogram,
};
pub use resample::resample;
pub use wav::{read_wav, write_wav, WavFormat};

use crate::error::{Error, Result};

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWaveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite audio sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn sine(freq: f64, amplitude: f64, len: usize, sample_rate: u32) -> Self {
        let w = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
        Self {
            samples: (0..len)
                .map(|n| (amplitude * (w * n as f64).sin()) as f32)
                .collect(),
            sample_rate,
        }
    }
}
