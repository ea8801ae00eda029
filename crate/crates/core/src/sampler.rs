//! Euler sampling with classifier-free guidance and the end-to-end
//! synthesis pipeline.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{extract_logmel, resample, AudioWaveform};
use crate::autoencoder::SpeechAutoencoder;
use crate::checkpoint::{self, Component};
use crate::config::ModelConfig;
use crate::duration::DurationPredictor;
use crate::error::{Error, Result};
use crate::flow_training::crop_bounds;
use crate::latent_ops::{compress, decompress, CompressedLatent, LatentStats};
use crate::text::tokenize;
use crate::text_to_latent::{Conditions, TextToLatent};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn from_defaults(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            nfe: cfg.sampler.nfe,
            cfg_scale: cfg.sampler.cfg_scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::InvalidArgument("nfe must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("cfg scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// `v_u + s (v_c - v_u)`; the endpoints `s = 0` and `s = 1` return the
/// corresponding input unchanged.
pub fn cfg_field(v_cond: &Tensor, v_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if v_cond.dims() != v_uncond.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", v_cond.dims(), v_uncond.dims())));
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    Ok((v_uncond + (v_cond - v_uncond)?.affine(s, 0.0)?)?)
}

/// A conditional / unconditional vector field pair.
pub trait GuidedField {
    fn conditional(&self, z: &Tensor, t: f64) -> Result<Tensor>;
    fn unconditional(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub z: Tensor,
    /// Field evaluations performed.
    pub evaluations: usize,
}

/// `z_{k+1} = z_k + v(z_k, k / nfe) / nfe` with guided `v`. The
/// unconditional pass is skipped when `cfg_scale == 1`.
pub fn euler_sample(field: &impl GuidedField, z0: &Tensor, cfg: &SamplerConfig) -> Result<SampleOutput> {
    cfg.validate()?;
    let dt = 1.0 / cfg.nfe as f64;
    let mut z = z0.clone();
    let mut evaluations = 0;
    for k in 0..cfg.nfe {
        let t = k as f64 * dt;
        let vc = field.conditional(&z, t)?;
        evaluations += 1;
        let v = if cfg.cfg_scale == 1.0 {
            vc
        } else {
            let vu = field.unconditional(&z, t)?;
            evaluations += 1;
            cfg_field(&vc, &vu, cfg.cfg_scale)?
        };
        // Sampling never backpropagates; without the detach the op graph
        // grows with every step and dropping it recurses per node.
        z = (z + v.affine(dt, 0.0)?)?.detach();
    }
    Ok(SampleOutput { z, evaluations })
}

/// The text-to-latent field for one utterance `[1, T, k_c C]`.
pub struct TtlField<'a> {
    pub model: &'a TextToLatent,
    pub cond: Conditions,
    pub null: Conditions,
    pub mask: Tensor,
}

impl GuidedField for TtlField<'_> {
    fn conditional(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.model.vector_field.forward(z, &self.mask, &[t], &self.cond)
    }

    fn unconditional(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.model.vector_field.forward(z, &self.mask, &[t], &self.null)
    }
}

/// Standard-normal noise `[1, frames, channels]` from `seed`.
pub fn initial_noise(frames: usize, channels: usize, seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..frames * channels).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, (1, frames, channels), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Round half up, at least one frame.
pub fn duration_frames(predicted: f64) -> usize {
    if predicted.is_finite() {
        ((predicted + 0.5).floor() as usize).max(1)
    } else {
        1
    }
}

/// All trained pieces needed for synthesis.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: ModelConfig,
    pub autoencoder: SpeechAutoencoder,
    pub text_to_latent: TextToLatent,
    pub duration: DurationPredictor,
    pub stats: LatentStats,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const STATS_FILE: &str = "latent_stats.json";

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub audio: AudioWaveform,
    /// Compressed frames generated.
    pub frames: usize,
    pub predicted_frames: f64,
    pub evaluations: usize,
}

impl Pipeline {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.cfg.to_toml_string()?)?;
        checkpoint::save(
            self.autoencoder.store(),
            Component::Autoencoder,
            &self.cfg,
            dir.join(Component::Autoencoder.file_name()),
        )?;
        checkpoint::save(
            self.text_to_latent.store(),
            Component::TextToLatent,
            &self.cfg,
            dir.join(Component::TextToLatent.file_name()),
        )?;
        checkpoint::save(
            self.duration.store(),
            Component::DurationPredictor,
            &self.cfg,
            dir.join(Component::DurationPredictor.file_name()),
        )?;
        self.stats.save(dir.join(STATS_FILE))
    }

    /// Loads `config.toml`, the three checkpoints and the latent statistics.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::MissingCheckpoint(cfg_path));
        }
        let cfg = ModelConfig::load(&cfg_path)?;
        let autoencoder = SpeechAutoencoder::new(&cfg, 0)?;
        checkpoint::load_into(
            autoencoder.store(),
            Component::Autoencoder,
            &cfg,
            dir.join(Component::Autoencoder.file_name()),
        )?;
        let text_to_latent = TextToLatent::new(&cfg, 0)?;
        checkpoint::load_into(
            text_to_latent.store(),
            Component::TextToLatent,
            &cfg,
            dir.join(Component::TextToLatent.file_name()),
        )?;
        let duration = DurationPredictor::new(&cfg, 0)?;
        checkpoint::load_into(
            duration.store(),
            Component::DurationPredictor,
            &cfg,
            dir.join(Component::DurationPredictor.file_name()),
        )?;
        let stats_path = dir.join(STATS_FILE);
        if !stats_path.exists() {
            return Err(Error::MissingCheckpoint(stats_path));
        }
        Ok(Self {
            stats: LatentStats::load(stats_path)?,
            cfg,
            autoencoder,
            text_to_latent,
            duration,
        })
    }

    /// Reference audio to its normalized compressed latent `[1, T, k_c C]`.
    pub fn encode_reference(&self, reference: &AudioWaveform) -> Result<Tensor> {
        if reference.is_empty() {
            return Err(Error::EmptyInput("reference audio"));
        }
        let audio = if reference.sample_rate != self.cfg.mel.sample_rate {
            resample(reference, self.cfg.mel.sample_rate)
        } else {
            reference.clone()
        };
        let mel = extract_logmel(&audio, &self.cfg.mel)?;
        let latent = self.autoencoder.encode(&mel)?;
        let cl = compress(&latent, self.cfg.ttl.k_c)?;
        let min = crop_bounds(&self.cfg).0;
        if cl.frames() < min {
            return Err(Error::ReferenceTooShort {
                frames: cl.frames(),
                min,
            });
        }
        Ok(self.stats.normalize(&cl.to_batch()?)?)
    }

    /// Synthesizes `text` in the voice of `reference`. `frames` overrides
    /// the duration predictor.
    pub fn synthesize(
        &self,
        text: &str,
        reference: &AudioWaveform,
        sampler: &SamplerConfig,
        frames: Option<usize>,
    ) -> Result<Synthesis> {
        sampler.validate()?;
        let chars = tokenize(text);
        if chars.is_empty() {
            return Err(Error::EmptyInput("text"));
        }
        let dtype = self.cfg.dtype();
        let r = self.encode_reference(reference)?;
        let predicted = self.duration.predict(&chars, &r.squeeze(0)?)?;
        let n = frames.unwrap_or_else(|| duration_frames(predicted));
        if n == 0 {
            return Err(Error::InvalidArgument("frame count must be positive".into()));
        }
        let ids = Tensor::from_vec(chars.ids.clone(), (1, chars.len()), &Device::Cpu)?;
        let rmask = Tensor::ones((1, r.dim(1)?, 1), dtype, &Device::Cpu)?;
        let model = &self.text_to_latent;
        let field = TtlField {
            model,
            cond: model.encode_conditions(&ids, &[chars.len()], &r, &rmask)?,
            null: model.null_batch(1)?,
            mask: Tensor::ones((1, n, 1), dtype, &Device::Cpu)?,
        };
        let z0 = initial_noise(n, model.latent_channels(), sampler.seed, dtype)?;
        let out = euler_sample(&field, &z0, sampler)?;
        let z = self.stats.denormalize(&out.z)?.squeeze(0)?;
        let cl = CompressedLatent {
            values: z.t()?.contiguous()?,
            k_c: self.cfg.ttl.k_c,
            pad: 0,
        };
        let latent = decompress(&cl, self.autoencoder.frame_rate())?;
        let audio = self.autoencoder.decode(&latent)?;
        Ok(Synthesis {
            audio,
            frames: n,
            predicted_frames: predicted,
            evaluations: out.evaluations,
        })
    }
}
