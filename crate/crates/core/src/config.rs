//! Model and training hyperparameters.
//!
//! Every architectural number lives in [`ModelConfig`]. Three presets exist:
//! `paper` (full scale, ~44M parameters), `toy` (desk-scale training on one
//! CPU core) and `tiny` (a few thousand parameters, for finite-difference
//! gradient checks). A config file is TOML with a `preset` key plus any
//! per-field overrides, e.g.
//!
//! ```toml
//! preset = "toy"
//! dtype = "f64"
//!
//! [ttl]
//! k_c = 3
//!
//! [flow_train]
//! batch_size = 8
//! k_e = 2
//! ```

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::MelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub enc_width: usize,
    pub enc_intermediate: usize,
    pub enc_blocks: usize,
    pub enc_kernel: usize,
    pub dec_width: usize,
    pub dec_intermediate: usize,
    pub dec_kernel: usize,
    pub dec_dilations: Vec<usize>,
    pub dec_head_kernel: usize,
    pub dec_head_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub mpd_periods: Vec<usize>,
    /// Output channels of the six MPD layers; the last must be 1.
    pub mpd_channels: Vec<usize>,
    pub mpd_kernel: usize,
    pub mpd_stride: usize,
    pub mrd_ffts: Vec<usize>,
    pub mrd_channels: usize,
    /// Multi-resolution mel bank used by the reconstruction loss.
    pub recon_ffts: Vec<usize>,
    pub recon_mels: Vec<usize>,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtlConfig {
    /// Temporal compression factor.
    pub k_c: usize,
    pub ref_hidden: usize,
    pub ref_blocks: usize,
    pub ref_intermediate: usize,
    pub n_ref_tokens: usize,
    pub text_hidden: usize,
    pub text_conv_blocks: usize,
    pub text_intermediate: usize,
    pub text_attn_blocks: usize,
    pub text_filter: usize,
    pub text_heads: usize,
    pub text_cross_layers: usize,
    pub cross_heads: usize,
    pub n_null_text: usize,
    pub conv_kernel: usize,
    pub vf_hidden: usize,
    pub vf_intermediate: usize,
    pub vf_main_blocks: usize,
    pub vf_dilations: Vec<usize>,
    pub vf_std_blocks: usize,
    pub vf_tail_blocks: usize,
    pub vf_heads: usize,
    pub vf_text_rotary: bool,
    pub time_dim: usize,
    pub rope_base: f64,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationConfig {
    pub hidden: usize,
    pub ref_blocks: usize,
    pub ref_intermediate: usize,
    pub attn_dim: usize,
    pub n_queries: usize,
    pub text_conv_blocks: usize,
    pub text_intermediate: usize,
    pub attn_blocks: usize,
    pub filter: usize,
    pub heads: usize,
    pub conv_kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub segment_len: usize,
    pub lambda_recon: f64,
    pub lambda_adv: f64,
    pub lambda_fm: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub lr: f64,
    pub halve_every: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub k_e: usize,
    pub p_uncond: f64,
    pub sigma_min: f64,
    pub crop_min_seconds: f64,
    pub crop_max_seconds: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationTrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub span_min: f64,
    pub span_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDefaults {
    pub nfe: usize,
    pub cfg_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub dtype: Precision,
    pub vocab_size: usize,
    pub mel: MelConfig,
    pub autoencoder: AutoencoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub ttl: TtlConfig,
    pub duration: DurationConfig,
    pub ae_train: AeTrainConfig,
    pub flow_train: FlowTrainConfig,
    pub duration_train: DurationTrainConfig,
    pub sampler: SamplerDefaults,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            dtype: Precision::F32,
            vocab_size: crate::text::VOCAB_SIZE,
            mel: MelConfig::primary(),
            autoencoder: AutoencoderConfig {
                latent_dim: 24,
                enc_width: 512,
                enc_intermediate: 2048,
                enc_blocks: 10,
                enc_kernel: 7,
                dec_width: 512,
                dec_intermediate: 2048,
                dec_kernel: 7,
                dec_dilations: vec![1, 2, 4, 1, 2, 4, 1, 1, 1, 1],
                dec_head_kernel: 3,
                dec_head_hidden: 2048,
                bn_eps: 1e-5,
                bn_momentum: 0.1,
                ln_eps: 1e-6,
            },
            discriminator: DiscriminatorConfig {
                mpd_periods: vec![2, 3, 5, 7, 11],
                mpd_channels: vec![16, 64, 256, 512, 512, 1],
                mpd_kernel: 5,
                mpd_stride: 3,
                mrd_ffts: vec![512, 1024, 2048],
                mrd_channels: 16,
                recon_ffts: vec![1024, 2048, 4096],
                recon_mels: vec![64, 128, 128],
                leaky_slope: 0.1,
            },
            ttl: TtlConfig {
                k_c: 6,
                ref_hidden: 128,
                ref_blocks: 6,
                ref_intermediate: 512,
                n_ref_tokens: 50,
                text_hidden: 128,
                text_conv_blocks: 6,
                text_intermediate: 512,
                text_attn_blocks: 4,
                text_filter: 512,
                text_heads: 4,
                text_cross_layers: 2,
                cross_heads: 4,
                n_null_text: 1,
                conv_kernel: 5,
                vf_hidden: 256,
                vf_intermediate: 1024,
                vf_main_blocks: 4,
                vf_dilations: vec![1, 2, 4, 8],
                vf_std_blocks: 2,
                vf_tail_blocks: 4,
                vf_heads: 4,
                vf_text_rotary: true,
                time_dim: 64,
                rope_base: 10000.0,
                ln_eps: 1e-6,
            },
            duration: DurationConfig {
                hidden: 64,
                ref_blocks: 4,
                ref_intermediate: 256,
                attn_dim: 16,
                n_queries: 8,
                text_conv_blocks: 6,
                text_intermediate: 256,
                attn_blocks: 2,
                filter: 256,
                heads: 2,
                conv_kernel: 5,
            },
            ae_train: AeTrainConfig {
                lr: 2e-4,
                betas: (0.8, 0.99),
                weight_decay: 0.01,
                batch_size: 128,
                segment_len: 8192,
                lambda_recon: 45.0,
                lambda_adv: 1.0,
                lambda_fm: 0.1,
                steps: 1_500_000,
                seed: 0,
            },
            flow_train: FlowTrainConfig {
                lr: 5e-4,
                halve_every: 300_000,
                betas: (0.9, 0.999),
                weight_decay: 0.01,
                batch_size: 64,
                k_e: 4,
                p_uncond: 0.05,
                sigma_min: 1e-8,
                crop_min_seconds: 0.2,
                crop_max_seconds: 9.0,
                steps: 700_000,
                seed: 0,
            },
            duration_train: DurationTrainConfig {
                lr: 5e-4,
                betas: (0.9, 0.999),
                weight_decay: 0.01,
                batch_size: 128,
                steps: 3000,
                span_min: 0.05,
                span_max: 0.95,
                seed: 0,
            },
            sampler: SamplerDefaults {
                nfe: 32,
                cfg_scale: 3.0,
            },
        }
    }

    /// Desk-scale preset: same topology, narrow layers, fewer blocks.
    pub fn toy() -> Self {
        let mut c = Self::paper();
        c.preset = Preset::Toy;
        c.mel.n_mels = 16;
        c.autoencoder = AutoencoderConfig {
            latent_dim: 4,
            enc_width: 32,
            enc_intermediate: 64,
            enc_blocks: 2,
            enc_kernel: 7,
            dec_width: 32,
            dec_intermediate: 64,
            dec_kernel: 7,
            dec_dilations: vec![1, 2],
            dec_head_kernel: 3,
            dec_head_hidden: 64,
            ..c.autoencoder
        };
        c.discriminator.mpd_channels = vec![4, 8, 16, 16, 16, 1];
        c.discriminator.mrd_channels = 4;
        c.ttl = TtlConfig {
            k_c: 2,
            ref_hidden: 32,
            ref_blocks: 1,
            ref_intermediate: 64,
            n_ref_tokens: 8,
            text_hidden: 32,
            text_conv_blocks: 1,
            text_intermediate: 64,
            text_attn_blocks: 1,
            text_filter: 64,
            text_heads: 2,
            text_cross_layers: 2,
            cross_heads: 2,
            n_null_text: 1,
            conv_kernel: 5,
            vf_hidden: 64,
            vf_intermediate: 128,
            vf_main_blocks: 2,
            vf_dilations: vec![1, 2],
            vf_std_blocks: 2,
            vf_tail_blocks: 1,
            vf_heads: 2,
            vf_text_rotary: true,
            time_dim: 32,
            ..c.ttl
        };
        c.duration = DurationConfig {
            hidden: 16,
            ref_blocks: 1,
            ref_intermediate: 32,
            attn_dim: 8,
            n_queries: 4,
            text_conv_blocks: 1,
            text_intermediate: 32,
            attn_blocks: 1,
            filter: 32,
            heads: 2,
            conv_kernel: 5,
        };
        c.ae_train.batch_size = 2;
        c.ae_train.lr = 1e-3;
        c.ae_train.steps = 200;
        c.flow_train.batch_size = 16;
        c.flow_train.lr = 2e-3;
        c.flow_train.steps = 2000;
        c.duration_train.batch_size = 16;
        c.duration_train.lr = 2e-3;
        c.duration_train.steps = 1000;
        c
    }

    /// A few-thousand-parameter preset used for finite-difference checks.
    pub fn tiny() -> Self {
        let mut c = Self::toy();
        c.preset = Preset::Tiny;
        c.dtype = Precision::F64;
        c.mel = MelConfig {
            fft_size: 64,
            hop_size: 16,
            win_size: 64,
            n_mels: 4,
            ..c.mel
        };
        c.autoencoder = AutoencoderConfig {
            latent_dim: 2,
            enc_width: 4,
            enc_intermediate: 8,
            enc_blocks: 1,
            enc_kernel: 3,
            dec_width: 4,
            dec_intermediate: 8,
            dec_kernel: 3,
            dec_dilations: vec![1, 2],
            dec_head_kernel: 3,
            dec_head_hidden: 8,
            ..c.autoencoder
        };
        c.discriminator = DiscriminatorConfig {
            mpd_periods: vec![2, 3],
            mpd_channels: vec![2, 4, 4, 4, 4, 1],
            mpd_kernel: 3,
            mpd_stride: 2,
            mrd_ffts: vec![32],
            mrd_channels: 2,
            recon_ffts: vec![32, 64],
            recon_mels: vec![4, 6],
            leaky_slope: 0.1,
        };
        c.ttl = TtlConfig {
            k_c: 2,
            ref_hidden: 8,
            ref_blocks: 1,
            ref_intermediate: 16,
            n_ref_tokens: 3,
            text_hidden: 8,
            text_conv_blocks: 1,
            text_intermediate: 16,
            text_attn_blocks: 1,
            text_filter: 16,
            text_heads: 2,
            text_cross_layers: 1,
            cross_heads: 2,
            n_null_text: 1,
            conv_kernel: 3,
            vf_hidden: 8,
            vf_intermediate: 12,
            vf_main_blocks: 1,
            vf_dilations: vec![1, 2],
            vf_std_blocks: 2,
            vf_tail_blocks: 1,
            vf_heads: 2,
            vf_text_rotary: true,
            time_dim: 8,
            ..c.ttl
        };
        c.duration = DurationConfig {
            hidden: 8,
            ref_blocks: 1,
            ref_intermediate: 16,
            attn_dim: 4,
            n_queries: 2,
            text_conv_blocks: 1,
            text_intermediate: 16,
            attn_blocks: 1,
            filter: 16,
            heads: 2,
            conv_kernel: 3,
        };
        c
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
            Preset::Tiny => Self::tiny(),
        }
    }

    /// Parses a TOML config: `preset` selects the base, every other key
    /// overrides the matching field.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let overrides: toml::Table = src
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match overrides.get("preset") {
            None => Preset::Paper,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("preset: {e}")))?,
        };
        let base = Self::from_preset(preset);
        let mut merged = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(format!("serializing preset: {e}")))?;
        merge(&mut merged, &toml::Value::Table(overrides), "")?;
        let cfg: ModelConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        let ae = &self.autoencoder;
        for (name, k) in [
            ("enc_kernel", ae.enc_kernel),
            ("dec_kernel", ae.dec_kernel),
            ("ttl.conv_kernel", self.ttl.conv_kernel),
            ("duration.conv_kernel", self.duration.conv_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if ae
            .dec_dilations
            .iter()
            .chain(&self.ttl.vf_dilations)
            .any(|&d| d == 0)
        {
            return Err(Error::Config("dilations must be >= 1".into()));
        }
        if self.ttl.k_c == 0 {
            return Err(Error::Config("k_c must be >= 1".into()));
        }
        if self.ttl.text_hidden % self.ttl.text_heads != 0
            || self.ttl.ref_hidden % self.ttl.cross_heads != 0
            || self.ttl.vf_hidden % self.ttl.vf_heads != 0
            || self.duration.hidden % self.duration.heads != 0
        {
            return Err(Error::Config(
                "attention width not divisible by heads".into(),
            ));
        }
        if self.ttl.ref_hidden != self.ttl.text_hidden {
            return Err(Error::Config(
                "reference and text encoders must share a width (reference keys are shared)".into(),
            ));
        }
        if self.duration.hidden % self.duration.n_queries != 0 {
            return Err(Error::Config(
                "duration.hidden must be divisible by duration.n_queries".into(),
            ));
        }
        let d = &self.discriminator;
        if d.mpd_channels.last() != Some(&1) {
            return Err(Error::Config("last MPD channel count must be 1".into()));
        }
        if d.recon_ffts.len() != d.recon_mels.len() {
            return Err(Error::Config(
                "recon_ffts and recon_mels differ in length".into(),
            ));
        }
        if self.flow_train.k_e == 0 {
            return Err(Error::Config("k_e must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.dtype.dtype()
    }

    /// Channels seen by the text-to-latent module (`K_c * C`).
    pub fn compressed_channels(&self) -> usize {
        self.ttl.k_c * self.autoencoder.latent_dim
    }

    /// Latent frames per second before compression.
    pub fn frame_rate(&self) -> f64 {
        self.mel.sample_rate as f64 / self.mel.hop_size as f64
    }

    /// Compressed frames per second.
    pub fn compressed_frame_rate(&self) -> f64 {
        self.frame_rate() / self.ttl.k_c as f64
    }

    /// Audio samples produced per compressed latent frame.
    pub fn samples_per_compressed_frame(&self) -> usize {
        self.ttl.k_c * self.mel.hop_size
    }

    /// Hex SHA-256 of the canonical JSON encoding; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut toml::Value, over: &toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                if path.is_empty() && k == "preset" {
                    continue;
                }
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown config key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}
