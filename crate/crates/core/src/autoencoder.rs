//! Latent encoder (log-mel to low-dimensional latents) and causal latent
//! decoder (latents to waveform), including a streaming decoder.
//!
//! Tensors are time-major: mel `[B, T, n_mels]`, latents `[B, T, C]`,
//! waveforms `[B, T * hop]`.

use candle_core::{DType, Device, Tensor};

use crate::audio::{extract_logmel, AudioWaveform, MelConfig};
use crate::config::{AutoencoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Conv1d, ConvNeXtBlock, LayerNorm, Linear, Mode, PRelu, Padding, ParamStore, Scope,
};

/// Latent sequence `[C, T]` with its frame rate.
#[derive(Debug, Clone)]
pub struct Latent {
    pub values: Tensor,
    pub frame_rate: f64,
}

impl Latent {
    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.dims()[1]
    }

    /// `[1, T, C]` view for the batched API.
    pub fn to_batch(&self) -> Result<Tensor> {
        Ok(self.values.t()?.unsqueeze(0)?.contiguous()?)
    }

    /// Takes item 0 of a `[B, T, C]` tensor.
    pub fn from_batch(t: &Tensor, frame_rate: f64) -> Result<Self> {
        Ok(Self {
            values: t.get(0)?.t()?.contiguous()?,
            frame_rate,
        })
    }
}

/// Converts a `[n_mels, T]` spectrogram into a `[1, T, n_mels]` tensor.
pub fn mel_tensor(values: &ndarray::Array2<f32>, dtype: DType) -> Result<Tensor> {
    let (m, t) = values.dim();
    let flat: Vec<f32> = values.t().iter().copied().collect();
    Ok(Tensor::from_vec(flat, (1, t, m), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct LatentEncoder {
    input: Conv1d,
    bn: BatchNorm,
    blocks: Vec<ConvNeXtBlock>,
    proj: Linear,
    norm: LayerNorm,
    n_mels: usize,
}

impl LatentEncoder {
    pub fn new(vs: &Scope, n_mels: usize, c: &AutoencoderConfig) -> Result<Self> {
        let scale = 1.0 / c.enc_blocks.max(1) as f64;
        let blocks = (0..c.enc_blocks)
            .map(|i| {
                ConvNeXtBlock::new(
                    &vs.pp(format!("blocks.{i}")),
                    c.enc_width,
                    c.enc_intermediate,
                    c.enc_kernel,
                    1,
                    Padding::Same,
                    scale,
                    c.ln_eps,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Conv1d::new(
                &vs.pp("input"),
                n_mels,
                c.enc_width,
                c.enc_kernel,
                Padding::Same,
            )?,
            bn: BatchNorm::new(&vs.pp("bn"), c.enc_width, c.bn_eps, c.bn_momentum)?,
            blocks,
            proj: Linear::new(&vs.pp("proj"), c.enc_width, c.latent_dim)?,
            norm: LayerNorm::new(&vs.pp("norm"), c.latent_dim, c.ln_eps)?,
            n_mels,
        })
    }

    /// `[B, T, n_mels]` to `[B, T, latent_dim]`.
    pub fn forward(&self, mel: &Tensor, mode: Mode) -> Result<Tensor> {
        let m = mel.dim(2)?;
        if m != self.n_mels {
            return Err(Error::Shape(format!(
                "encoder expects {} mel channels, got {m}",
                self.n_mels
            )));
        }
        let mut h = self.bn.forward(&self.input.forward(mel)?, mode)?;
        for b in &self.blocks {
            h = b.forward(&h, None)?;
        }
        self.norm.forward(&self.proj.forward(&h)?)
    }
}

/// Left-context buffers of the causal decoder, one per convolution.
#[derive(Debug, Clone)]
pub struct StreamState {
    input: Tensor,
    blocks: Vec<Tensor>,
    head: Tensor,
    signature: Vec<usize>,
    frames_seen: usize,
}

impl StreamState {
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }
}

#[derive(Debug, Clone)]
pub struct LatentDecoder {
    input: Conv1d,
    bn_in: BatchNorm,
    blocks: Vec<ConvNeXtBlock>,
    bn_out: BatchNorm,
    head: Conv1d,
    act: PRelu,
    out: Linear,
    latent_dim: usize,
    width: usize,
    hop: usize,
}

impl LatentDecoder {
    pub fn new(vs: &Scope, hop: usize, c: &AutoencoderConfig) -> Result<Self> {
        let scale = 1.0 / c.dec_dilations.len().max(1) as f64;
        let blocks = c
            .dec_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                ConvNeXtBlock::new(
                    &vs.pp(format!("blocks.{i}")),
                    c.dec_width,
                    c.dec_intermediate,
                    c.dec_kernel,
                    d,
                    Padding::Causal,
                    scale,
                    c.ln_eps,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Conv1d::new(
                &vs.pp("input"),
                c.latent_dim,
                c.dec_width,
                c.dec_kernel,
                Padding::Causal,
            )?,
            bn_in: BatchNorm::new(&vs.pp("bn_in"), c.dec_width, c.bn_eps, c.bn_momentum)?,
            blocks,
            bn_out: BatchNorm::new(&vs.pp("bn_out"), c.dec_width, c.bn_eps, c.bn_momentum)?,
            head: Conv1d::new(
                &vs.pp("head"),
                c.dec_width,
                c.dec_head_hidden,
                c.dec_head_kernel,
                Padding::Causal,
            )?,
            act: PRelu::new(&vs.pp("act"), c.dec_head_hidden)?,
            out: Linear::new(&vs.pp("out"), c.dec_head_hidden, hop)?,
            latent_dim: c.latent_dim,
            width: c.dec_width,
            hop,
        })
    }

    /// Total left context in frames: the sum of `(kernel - 1) * dilation`.
    pub fn receptive_field(&self) -> usize {
        self.input.context()
            + self.blocks.iter().map(|b| b.context()).sum::<usize>()
            + self.head.context()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    fn check_channels(&self, z: &Tensor) -> Result<()> {
        let c = z.dim(2)?;
        if c != self.latent_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    fn finish(&self, frames: &Tensor) -> Result<Tensor> {
        let (b, t, _) = frames.dims3()?;
        let y = self.out.forward(&self.act.forward(frames)?)?;
        Ok(y.reshape((b, t * self.hop))?)
    }

    /// `[B, T, C]` to `[B, T * hop]`.
    pub fn forward(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_channels(z)?;
        let mut h = self.bn_in.forward(&self.input.forward(z)?, mode)?;
        for b in &self.blocks {
            h = b.forward(&h, None)?;
        }
        let h = self.bn_out.forward(&h, mode)?;
        self.finish(&self.head.forward(&h)?)
    }

    fn signature(&self) -> Vec<usize> {
        let mut s = vec![self.latent_dim, self.width, self.input.context()];
        s.extend(self.blocks.iter().map(|b| b.context()));
        s.push(self.head.context());
        s
    }

    pub fn init_stream(&self, batch: usize, dtype: DType) -> Result<StreamState> {
        let zeros = |ctx: usize, ch: usize| Tensor::zeros((batch, ctx, ch), dtype, &Device::Cpu);
        Ok(StreamState {
            input: zeros(self.input.context(), self.latent_dim)?,
            blocks: self
                .blocks
                .iter()
                .map(|b| zeros(b.context(), self.width))
                .collect::<candle_core::Result<_>>()?,
            head: zeros(self.head.context(), self.width)?,
            signature: self.signature(),
            frames_seen: 0,
        })
    }

    /// Decodes one chunk `[B, T, C]` in eval mode; outputs depend only on
    /// the chunk and the frames already fed through `state`.
    pub fn forward_stream(
        &self,
        state: StreamState,
        chunk: &Tensor,
    ) -> Result<(Tensor, StreamState)> {
        if state.signature != self.signature() {
            return Err(Error::StreamState(
                "state was created for a different decoder".into(),
            ));
        }
        self.check_channels(chunk)?;
        let (b, t, _) = chunk.dims3()?;
        if t == 0 {
            return Ok((Tensor::zeros((b, 0), chunk.dtype(), &Device::Cpu)?, state));
        }
        let (h, input) = self.input.forward_stream(chunk, &state.input)?;
        let mut h = self.bn_in.forward(&h, Mode::Eval)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (blk, hist) in self.blocks.iter().zip(&state.blocks) {
            let (y, nh) = blk.forward_stream(&h, hist)?;
            h = y;
            blocks.push(nh);
        }
        let h = self.bn_out.forward(&h, Mode::Eval)?;
        let (h, head) = self.head.forward_stream(&h, &state.head)?;
        let out = self.finish(&h)?;
        Ok((
            out,
            StreamState {
                input,
                blocks,
                head,
                signature: state.signature,
                frames_seen: state.frames_seen + t,
            },
        ))
    }
}

/// Encoder and decoder sharing one parameter store (`encoder.*`, `decoder.*`).
#[derive(Debug, Clone)]
pub struct SpeechAutoencoder {
    pub encoder: LatentEncoder,
    pub decoder: LatentDecoder,
    store: ParamStore,
    mel: MelConfig,
}

impl SpeechAutoencoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_store(cfg, ParamStore::new(cfg.dtype(), seed))
    }

    pub fn with_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        Ok(Self {
            encoder: LatentEncoder::new(&store.scope("encoder"), cfg.mel.n_mels, &cfg.autoencoder)?,
            decoder: LatentDecoder::new(
                &store.scope("decoder"),
                cfg.mel.hop_size,
                &cfg.autoencoder,
            )?,
            store,
            mel: cfg.mel.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn frame_rate(&self) -> f64 {
        self.mel.sample_rate as f64 / self.mel.hop_size as f64
    }

    /// Log-mel `[n_mels, T]` to a latent `[C, T]` (eval mode).
    pub fn encode(&self, mel: &crate::audio::MelSpectrogram) -> Result<Latent> {
        let x = mel_tensor(&mel.values, self.dtype())?;
        let z = self.encoder.forward(&x, Mode::Eval)?;
        Latent::from_batch(&z, self.frame_rate())
    }

    pub fn decode(&self, latent: &Latent) -> Result<AudioWaveform> {
        let y = self.decoder.forward(&latent.to_batch()?, Mode::Eval)?;
        self.to_audio(&y)
    }

    pub fn init_stream(&self) -> Result<StreamState> {
        self.decoder.init_stream(1, self.dtype())
    }

    pub fn decode_streaming(
        &self,
        state: StreamState,
        chunk: &Latent,
    ) -> Result<(AudioWaveform, StreamState)> {
        let (y, state) = self.decoder.forward_stream(state, &chunk.to_batch()?)?;
        Ok((self.to_audio(&y)?, state))
    }

    /// Mel extraction, encoding and decoding in sequence.
    pub fn reconstruct(&self, audio: &AudioWaveform) -> Result<AudioWaveform> {
        let mel = extract_logmel(audio, &self.mel)?;
        self.decode(&self.encode(&mel)?)
    }

    fn to_audio(&self, y: &Tensor) -> Result<AudioWaveform> {
        let samples: Vec<f32> = y.get(0)?.to_dtype(DType::F32)?.to_vec1()?;
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("decoded waveform"));
        }
        Ok(AudioWaveform {
            samples,
            sample_rate: self.mel.sample_rate,
        })
    }
}
