//! Reference encoder, character-level text encoder and vector-field
//! estimator.
//!
//! Batched tensors are time-major: compressed latents `[B, T, k_c * C]`,
//! text ids `[B, L]` (u32), masks `[B, T, 1]` with 1 on valid positions.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::config::{ModelConfig, TtlConfig};
use crate::error::{Error, Result};
use crate::latent_ops::CompressedLatent;
use crate::nn::{
    length_mask, ConvNeXtBlock, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore, Padding,
    Rotary, Scope, SelfAttentionBlock,
};
use crate::text::CharacterSequence;

const EMBED_STD: f64 = 0.02;

/// Sinusoidal embedding of diffusion time `t` in `[0, 1]`, scaled by 1000,
/// laid out as `[sin, cos]`.
pub fn time_embedding_values(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let step = if half > 1 {
        10_000f64.ln() / (half - 1) as f64
    } else {
        0.0
    };
    let arg = |i: usize| 1000.0 * t * (-(i as f64) * step).exp();
    let mut v: Vec<f64> = (0..half).map(|i| arg(i).sin()).collect();
    v.extend((0..half).map(|i| arg(i).cos()));
    v.resize(dim, 0.0);
    v
}

/// `[B, dim]` time embeddings.
pub fn time_embedding(ts: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = ts.iter().flat_map(|&t| time_embedding_values(t, dim)).collect();
    Ok(Tensor::from_vec(v, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Reference summary: shared learnable keys and per-item values, `[B, N, D]`.
#[derive(Debug, Clone)]
pub struct ReferenceSummary {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Encoded text conditioning `[B, L, D]` with its mask.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub states: Tensor,
    pub mask: Tensor,
}

/// Everything the vector-field estimator conditions on.
#[derive(Debug, Clone)]
pub struct Conditions {
    pub text: TextEncoding,
    /// Valid text length per item.
    pub text_lens: Vec<usize>,
    pub reference: ReferenceSummary,
}

impl Conditions {
    pub fn batch(&self) -> usize {
        self.text_lens.len()
    }

    /// Gathers items by index (e.g. repeated for batch expansion).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids = Tensor::from_vec(
            idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            idx.len(),
            &Device::Cpu,
        )?;
        Ok(Self {
            text: TextEncoding {
                states: self.text.states.index_select(&ids, 0)?,
                mask: self.text.mask.index_select(&ids, 0)?,
            },
            text_lens: idx.iter().map(|&i| self.text_lens[i]).collect(),
            reference: ReferenceSummary {
                keys: self.reference.keys.index_select(&ids, 0)?,
                values: self.reference.values.index_select(&ids, 0)?,
            },
        })
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    attn: MultiHeadAttention,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    proj: Linear,
    blocks: Vec<ConvNeXtBlock>,
    queries: Tensor,
    attn1: MultiHeadAttention,
    attn2: MultiHeadAttention,
    in_dim: usize,
}

impl ReferenceEncoder {
    fn new(vs: &Scope, in_dim: usize, c: &TtlConfig) -> Result<Self> {
        let h = c.ref_hidden;
        let scale = 1.0 / c.ref_blocks.max(1) as f64;
        let blocks = (0..c.ref_blocks)
            .map(|i| {
                ConvNeXtBlock::new(
                    &vs.pp(format!("blocks.{i}")),
                    h,
                    c.ref_intermediate,
                    c.conv_kernel,
                    1,
                    Padding::Same,
                    scale,
                    c.ln_eps,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            proj: Linear::new(&vs.pp("proj"), in_dim, h)?,
            blocks,
            queries: vs.param("queries", (c.n_ref_tokens, h), Init::Normal(EMBED_STD))?,
            attn1: MultiHeadAttention::new(&vs.pp("attn1"), h, h, h, c.cross_heads, None)?,
            attn2: MultiHeadAttention::new(&vs.pp("attn2"), h, h, h, c.cross_heads, None)?,
            in_dim,
        })
    }

    /// `[B, T, k_c C]` to reference values `[B, n_ref_tokens, hidden]`.
    pub fn forward(&self, latents: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, c) = latents.dims3()?;
        if c != self.in_dim {
            return Err(Error::Shape(format!(
                "reference encoder expects {} channels, got {c}",
                self.in_dim
            )));
        }
        if t == 0 {
            return Err(Error::EmptyInput("reference"));
        }
        let mut h = self.proj.forward(latents)?.broadcast_mul(mask)?;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(mask))?;
        }
        let (n, d) = self.queries.dims2()?;
        let q = self.queries.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let r1 = (&q + self.attn1.forward(&q, &h, &h, Some(mask), None)?)?;
        Ok((&r1 + self.attn2.forward(&r1, &h, &h, Some(mask), None)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    blocks: Vec<ConvNeXtBlock>,
    attn: Vec<SelfAttentionBlock>,
    cross: Vec<CrossAttention>,
    rope_base: f64,
}

impl TextEncoder {
    fn new(vs: &Scope, vocab: usize, c: &TtlConfig) -> Result<Self> {
        let h = c.text_hidden;
        let scale = 1.0 / c.text_conv_blocks.max(1) as f64;
        let blocks = (0..c.text_conv_blocks)
            .map(|i| {
                ConvNeXtBlock::new(
                    &vs.pp(format!("blocks.{i}")),
                    h,
                    c.text_intermediate,
                    c.conv_kernel,
                    1,
                    Padding::Same,
                    scale,
                    c.ln_eps,
                )
            })
            .collect::<Result<_>>()?;
        let attn = (0..c.text_attn_blocks)
            .map(|i| {
                SelfAttentionBlock::new(
                    &vs.pp(format!("attn.{i}")),
                    h,
                    c.text_filter,
                    c.text_heads,
                    c.ln_eps,
                )
            })
            .collect::<Result<_>>()?;
        let cross = (0..c.text_cross_layers)
            .map(|i| {
                let s = vs.pp(format!("cross.{i}"));
                Ok(CrossAttention {
                    attn: MultiHeadAttention::new(
                        &s.pp("attn"),
                        h,
                        c.ref_hidden,
                        h,
                        c.cross_heads,
                        None,
                    )?,
                    norm: LayerNorm::new(&s.pp("norm"), h, c.ln_eps)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: vs.param("embed", (vocab, h), Init::Normal(EMBED_STD))?,
            blocks,
            attn,
            cross,
            rope_base: c.rope_base,
        })
    }

    /// `[B, L]` ids to speaker-adapted states `[B, L, hidden]`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor, reference: &ReferenceSummary) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        if l == 0 {
            return Err(Error::EmptyInput("text"));
        }
        let d = self.embed.dim(1)?;
        let mut h = self
            .embed
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, d))?
            .broadcast_mul(mask)?;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(mask))?;
        }
        if let Some(first) = self.attn.first() {
            let rot = Rotary::sequential(b, l, first.head_dim(), self.rope_base, h.dtype(), h.device())?;
            for blk in &self.attn {
                h = blk.forward(&h, Some(mask), &rot)?;
            }
        }
        for c in &self.cross {
            let a = c
                .attn
                .forward(&h, &reference.keys, &reference.values, None, None)?;
            h = c.norm.forward(&(h + a)?)?.broadcast_mul(mask)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
enum VfLayer {
    Conv(ConvNeXtBlock),
    Time(Linear),
    Text(CrossAttention),
    Ref(CrossAttention),
}

#[derive(Debug, Clone)]
pub struct VectorFieldEstimator {
    input: Linear,
    layers: Vec<VfLayer>,
    output: Linear,
    time_dim: usize,
    text_rotary: bool,
    rope_base: f64,
    heads: usize,
    in_dim: usize,
}

impl VectorFieldEstimator {
    fn new(vs: &Scope, in_dim: usize, c: &TtlConfig) -> Result<Self> {
        let h = c.vf_hidden;
        let n_conv = c.vf_main_blocks * (c.vf_dilations.len() + c.vf_std_blocks) + c.vf_tail_blocks;
        let scale = 1.0 / n_conv.max(1) as f64;
        let conv = |s: Scope, dil: usize| {
            ConvNeXtBlock::new(&s, h, c.vf_intermediate, c.conv_kernel, dil, Padding::Same, scale, c.ln_eps)
                .map(VfLayer::Conv)
        };
        let cross = |s: Scope, kv: usize| -> Result<CrossAttention> {
            Ok(CrossAttention {
                attn: MultiHeadAttention::new(&s.pp("attn"), h, kv, h, c.vf_heads, None)?,
                norm: LayerNorm::new(&s.pp("norm"), h, c.ln_eps)?,
            })
        };
        let mut layers = Vec::new();
        for m in 0..c.vf_main_blocks {
            let s = vs.pp(format!("main.{m}"));
            for (i, &d) in c.vf_dilations.iter().enumerate() {
                layers.push(conv(s.pp(format!("dilated.{i}")), d)?);
            }
            layers.push(VfLayer::Time(Linear::new(&s.pp("time"), c.time_dim, h)?));
            let std_before = c.vf_std_blocks / 2;
            for i in 0..std_before {
                layers.push(conv(s.pp(format!("std.{i}")), 1)?);
            }
            layers.push(VfLayer::Text(cross(s.pp("text"), c.text_hidden)?));
            for i in std_before..c.vf_std_blocks {
                layers.push(conv(s.pp(format!("std.{i}")), 1)?);
            }
            layers.push(VfLayer::Ref(cross(s.pp("ref"), c.ref_hidden)?));
        }
        for i in 0..c.vf_tail_blocks {
            layers.push(conv(vs.pp(format!("tail.{i}")), 1)?);
        }
        Ok(Self {
            input: Linear::new(&vs.pp("input"), in_dim, h)?,
            layers,
            output: Linear::new(&vs.pp("output"), h, in_dim)?,
            time_dim: c.time_dim,
            text_rotary: c.vf_text_rotary,
            rope_base: c.rope_base,
            heads: c.vf_heads,
            in_dim,
        })
    }

    /// Rotary tables placing latent frame `t` at text position `t * L / T`.
    fn text_rotary(&self, cond: &Conditions, frames: usize, dtype: DType) -> Result<(Rotary, Rotary)> {
        let l = cond.text.states.dim(1)?;
        let hd = self.layers_head_dim();
        let q: Vec<Vec<f64>> = cond
            .text_lens
            .iter()
            .map(|&len| {
                let r = len as f64 / frames.max(1) as f64;
                (0..frames).map(|t| t as f64 * r).collect()
            })
            .collect();
        let rq = Rotary::new(&q, hd, self.rope_base, dtype, &Device::Cpu)?;
        let rk = Rotary::sequential(cond.batch(), l, hd, self.rope_base, dtype, &Device::Cpu)?;
        Ok((rq, rk))
    }

    fn layers_head_dim(&self) -> usize {
        self.input.out_dim() / self.heads
    }

    /// Predicts the field for noisy latents `z_t` `[B, T, k_c C]`.
    pub fn forward(&self, z_t: &Tensor, mask: &Tensor, t: &[f64], cond: &Conditions) -> Result<Tensor> {
        let (b, frames, c) = z_t.dims3()?;
        if c != self.in_dim {
            return Err(Error::Shape(format!(
                "vector field expects {} channels, got {c}",
                self.in_dim
            )));
        }
        if t.len() != b || cond.batch() != b {
            return Err(Error::Shape(format!(
                "batch mismatch: latents {b}, times {}, conditions {}",
                t.len(),
                cond.batch()
            )));
        }
        let dtype = z_t.dtype();
        let temb = time_embedding(t, self.time_dim, dtype)?.unsqueeze(1)?;
        let rot = if self.text_rotary {
            Some(self.text_rotary(cond, frames, dtype)?)
        } else {
            None
        };
        let mut h = self.input.forward(z_t)?.broadcast_mul(mask)?;
        for layer in &self.layers {
            h = match layer {
                VfLayer::Conv(blk) => blk.forward(&h, Some(mask))?,
                VfLayer::Time(lin) => h.broadcast_add(&lin.forward(&temb)?)?.broadcast_mul(mask)?,
                VfLayer::Text(x) => {
                    let q = x.norm.forward(&h)?;
                    let s = &cond.text.states;
                    let a = x.attn.forward(
                        &q,
                        s,
                        s,
                        Some(&cond.text.mask),
                        rot.as_ref().map(|(a, b)| (a, b)),
                    )?;
                    (h + a)?.broadcast_mul(mask)?
                }
                VfLayer::Ref(x) => {
                    let q = x.norm.forward(&h)?;
                    let r = &cond.reference;
                    let a = x.attn.forward(&q, &r.keys, &r.values, None, None)?;
                    (h + a)?.broadcast_mul(mask)?
                }
            };
        }
        Ok(self.output.forward(&h)?.broadcast_mul(mask)?)
    }
}

/// The full text-to-latent module: three networks, the shared reference
/// keys and the learnable null conditions.
#[derive(Debug, Clone)]
pub struct TextToLatent {
    pub reference_encoder: ReferenceEncoder,
    pub text_encoder: TextEncoder,
    pub vector_field: VectorFieldEstimator,
    ref_keys: Tensor,
    null_text: Tensor,
    null_ref_values: Tensor,
    store: ParamStore,
    encoder_items: Arc<AtomicUsize>,
    latent_channels: usize,
}

impl TextToLatent {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_store(cfg, ParamStore::new(cfg.dtype(), seed))
    }

    pub fn with_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        let c = &cfg.ttl;
        let kc = cfg.compressed_channels();
        let root = store.root();
        Ok(Self {
            reference_encoder: ReferenceEncoder::new(&root.pp("ref_encoder"), kc, c)?,
            text_encoder: TextEncoder::new(&root.pp("text_encoder"), cfg.vocab_size, c)?,
            vector_field: VectorFieldEstimator::new(&root.pp("vf"), kc, c)?,
            ref_keys: root.param("ref_keys", (c.n_ref_tokens, c.ref_hidden), Init::Normal(EMBED_STD))?,
            null_text: root.param("null.text", (c.n_null_text, c.text_hidden), Init::Normal(EMBED_STD))?,
            null_ref_values: root.param(
                "null.ref_values",
                (c.n_ref_tokens, c.ref_hidden),
                Init::Normal(EMBED_STD),
            )?,
            store,
            encoder_items: Arc::new(AtomicUsize::new(0)),
            latent_channels: kc,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Number of items passed through the condition encoders so far.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_items.load(Ordering::SeqCst)
    }

    pub fn reset_encoder_calls(&self) {
        self.encoder_items.store(0, Ordering::SeqCst);
    }

    fn keys_for(&self, b: usize) -> Result<Tensor> {
        let (n, d) = self.ref_keys.dims2()?;
        Ok(self.ref_keys.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?)
    }

    pub fn encode_reference_batch(&self, latents: &Tensor, mask: &Tensor) -> Result<ReferenceSummary> {
        let values = self.reference_encoder.forward(latents, mask)?;
        Ok(ReferenceSummary {
            keys: self.keys_for(values.dim(0)?)?,
            values,
        })
    }

    /// Encodes reference and text for a batch. Counts one encoder call per item.
    pub fn encode_conditions(
        &self,
        ids: &Tensor,
        text_lens: &[usize],
        ref_latents: &Tensor,
        ref_mask: &Tensor,
    ) -> Result<Conditions> {
        let (b, l) = ids.dims2()?;
        if text_lens.len() != b || ref_latents.dim(0)? != b {
            return Err(Error::Shape("condition batch sizes disagree".into()));
        }
        if text_lens.contains(&0) {
            return Err(Error::EmptyInput("text"));
        }
        self.encoder_items.fetch_add(b, Ordering::SeqCst);
        let reference = self.encode_reference_batch(ref_latents, ref_mask)?;
        let mask = length_mask(text_lens, l, ref_latents.dtype())?;
        let states = self.text_encoder.forward(ids, &mask, &reference)?;
        Ok(Conditions {
            text: TextEncoding { states, mask },
            text_lens: text_lens.to_vec(),
            reference,
        })
    }

    /// Learnable placeholders `([n_null_text, D], [n_ref_tokens, D])`.
    pub fn null_conditions(&self) -> (Tensor, Tensor) {
        (self.null_text.clone(), self.null_ref_values.clone())
    }

    /// Fully unconditional conditions for a batch of `b` items.
    pub fn null_batch(&self, b: usize) -> Result<Conditions> {
        let (n, d) = self.null_text.dims2()?;
        let states = self.null_text.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let (r, rd) = self.null_ref_values.dims2()?;
        let values = self
            .null_ref_values
            .unsqueeze(0)?
            .broadcast_as((b, r, rd))?
            .contiguous()?;
        Ok(Conditions {
            text: TextEncoding {
                states,
                mask: Tensor::ones((b, n, 1), self.null_text.dtype(), &Device::Cpu)?,
            },
            text_lens: vec![n; b],
            reference: ReferenceSummary {
                keys: self.keys_for(b)?,
                values,
            },
        })
    }

    /// Replaces the text and reference of items with `drop[i]` by the null
    /// placeholders.
    pub fn drop_conditions(&self, cond: &Conditions, drop: &[bool]) -> Result<Conditions> {
        let b = cond.batch();
        if drop.len() != b {
            return Err(Error::Shape("drop mask length differs from batch".into()));
        }
        if !drop.iter().any(|&d| d) {
            return Ok(cond.clone());
        }
        let (n, d) = self.null_text.dims2()?;
        let l = cond.text.states.dim(1)?.max(n);
        let dtype = cond.text.states.dtype();
        let pad_to = |t: &Tensor, len: usize| -> Result<Tensor> {
            let cur = t.dim(0)?;
            Ok(if cur < len {
                t.pad_with_zeros(0, 0, len - cur)?
            } else {
                t.clone()
            })
        };
        let mut states = Vec::with_capacity(b);
        let mut values = Vec::with_capacity(b);
        let mut lens = Vec::with_capacity(b);
        for (i, &dr) in drop.iter().enumerate() {
            if dr {
                states.push(pad_to(&self.null_text, l)?);
                values.push(self.null_ref_values.clone());
                lens.push(n);
            } else {
                states.push(pad_to(&cond.text.states.get(i)?, l)?);
                values.push(cond.reference.values.get(i)?);
                lens.push(cond.text_lens[i]);
            }
        }
        debug_assert_eq!(states[0].dim(1)?, d);
        Ok(Conditions {
            text: TextEncoding {
                states: Tensor::stack(&states, 0)?,
                mask: length_mask(&lens, l, dtype)?,
            },
            text_lens: lens,
            reference: ReferenceSummary {
                keys: cond.reference.keys.clone(),
                values: Tensor::stack(&values, 0)?,
            },
        })
    }

    /// Single-utterance reference summary `[n_ref_tokens, D]`.
    pub fn encode_reference(&self, reference: &CompressedLatent) -> Result<ReferenceSummary> {
        let x = reference.to_batch()?.to_dtype(self.store.dtype())?;
        let mask = Tensor::ones((1, x.dim(1)?, 1), x.dtype(), &Device::Cpu)?;
        let r = self.encode_reference_batch(&x, &mask)?;
        Ok(ReferenceSummary {
            keys: r.keys.squeeze(0)?,
            values: r.values.squeeze(0)?,
        })
    }

    /// Single-utterance text encoding `[L, D]`.
    pub fn encode_text(&self, seq: &CharacterSequence, reference: &ReferenceSummary) -> Result<TextEncoding> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("text"));
        }
        let ids = Tensor::from_vec(seq.ids.clone(), (1, seq.len()), &Device::Cpu)?;
        let mask = Tensor::ones((1, seq.len(), 1), self.store.dtype(), &Device::Cpu)?;
        let r = ReferenceSummary {
            keys: reference.keys.unsqueeze(0)?,
            values: reference.values.unsqueeze(0)?,
        };
        let states = self.text_encoder.forward(&ids, &mask, &r)?;
        Ok(TextEncoding {
            states: states.squeeze(0)?,
            mask: mask.squeeze(0)?,
        })
    }

    /// Single-utterance field `[k_c C, T]` for `z_t` `[k_c C, T]`.
    pub fn estimate_vector_field(
        &self,
        z_t: &Tensor,
        text: &TextEncoding,
        reference: &ReferenceSummary,
        t: f64,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
        }
        let z = z_t.t()?.unsqueeze(0)?.contiguous()?;
        let mask = Tensor::ones((1, z.dim(1)?, 1), z.dtype(), &Device::Cpu)?;
        let cond = Conditions {
            text: TextEncoding {
                states: text.states.unsqueeze(0)?,
                mask: text.mask.unsqueeze(0)?,
            },
            text_lens: vec![text.states.dim(0)?],
            reference: ReferenceSummary {
                keys: reference.keys.unsqueeze(0)?,
                values: reference.values.unsqueeze(0)?,
            },
        };
        let v = self.vector_field.forward(&z, &mask, &[t], &cond)?;
        Ok(v.squeeze(0)?.t()?.contiguous()?)
    }
}
