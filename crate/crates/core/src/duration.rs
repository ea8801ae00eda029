//! Utterance-level duration predictor: predicts the total number of
//! compressed latent frames from text and a reference clip.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DurationConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    length_mask, softplus, ConvNeXtBlock, Init, Linear, MultiHeadAttention, PRelu, ParamStore,
    Padding, Rotary, Scope, SelfAttentionBlock,
};
use crate::text::CharacterSequence;

/// One training example: characters, the utterance's compressed latent
/// `[T, k_c C]` and its frame count.
#[derive(Debug, Clone)]
pub struct DurationSample {
    pub ids: Vec<u32>,
    pub latent: Tensor,
    pub target_frames: usize,
}

#[derive(Debug, Clone)]
struct DpReferenceEncoder {
    proj: Linear,
    blocks: Vec<ConvNeXtBlock>,
    queries: Tensor,
    attn1: MultiHeadAttention,
    attn2: MultiHeadAttention,
}

impl DpReferenceEncoder {
    fn new(vs: &Scope, in_dim: usize, c: &DurationConfig) -> Result<Self> {
        let scale = 1.0 / c.ref_blocks.max(1) as f64;
        let blocks = (0..c.ref_blocks)
            .map(|i| {
                ConvNeXtBlock::new(
                    &vs.pp(format!("blocks.{i}")),
                    c.hidden,
                    c.ref_intermediate,
                    c.conv_kernel,
                    1,
                    Padding::Same,
                    scale,
                    1e-6,
                )
            })
            .collect::<Result<_>>()?;
        let per_query = c.hidden / c.n_queries;
        Ok(Self {
            proj: Linear::new(&vs.pp("proj"), in_dim, c.hidden)?,
            blocks,
            queries: vs.param("queries", (c.n_queries, c.hidden), Init::Normal(0.02))?,
            attn1: MultiHeadAttention::new(&vs.pp("attn1"), c.hidden, c.hidden, c.attn_dim, c.heads, None)?,
            attn2: MultiHeadAttention::new(
                &vs.pp("attn2"),
                c.attn_dim,
                c.hidden,
                c.attn_dim,
                c.heads,
                Some(per_query),
            )?,
        })
    }

    /// `[B, T, k_c C]` to `[B, hidden]` (query outputs stacked on channels).
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let mut h = self.proj.forward(x)?.broadcast_mul(mask)?;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(mask))?;
        }
        let (n, d) = self.queries.dims2()?;
        let q = self.queries.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let a1 = self.attn1.forward(&q, &h, &h, Some(mask), None)?;
        let a2 = self.attn2.forward(&a1, &h, &h, Some(mask), None)?;
        Ok(a2.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
struct DpTextEncoder {
    embed: Tensor,
    blocks: Vec<ConvNeXtBlock>,
    utterance: Tensor,
    attn: Vec<SelfAttentionBlock>,
    out: Linear,
    rope_base: f64,
}

impl DpTextEncoder {
    fn new(vs: &Scope, vocab: usize, c: &DurationConfig, rope_base: f64) -> Result<Self> {
        let scale = 1.0 / c.text_conv_blocks.max(1) as f64;
        let blocks = (0..c.text_conv_blocks)
            .map(|i| {
                ConvNeXtBlock::new(
                    &vs.pp(format!("blocks.{i}")),
                    c.hidden,
                    c.text_intermediate,
                    c.conv_kernel,
                    1,
                    Padding::Same,
                    scale,
                    1e-6,
                )
            })
            .collect::<Result<_>>()?;
        let attn = (0..c.attn_blocks)
            .map(|i| SelfAttentionBlock::new(&vs.pp(format!("attn.{i}")), c.hidden, c.filter, c.heads, 1e-6))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: vs.param("embed", (vocab, c.hidden), Init::Normal(0.02))?,
            blocks,
            utterance: vs.param("utterance", (1, c.hidden), Init::Normal(0.02))?,
            attn,
            out: Linear::new(&vs.pp("out"), c.hidden, c.hidden)?,
            rope_base,
        })
    }

    /// `[B, L]` ids to `[B, hidden]` utterance embeddings.
    fn forward(&self, ids: &Tensor, lens: &[usize]) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let d = self.embed.dim(1)?;
        let dtype = self.embed.dtype();
        let mask = length_mask(lens, l, dtype)?;
        let mut h = self
            .embed
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, d))?
            .broadcast_mul(&mask)?;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(&mask))?;
        }
        let utt = self.utterance.unsqueeze(0)?.broadcast_as((b, 1, d))?.contiguous()?;
        let mut h = Tensor::cat(&[&utt, &h], 1)?;
        let lens1: Vec<usize> = lens.iter().map(|&n| n + 1).collect();
        let mask = length_mask(&lens1, l + 1, dtype)?;
        if let Some(first) = self.attn.first() {
            let rot = Rotary::sequential(b, l + 1, first.head_dim(), self.rope_base, dtype, &Device::Cpu)?;
            for blk in &self.attn {
                h = blk.forward(&h, Some(&mask), &rot)?;
            }
        }
        self.out.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct DurationPredictor {
    reference: DpReferenceEncoder,
    text: DpTextEncoder,
    head1: Linear,
    act: PRelu,
    head2: Linear,
    store: ParamStore,
    in_dim: usize,
}

impl DurationPredictor {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let c = &cfg.duration;
        if c.n_queries == 0 || c.hidden % c.n_queries != 0 {
            return Err(Error::Config(format!(
                "duration hidden {} must be divisible by n_queries {}",
                c.hidden, c.n_queries
            )));
        }
        let store = ParamStore::new(cfg.dtype(), seed);
        let root = store.root();
        let kc = cfg.compressed_channels();
        // Concatenated reference and text embeddings.
        let concat = 2 * c.hidden;
        Ok(Self {
            reference: DpReferenceEncoder::new(&root.pp("ref_encoder"), kc, c)?,
            text: DpTextEncoder::new(&root.pp("text_encoder"), cfg.vocab_size, c, cfg.ttl.rope_base)?,
            head1: Linear::new(&root.pp("head.fc1"), concat, concat)?,
            act: PRelu::new(&root.pp("head.act"), concat)?,
            head2: Linear::new(&root.pp("head.fc2"), concat, 1)?,
            store,
            in_dim: kc,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Predicted frame counts `[B]` (always positive).
    pub fn forward(
        &self,
        ids: &Tensor,
        text_lens: &[usize],
        reference: &Tensor,
        ref_mask: &Tensor,
    ) -> Result<Tensor> {
        if text_lens.contains(&0) {
            return Err(Error::EmptyInput("text"));
        }
        let (_, t, c) = reference.dims3()?;
        if t == 0 {
            return Err(Error::EmptyInput("reference"));
        }
        if c != self.in_dim {
            return Err(Error::Shape(format!(
                "duration predictor expects {} channels, got {c}",
                self.in_dim
            )));
        }
        let r = self.reference.forward(reference, ref_mask)?;
        let s = self.text.forward(ids, text_lens)?;
        let h = Tensor::cat(&[r, s], D::Minus1)?;
        let y = self.head2.forward(&self.act.forward(&self.head1.forward(&h)?)?)?;
        softplus(&y.squeeze(1)?)
    }

    /// Single-utterance prediction in compressed frames.
    pub fn predict(&self, chars: &CharacterSequence, reference: &Tensor) -> Result<f64> {
        if chars.is_empty() {
            return Err(Error::EmptyInput("text"));
        }
        let ids = Tensor::from_vec(chars.ids.clone(), (1, chars.len()), &Device::Cpu)?;
        let r = reference.to_dtype(self.store.dtype())?.unsqueeze(0)?;
        let mask = Tensor::ones((1, r.dim(1)?, 1), r.dtype(), &Device::Cpu)?;
        let y = self.forward(&ids, &[chars.len()], &r, &mask)?;
        Ok(y.to_dtype(DType::F64)?.get(0)?.to_scalar::<f64>()?)
    }

    /// Moves the output bias so the initial prediction is about `frames`.
    pub fn set_output_offset(&self, frames: f64) -> Result<()> {
        // Inverse softplus.
        let b = if frames > 20.0 { frames } else { frames.exp_m1().ln() };
        let (_, var) = self
            .store
            .named_trainable()
            .into_iter()
            .find(|(n, _)| n == "head.fc2.bias")
            .ok_or_else(|| Error::Checkpoint("missing head bias".into()))?;
        var.set(&Tensor::full(b, 1, &Device::Cpu)?.to_dtype(self.store.dtype())?)?;
        Ok(())
    }
}

/// Reference segment `(start, len)` covering a uniform fraction in
/// `[span_min, span_max]` of a `total`-frame utterance.
pub fn sample_reference_span(
    total: usize,
    span_min: f64,
    span_max: f64,
    rng: &mut impl Rng,
) -> (usize, usize) {
    let frac = if span_max > span_min {
        rng.random_range(span_min..=span_max)
    } else {
        span_min
    };
    let lo = ((span_min * total as f64).ceil() as usize).max(1).min(total);
    let hi = ((span_max * total as f64).floor() as usize).max(lo).min(total);
    let len = ((frac * total as f64).round() as usize).clamp(lo, hi);
    let start = rng.random_range(0..=total - len);
    (start, len)
}

/// Pads id sequences into a `[B, L]` tensor.
pub fn pad_ids(seqs: &[&[u32]]) -> Result<(Tensor, Vec<usize>)> {
    let l = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut v = Vec::with_capacity(seqs.len() * l);
    for s in seqs {
        v.extend_from_slice(s);
        v.extend(std::iter::repeat_n(crate::text::PAD_ID, l - s.len()));
    }
    Ok((
        Tensor::from_vec(v, (seqs.len(), l), &Device::Cpu)?,
        seqs.iter().map(|s| s.len()).collect(),
    ))
}

/// Zero-pads `[T_i, C]` tensors into `[B, T_max, C]` plus a mask.
pub fn pad_frames(items: &[Tensor], dtype: DType) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let lens: Vec<usize> = items.iter().map(|t| t.dim(0)).collect::<candle_core::Result<_>>()?;
    let t = lens.iter().copied().max().unwrap_or(0);
    let padded: Vec<Tensor> = items
        .iter()
        .zip(&lens)
        .map(|(x, &l)| x.to_dtype(dtype)?.pad_with_zeros(0, 0, t - l))
        .collect::<candle_core::Result<_>>()?;
    Ok((Tensor::stack(&padded, 0)?, length_mask(&lens, t, dtype)?, lens))
}

pub const DURATION_METRICS_HEADER: &str = "step,loss,lr,wall_ms";

pub struct DurationTrainOutput {
    pub model: DurationPredictor,
    pub losses: Vec<f64>,
}

/// L1 training on random reference spans.
pub fn train_duration(
    corpus: &[DurationSample],
    cfg: &ModelConfig,
    metrics_path: Option<&Path>,
) -> Result<DurationTrainOutput> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("duration corpus"));
    }
    let tc = &cfg.duration_train;
    let dtype = cfg.dtype();
    let model = DurationPredictor::new(cfg, tc.seed)?;
    let mean = corpus.iter().map(|s| s.target_frames as f64).sum::<f64>() / corpus.len() as f64;
    model.set_output_offset(mean)?;
    let mut opt = AdamW::new(
        model.store().trainable_vars(None),
        ParamsAdamW {
            lr: tc.lr,
            beta1: tc.betas.0,
            beta2: tc.betas.1,
            eps: 1e-8,
            weight_decay: tc.weight_decay,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = match metrics_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "{DURATION_METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let t0 = Instant::now();
        let batch: Vec<&DurationSample> = (0..tc.batch_size)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        let mut refs = Vec::with_capacity(batch.len());
        for s in &batch {
            let total = s.latent.dim(0)?;
            let (start, len) = sample_reference_span(total, tc.span_min, tc.span_max, &mut rng);
            refs.push(s.latent.narrow(0, start, len)?);
        }
        let (r, rmask, _) = pad_frames(&refs, dtype)?;
        let seqs: Vec<&[u32]> = batch.iter().map(|s| s.ids.as_slice()).collect();
        let (ids, lens) = pad_ids(&seqs)?;
        let target = Tensor::from_vec(
            batch.iter().map(|s| s.target_frames as f64).collect::<Vec<_>>(),
            batch.len(),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        let pred = model.forward(&ids, &lens, &r, &rmask)?;
        let loss = (pred - target)?.abs()?.mean_all()?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("duration loss"));
        }
        opt.backward_step(&loss)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{step},{v},{},{:.3}", tc.lr, t0.elapsed().as_secs_f64() * 1e3)?;
        }
        losses.push(v);
    }
    Ok(DurationTrainOutput { model, losses })
}
