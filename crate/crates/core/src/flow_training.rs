//! Masked flow-matching training of the text-to-latent module with
//! context-sharing batch expansion.
//!
//! All batched tensors are time-major `[B, T, C]` over normalized
//! compressed latents.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::duration::{pad_frames, pad_ids};
use crate::error::{Error, Result};
use crate::latent_ops::{CompressedLatent, LatentStats};
use crate::profiler::{ttl_forward_flops, TtlWorkload};
use crate::text::CharacterSequence;
use crate::text_to_latent::{Conditions, TextToLatent};

/// Timesteps used by [`validation_loss`].
pub const VALIDATION_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub z1: CompressedLatent,
    pub chars: CharacterSequence,
}

impl TrainingItem {
    pub fn frames(&self) -> usize {
        self.z1.frames()
    }

    /// `[T, k_c C]` view.
    fn time_major(&self) -> Result<Tensor> {
        Ok(self.z1.values.t()?.contiguous()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceCrop {
    pub start: usize,
    pub len: usize,
}

/// `(min, max)` crop length in compressed frames.
pub fn crop_bounds(cfg: &ModelConfig) -> (usize, usize) {
    let fr = cfg.compressed_frame_rate();
    let lo = ((cfg.flow_train.crop_min_seconds * fr).ceil() as usize).max(1);
    let hi = ((cfg.flow_train.crop_max_seconds * fr).floor() as usize).max(lo);
    (lo, hi)
}

/// Uniform crop length in `[min, min(max, total / 2)]`, uniform start.
pub fn sample_crop(total: usize, bounds: (usize, usize), rng: &mut impl Rng) -> Result<ReferenceCrop> {
    let (lo, hi) = bounds;
    let hi = hi.min(total / 2);
    if hi < lo {
        return Err(Error::ReferenceTooShort {
            frames: total,
            min: 2 * lo,
        });
    }
    let len = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=total - len);
    Ok(ReferenceCrop { start, len })
}

/// `(1 - (1 - sigma) t) z0 + t z1`; `t` broadcasts against the latents.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: &Tensor, sigma_min: f64) -> Result<Tensor> {
    if z0.dims() != z1.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs z1 {:?}", z0.dims(), z1.dims())));
    }
    let a = t.affine(-(1.0 - sigma_min), 1.0)?;
    Ok((z0.broadcast_mul(&a)? + z1.broadcast_mul(t)?)?)
}

/// `z1 - (1 - sigma) z0`.
pub fn flow_target(z0: &Tensor, z1: &Tensor, sigma_min: f64) -> Result<Tensor> {
    Ok((z1 - z0.affine(1.0 - sigma_min, 0.0)?)?)
}

/// Sum of `mask * |pred - target|` divided by the number of unmasked
/// elements. `mask` broadcasts (e.g. `[B, T, 1]`).
pub fn masked_fm_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!("pred {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    let full = mask.broadcast_as(pred.shape())?;
    let count = full.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::EmptyInput("loss mask"));
    }
    let s = (pred - target)?.abs()?.broadcast_mul(mask)?.sum_all()?;
    Ok(s.affine(1.0 / count, 0.0)?)
}

/// Per-item masked losses `[B]` (each item normalized by its own count).
pub fn masked_fm_loss_per_item(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    let b = pred.dim(0)?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let l = masked_fm_loss(&pred.get(i)?, &target.get(i)?, &mask.get(i)?)?;
        out.push(l.to_dtype(DType::F64)?.to_scalar::<f64>()?);
    }
    Ok(out)
}

/// A padded mini-batch with its reference crops, before expansion.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub z1: Tensor,
    pub valid: Tensor,
    pub lens: Vec<usize>,
    pub ids: Tensor,
    pub text_lens: Vec<usize>,
    pub reference: Tensor,
    pub ref_mask: Tensor,
    /// 1 on valid frames outside the reference crop.
    pub loss_mask: Tensor,
    pub crops: Vec<ReferenceCrop>,
}

impl PreparedBatch {
    pub fn new(items: &[&TrainingItem], crops: &[ReferenceCrop], dtype: DType) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        if items.len() != crops.len() {
            return Err(Error::Shape("one crop per item required".into()));
        }
        let latents: Vec<Tensor> = items.iter().map(|it| it.time_major()).collect::<Result<_>>()?;
        let (z1, valid, lens) = pad_frames(&latents, dtype)?;
        let refs: Vec<Tensor> = latents
            .iter()
            .zip(crops)
            .map(|(z, c)| Ok(z.narrow(0, c.start, c.len)?))
            .collect::<Result<_>>()?;
        let (reference, ref_mask, _) = pad_frames(&refs, dtype)?;
        let t = z1.dim(1)?;
        let mut m = vec![0f64; items.len() * t];
        for (i, (&n, c)) in lens.iter().zip(crops).enumerate() {
            for (j, v) in m[i * t..i * t + n].iter_mut().enumerate() {
                if j < c.start || j >= c.start + c.len {
                    *v = 1.0;
                }
            }
        }
        let loss_mask = Tensor::from_vec(m, (items.len(), t, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let seqs: Vec<&[u32]> = items.iter().map(|it| it.chars.ids.as_slice()).collect();
        let (ids, text_lens) = pad_ids(&seqs)?;
        Ok(Self {
            z1,
            valid,
            lens,
            ids,
            text_lens,
            reference,
            ref_mask,
            loss_mask,
            crops: crops.to_vec(),
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn frames(&self) -> usize {
        self.z1.dim(1).unwrap_or(0)
    }

    /// Rows `idx` of every tensor (used for naive duplication).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let i = Tensor::from_vec(idx.iter().map(|&v| v as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok(Self {
            z1: self.z1.index_select(&i, 0)?,
            valid: self.valid.index_select(&i, 0)?,
            lens: idx.iter().map(|&k| self.lens[k]).collect(),
            ids: self.ids.index_select(&i, 0)?,
            text_lens: idx.iter().map(|&k| self.text_lens[k]).collect(),
            reference: self.reference.index_select(&i, 0)?,
            ref_mask: self.ref_mask.index_select(&i, 0)?,
            loss_mask: self.loss_mask.index_select(&i, 0)?,
            crops: idx.iter().map(|&k| self.crops[k]).collect(),
        })
    }
}

/// The random part of one expanded step: `B K_e` (noise, t) pairs and a
/// per-source-item condition drop flag.
#[derive(Debug, Clone)]
pub struct ExpansionDraw {
    pub t: Vec<f64>,
    pub noise: Tensor,
    pub drop: Vec<bool>,
}

impl ExpansionDraw {
    pub fn sample(
        batch: &PreparedBatch,
        k_e: usize,
        p_uncond: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k_e == 0 {
            return Err(Error::InvalidArgument("K_e must be at least 1".into()));
        }
        let b = batch.batch();
        let drop = dropout_mask(b, p_uncond, rng)?;
        let (_, t, c) = batch.z1.dims3()?;
        let n = b * k_e;
        let ts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let noise: Vec<f64> = (0..n * t * c).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Self {
            t: ts,
            noise: Tensor::from_vec(noise, (n, t, c), &Device::Cpu)?.to_dtype(batch.z1.dtype())?,
            drop,
        })
    }
}

/// `B` independent Bernoulli(`p`) flags.
pub fn dropout_mask(b: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p_uncond = {p} outside [0, 1]")));
    }
    Ok((0..b).map(|_| rng.random_bool(p)).collect())
}

/// Jointly replaces text and reference by the null conditions with
/// probability `p` per item.
pub fn cfg_dropout(
    model: &TextToLatent,
    cond: &Conditions,
    p: f64,
    rng: &mut impl Rng,
) -> Result<(Conditions, Vec<bool>)> {
    let drop = dropout_mask(cond.batch(), p, rng)?;
    Ok((model.drop_conditions(cond, &drop)?, drop))
}

#[derive(Debug, Clone)]
pub struct ExpandedBatch {
    pub z_t: Tensor,
    pub t: Vec<f64>,
    pub z0: Tensor,
    pub target: Tensor,
    pub valid: Tensor,
    pub loss_mask: Tensor,
    /// Encoded once per source item (`B` entries).
    pub conditions: Conditions,
    /// Source item of each of the `B K_e` entries.
    pub source: Vec<usize>,
}

impl ExpandedBatch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Vector-field predictions for every entry.
    pub fn predict(&self, model: &TextToLatent) -> Result<Tensor> {
        let cond = self.conditions.select(&self.source)?;
        model.vector_field.forward(&self.z_t, &self.valid, &self.t, &cond)
    }

    pub fn loss(&self, model: &TextToLatent) -> Result<Tensor> {
        masked_fm_loss(&self.predict(model)?, &self.target, &self.loss_mask)
    }
}

/// Encodes the conditions of the `B` items once and builds `B K_e`
/// perturbed entries from `draw`.
pub fn expand_batch(
    model: &TextToLatent,
    batch: &PreparedBatch,
    k_e: usize,
    draw: &ExpansionDraw,
    sigma_min: f64,
) -> Result<ExpandedBatch> {
    if k_e == 0 {
        return Err(Error::InvalidArgument("K_e must be at least 1".into()));
    }
    let b = batch.batch();
    let n = b * k_e;
    if draw.t.len() != n || draw.noise.dim(0)? != n || draw.drop.len() != b {
        return Err(Error::Shape(format!("draw does not match B = {b}, K_e = {k_e}")));
    }
    let cond = model.encode_conditions(&batch.ids, &batch.text_lens, &batch.reference, &batch.ref_mask)?;
    let conditions = model.drop_conditions(&cond, &draw.drop)?;
    let source: Vec<usize> = (0..n).map(|e| e / k_e).collect();
    let idx = Tensor::from_vec(source.iter().map(|&s| s as u32).collect::<Vec<_>>(), n, &Device::Cpu)?;
    let z1 = batch.z1.index_select(&idx, 0)?;
    let dtype = z1.dtype();
    let t = Tensor::from_vec(draw.t.clone(), (n, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let z0 = draw.noise.clone();
    Ok(ExpandedBatch {
        z_t: interpolate(&z0, &z1, &t, sigma_min)?,
        target: flow_target(&z0, &z1, sigma_min)?,
        t: draw.t.clone(),
        z0,
        valid: batch.valid.index_select(&idx, 0)?,
        loss_mask: batch.loss_mask.index_select(&idx, 0)?,
        conditions,
        source,
    })
}

/// Step-halving schedule; `step` is 1-based.
pub fn lr_at(base: f64, halve_every: usize, step: usize) -> f64 {
    if halve_every == 0 {
        return base;
    }
    base * 0.5f64.powi((step.saturating_sub(1) / halve_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtlMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    /// Analytic forward + backward FLOPs of the step (3x forward).
    pub flops_step: f64,
}

pub const TTL_METRICS_HEADER: &str = "step,loss,lr,wall_ms,flops_step";

impl TtlMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.0}",
            self.step, self.loss, self.lr, self.wall_ms, self.flops_step
        )
    }
}

#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub items: Vec<TrainingItem>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub mean: f64,
    /// `per_item[i][k]`: loss of item `i` at `VALIDATION_TIMES[k]`.
    pub per_item: Vec<[f64; 5]>,
}

/// Mean masked loss over items and the five validation timesteps, with
/// crops and noise fixed by `set.seed`. No condition dropout.
pub fn validation_loss(model: &TextToLatent, set: &ValidationSet, cfg: &ModelConfig) -> Result<ValidationReport> {
    if set.items.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed);
    let bounds = crop_bounds(cfg);
    let crops: Vec<ReferenceCrop> = set
        .items
        .iter()
        .map(|it| sample_crop(it.frames(), bounds, &mut rng))
        .collect::<Result<_>>()?;
    let refs: Vec<&TrainingItem> = set.items.iter().collect();
    let batch = PreparedBatch::new(&refs, &crops, cfg.dtype())?;
    let (b, t, c) = batch.z1.dims3()?;
    let noise: Vec<f64> = (0..b * t * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor::from_vec(noise, (b, t, c), &Device::Cpu)?.to_dtype(cfg.dtype())?;
    let mut per_item = vec![[0f64; 5]; b];
    for (k, &tk) in VALIDATION_TIMES.iter().enumerate() {
        let draw = ExpansionDraw {
            t: vec![tk; b],
            noise: noise.clone(),
            drop: vec![false; b],
        };
        let ex = expand_batch(model, &batch, 1, &draw, cfg.flow_train.sigma_min)?;
        let pred = ex.predict(model)?;
        for (i, l) in masked_fm_loss_per_item(&pred, &ex.target, &ex.loss_mask)?.into_iter().enumerate() {
            per_item[i][k] = l;
        }
    }
    let mean = per_item.iter().flatten().sum::<f64>() / (5 * b) as f64;
    Ok(ValidationReport { mean, per_item })
}

#[derive(Debug, Clone, Default)]
pub struct TtlTrainOptions<'a> {
    pub metrics_path: Option<&'a Path>,
    pub validation: Option<&'a ValidationSet>,
    /// Validate every `val_every` steps (and at step 0).
    pub val_every: usize,
}

pub struct TtlTrainOutput {
    pub model: TextToLatent,
    pub metrics: Vec<TtlMetrics>,
    /// `(step, validation loss)` pairs.
    pub validation: Vec<(usize, f64)>,
}

/// Normalizes each item's latent with `stats`.
pub fn normalize_items(items: &[TrainingItem], stats: &LatentStats) -> Result<Vec<TrainingItem>> {
    items
        .iter()
        .map(|it| {
            Ok(TrainingItem {
                z1: CompressedLatent {
                    values: stats.normalize(&it.z1.values.t()?)?.t()?.contiguous()?,
                    ..it.z1.clone()
                },
                chars: it.chars.clone(),
            })
        })
        .collect()
}

/// Flow-matching training. `corpus` holds raw compressed latents which are
/// normalized with the fitted `stats`; validation items are expected to be
/// normalized already.
pub fn train_ttl(
    corpus: &[TrainingItem],
    stats: &LatentStats,
    cfg: &ModelConfig,
    opts: &TtlTrainOptions,
) -> Result<TtlTrainOutput> {
    let tc = &cfg.flow_train;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if stats.sample_count == 0 {
        return Err(Error::Config("latent statistics have not been fitted".into()));
    }
    if stats.channels != cfg.compressed_channels() {
        return Err(Error::Config(format!(
            "stats cover {} channels, model expects {}",
            stats.channels,
            cfg.compressed_channels()
        )));
    }
    let bounds = crop_bounds(cfg);
    if let Some(short) = corpus.iter().find(|it| it.frames() < 2 * bounds.0) {
        return Err(Error::ReferenceTooShort {
            frames: short.frames(),
            min: 2 * bounds.0,
        });
    }
    let items = normalize_items(corpus, stats)?;
    let model = TextToLatent::new(cfg, tc.seed)?;
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
    let mut log = match opts.metrics_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "{TTL_METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(tc.steps);
    let mut validation = Vec::new();
    let validate = |step: usize, out: &mut Vec<(usize, f64)>| -> Result<()> {
        if let Some(v) = opts.validation {
            out.push((step, validation_loss(&model, v, cfg)?.mean));
        }
        Ok(())
    };
    validate(0, &mut validation)?;
    for step in 1..=tc.steps {
        let t0 = Instant::now();
        let lr = lr_at(tc.lr, tc.halve_every, step);
        opt.set_learning_rate(lr);
        let picked: Vec<&TrainingItem> = (0..tc.batch_size)
            .map(|_| &items[rng.random_range(0..items.len())])
            .collect();
        let crops: Vec<ReferenceCrop> = picked
            .iter()
            .map(|it| sample_crop(it.frames(), bounds, &mut rng))
            .collect::<Result<_>>()?;
        let batch = PreparedBatch::new(&picked, &crops, cfg.dtype())?;
        let draw = ExpansionDraw::sample(&batch, tc.k_e, tc.p_uncond, &mut rng)?;
        let ex = expand_batch(&model, &batch, tc.k_e, &draw, tc.sigma_min)?;
        let loss = ex.loss(&model)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("flow-matching loss"));
        }
        opt.backward_step(&loss)?;
        let workload = TtlWorkload {
            batch: batch.batch(),
            k_e: tc.k_e,
            frames: batch.frames(),
            chars: batch.ids.dim(1)?,
            ref_frames: batch.reference.dim(1)?,
        };
        let m = TtlMetrics {
            step,
            loss: v,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            flops_step: 3.0 * ttl_forward_flops(cfg, &workload)?.total().flops,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.csv_row())?;
        }
        metrics.push(m);
        if opts.val_every > 0 && step % opts.val_every == 0 {
            validate(step, &mut validation)?;
        }
    }
    Ok(TtlTrainOutput {
        model,
        metrics,
        validation,
    })
}

/// Generator settings for [`synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub k_c: usize,
    pub frames_per_char: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub speakers: usize,
    pub noise: f64,
    /// Characters are drawn from the first `alphabet` lowercase letters.
    pub alphabet: usize,
    /// Seeds the teacher; item sampling uses the corpus seed.
    pub teacher_seed: u64,
}

impl SyntheticSpec {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let (lo, _) = crop_bounds(cfg);
        let fpc = 3;
        Self {
            channels: cfg.compressed_channels(),
            k_c: cfg.ttl.k_c,
            frames_per_char: fpc,
            min_chars: (2 * lo).div_ceil(fpc).max(4),
            max_chars: (2 * lo).div_ceil(fpc).max(4) * 2,
            speakers: 4,
            noise: 0.05,
            alphabet: 8,
            teacher_seed: 0,
        }
    }

    /// Width of the per-character feature vector.
    pub fn feature_dim(&self) -> usize {
        3 * (self.alphabet + 1) + self.speakers
    }
}

/// The fixed random linear map from character context to frame blocks.
#[derive(Debug, Clone)]
pub struct Teacher {
    /// `[feature_dim, frames_per_char * channels]`, row-major.
    pub weights: Vec<f64>,
    pub spec: SyntheticSpec,
}

impl Teacher {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.teacher_seed ^ 0x7EAC_4E55);
        let n = spec.feature_dim() * spec.frames_per_char * spec.channels;
        let weights = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            weights,
            spec: spec.clone(),
        }
    }

    /// One-hot features: previous, current and next character (slot
    /// `alphabet` marks a boundary) plus the speaker.
    pub fn features(&self, letters: &[usize], pos: usize, speaker: usize) -> Vec<f64> {
        let a = self.spec.alphabet + 1;
        let mut f = vec![0.0; self.spec.feature_dim()];
        let prev = if pos == 0 { a - 1 } else { letters[pos - 1] };
        let next = letters.get(pos + 1).copied().unwrap_or(a - 1);
        f[prev] = 1.0;
        f[a + letters[pos]] = 1.0;
        f[2 * a + next] = 1.0;
        f[3 * a + speaker] = 1.0;
        f
    }

    /// Noise-free block for one character, `frames_per_char * channels`.
    pub fn block(&self, features: &[f64]) -> Vec<f64> {
        let w = self.spec.frames_per_char * self.spec.channels;
        let mut out = vec![0.0; w];
        for (i, &x) in features.iter().enumerate() {
            if x != 0.0 {
                for (o, wv) in out.iter_mut().zip(&self.weights[i * w..(i + 1) * w]) {
                    *o += x * wv;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticItem {
    pub item: TrainingItem,
    pub letters: Vec<usize>,
    pub speaker: usize,
}

/// Procedural (text, latent) pairs: each character contributes a block of
/// `frames_per_char` frames given by the teacher, plus Gaussian noise.
pub fn synthetic_corpus(n_items: usize, seed: u64, spec: &SyntheticSpec) -> Result<Vec<SyntheticItem>> {
    if spec.alphabet == 0 || spec.alphabet > 26 || spec.min_chars == 0 || spec.max_chars < spec.min_chars {
        return Err(Error::InvalidArgument("bad synthetic corpus spec".into()));
    }
    let teacher = Teacher::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fpc = spec.frames_per_char;
    let c = spec.channels;
    (0..n_items)
        .map(|_| {
            let n = rng.random_range(spec.min_chars..=spec.max_chars);
            let speaker = rng.random_range(0..spec.speakers.max(1));
            let letters: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.alphabet)).collect();
            let text: String = letters.iter().map(|&l| (b'a' + l as u8) as char).collect();
            let t = n * fpc;
            // Channel-major [C, T].
            let mut values = vec![0f64; c * t];
            for pos in 0..n {
                let block = teacher.block(&teacher.features(&letters, pos, speaker));
                for f in 0..fpc {
                    for ch in 0..c {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        values[ch * t + pos * fpc + f] = block[f * c + ch] + spec.noise * e;
                    }
                }
            }
            Ok(SyntheticItem {
                item: TrainingItem {
                    z1: CompressedLatent {
                        values: Tensor::from_vec(values, (c, t), &Device::Cpu)?,
                        k_c: spec.k_c,
                        pad: 0,
                    },
                    chars: crate::text::tokenize(&text),
                },
                letters,
                speaker,
            })
        })
        .collect()
}

/// Converts an item's latent to `dtype`.
pub fn cast_item(item: &TrainingItem, dtype: DType) -> Result<TrainingItem> {
    Ok(TrainingItem {
        z1: CompressedLatent {
            values: item.z1.values.to_dtype(dtype)?,
            ..item.z1.clone()
        },
        chars: item.chars.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        // Tiny latents run at ~1378 compressed frames/s; keep crops small.
        cfg.flow_train.crop_min_seconds = 2.0 / cfg.compressed_frame_rate();
        cfg.flow_train.crop_max_seconds = 6.0 / cfg.compressed_frame_rate();
        cfg
    }

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn vec1(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_target() {
        let z0 = t64(&[0.5, -1.0, 2.0], &[3]);
        let z1 = t64(&[3.0, 4.0, -5.0], &[3]);
        let at = |t: f64, s: f64| vec1(&interpolate(&z0, &z1, &t64(&[t], &[1]), s).unwrap());
        assert_eq!(at(0.0, 1e-8), vec1(&z0));
        let one = at(1.0, 1e-8);
        for ((o, a), b) in one.iter().zip(vec1(&z1)).zip(vec1(&z0)) {
            assert!((o - (a + 1e-8 * b)).abs() < 1e-15);
        }
        let half = interpolate(&t64(&[0.0], &[1]), &t64(&[2.0], &[1]), &t64(&[0.5], &[1]), 0.0).unwrap();
        assert_eq!(vec1(&half), vec![1.0]);
        assert_eq!(vec1(&flow_target(&z0, &z0, 0.0).unwrap()), vec![0.0; 3]);
        assert_eq!(vec1(&flow_target(&t64(&[1.0], &[1]), &t64(&[3.0], &[1]), 0.0).unwrap()), vec![2.0]);
    }

    #[test]
    fn target_is_time_derivative() {
        let z0 = t64(&[0.3, -1.7], &[2]);
        let z1 = t64(&[1.1, 0.4], &[2]);
        let s = 1e-3;
        let target = vec1(&flow_target(&z0, &z1, s).unwrap());
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let h = 1e-4;
            let p = vec1(&interpolate(&z0, &z1, &t64(&[t + h], &[1]), s).unwrap());
            let m = vec1(&interpolate(&z0, &z1, &t64(&[t - h], &[1]), s).unwrap());
            for i in 0..2 {
                assert!(((p[i] - m[i]) / (2.0 * h) - target[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn masked_loss_examples() {
        let pred = t64(&[1.0, -2.0, 3.0], &[3]);
        let zero = t64(&[0.0; 3], &[3]);
        let mask = t64(&[1.0, 1.0, 0.0], &[3]);
        assert_eq!(scalar(&masked_fm_loss(&pred, &zero, &mask).unwrap()), 1.5);
        assert_eq!(scalar(&masked_fm_loss(&pred, &pred, &mask).unwrap()), 0.0);
        let moved = t64(&[1.0, -2.0, 100.0], &[3]);
        assert_eq!(scalar(&masked_fm_loss(&moved, &zero, &mask).unwrap()), 1.5);
        assert!(masked_fm_loss(&pred, &zero, &zero).is_err());
    }

    #[test]
    fn gradient_is_zero_on_masked_positions() {
        let pred = candle_core::Var::from_tensor(&t64(&[0.5, -1.0, 2.0, 0.1, 0.7, -0.2], &[1, 3, 2])).unwrap();
        let target = t64(&[0.0; 6], &[1, 3, 2]);
        let mask = t64(&[1.0, 0.0, 1.0], &[1, 3, 1]);
        let loss = masked_fm_loss(pred.as_tensor(), &target, &mask).unwrap();
        let g = vec1(loss.backward().unwrap().get(pred.as_tensor()).unwrap());
        assert_eq!(&g[2..4], &[0.0, 0.0]);
        assert!(g[0] != 0.0 && g[5] != 0.0);
    }

    #[test]
    fn crop_bounds_hold_over_a_million_draws() {
        let cfg = ModelConfig::paper();
        assert_eq!(crop_bounds(&cfg), (3, 129));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1_000_000usize {
            let total = 6 + i % 400;
            let c = sample_crop(total, (3, 129), &mut rng).unwrap();
            assert!(c.len >= 3 && c.len <= 129 && 2 * c.len <= total && c.start + c.len <= total);
        }
        assert!(matches!(
            sample_crop(5, (3, 129), &mut rng),
            Err(Error::ReferenceTooShort { .. })
        ));
    }

    #[test]
    fn dropout_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = dropout_mask(100_000, 0.05, &mut rng).unwrap();
        let rate = d.iter().filter(|&&x| x).count() as f64 / 1e5;
        assert!((rate - 0.05).abs() < 0.003, "{rate}");
        assert!(dropout_mask(10, 0.0, &mut rng).unwrap().iter().all(|&x| !x));
        assert!(dropout_mask(10, 1.0, &mut rng).unwrap().iter().all(|&x| x));
        assert!(dropout_mask(1, 1.5, &mut rng).is_err());
    }

    #[test]
    fn cfg_dropout_identity_and_full() {
        let cfg = tiny();
        let model = TextToLatent::new(&cfg, 0).unwrap();
        let items = corpus(&cfg, 2);
        let b = prepared(&cfg, &items, 0);
        let cond = model
            .encode_conditions(&b.ids, &b.text_lens, &b.reference, &b.ref_mask)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, _) = cfg_dropout(&model, &cond, 0.0, &mut rng).unwrap();
        assert_eq!(vec1(&same.text.states), vec1(&cond.text.states));
        let (null, d) = cfg_dropout(&model, &cond, 1.0, &mut rng).unwrap();
        assert!(d.iter().all(|&x| x));
        let expect = model.null_batch(2).unwrap();
        assert_eq!(vec1(&null.reference.values), vec1(&expect.reference.values));
    }

    fn corpus(cfg: &ModelConfig, n: usize) -> Vec<TrainingItem> {
        let spec = SyntheticSpec {
            min_chars: 3,
            max_chars: 5,
            ..SyntheticSpec::for_config(cfg)
        };
        synthetic_corpus(n, 3, &spec).unwrap().into_iter().map(|s| s.item).collect()
    }

    fn prepared(cfg: &ModelConfig, items: &[TrainingItem], seed: u64) -> PreparedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs: Vec<&TrainingItem> = items.iter().collect();
        let crops: Vec<_> = items
            .iter()
            .map(|it| sample_crop(it.frames(), crop_bounds(cfg), &mut rng).unwrap())
            .collect();
        PreparedBatch::new(&refs, &crops, cfg.dtype()).unwrap()
    }

    #[test]
    fn expansion_counts_and_sharing() {
        let cfg = tiny();
        let model = TextToLatent::new(&cfg, 0).unwrap();
        let items = corpus(&cfg, 2);
        let b = prepared(&cfg, &items, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = ExpansionDraw::sample(&b, 3, 0.0, &mut rng).unwrap();
        let ex = expand_batch(&model, &b, 3, &draw, 1e-8).unwrap();
        assert_eq!(ex.len(), 6);
        assert_eq!(ex.conditions.batch(), 2);
        assert_eq!(ex.source, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(model.encoder_calls(), 2);
        let m = ex.loss_mask.to_dtype(DType::F64).unwrap();
        assert_eq!(vec1(&m.get(0).unwrap()), vec1(&m.get(2).unwrap()));
        assert!(ExpansionDraw::sample(&b, 0, 0.0, &mut rng).is_err());
        assert!(expand_batch(&model, &b, 2, &draw, 1e-8).is_err());
    }

    #[test]
    fn loss_mask_excludes_crop_and_padding() {
        let cfg = tiny();
        let items = corpus(&cfg, 3);
        let b = prepared(&cfg, &items, 4);
        let m: Vec<Vec<f64>> = b.loss_mask.squeeze(2).unwrap().to_vec2().unwrap();
        for (i, row) in m.iter().enumerate() {
            let c = b.crops[i];
            for (j, &v) in row.iter().enumerate() {
                let inside = j >= c.start && j < c.start + c.len;
                let expect = if j < b.lens[i] && !inside { 1.0 } else { 0.0 };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(lr_at(5e-4, 300_000, 1), 5e-4);
        assert_eq!(lr_at(5e-4, 300_000, 300_000), 5e-4);
        assert_eq!(lr_at(5e-4, 300_000, 300_001), 2.5e-4);
        assert_eq!(lr_at(5e-4, 300_000, 600_001), 1.25e-4);
    }

    #[test]
    fn synthetic_corpus_construction() {
        let cfg = ModelConfig::toy();
        let spec = SyntheticSpec::for_config(&cfg);
        let a = synthetic_corpus(5, 9, &spec).unwrap();
        let b = synthetic_corpus(5, 9, &spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.item.chars, y.item.chars);
            assert_eq!(vec1(&x.item.z1.values), vec1(&y.item.z1.values));
            assert_eq!(x.item.frames(), x.item.chars.len() * spec.frames_per_char);
            assert!(x.item.frames() >= 2 * crop_bounds(&cfg).0);
        }
    }

    /// Least squares on noise-free data recovers the teacher weights.
    #[test]
    fn teacher_is_recoverable_by_ridge_regression() {
        let cfg = ModelConfig::toy();
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::for_config(&cfg)
        };
        let data = synthetic_corpus(200, 4, &spec).unwrap();
        let teacher = Teacher::new(&spec);
        let f = spec.feature_dim();
        let w = spec.frames_per_char * spec.channels;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &data {
            let v: Vec<Vec<f64>> = s.item.z1.values.to_vec2().unwrap();
            for pos in 0..s.letters.len() {
                xs.extend(teacher.features(&s.letters, pos, s.speaker));
                for fr in 0..spec.frames_per_char {
                    for ch in 0..spec.channels {
                        ys.push(v[ch][pos * spec.frames_per_char + fr]);
                    }
                }
            }
        }
        let n = xs.len() / f;
        let x = ndarray::Array2::from_shape_vec((n, f), xs).unwrap();
        let y = ndarray::Array2::from_shape_vec((n, w), ys).unwrap();
        let lambda = 1e-6;
        let mut a = x.t().dot(&x);
        for i in 0..f {
            a[[i, i]] += lambda;
        }
        let rhs = x.t().dot(&y);
        let pred = solve(&a, &rhs);
        let fitted = x.dot(&pred);
        let err = (&fitted - &y).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-4, "{err}");
    }

    /// Gauss-Jordan with partial pivoting for a small SPD system.
    fn solve(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut r = b.clone();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
            for k in 0..n {
                m.swap([c, k], [p, k]);
            }
            for k in 0..r.ncols() {
                r.swap([c, k], [p, k]);
            }
            let d = m[[c, c]];
            for k in 0..n {
                m[[c, k]] /= d;
            }
            for k in 0..r.ncols() {
                r[[c, k]] /= d;
            }
            for i in 0..n {
                if i != c {
                    let f = m[[i, c]];
                    if f != 0.0 {
                        for k in 0..n {
                            m[[i, k]] -= f * m[[c, k]];
                        }
                        for k in 0..r.ncols() {
                            r[[i, k]] -= f * r[[c, k]];
                        }
                    }
                }
            }
        }
        r
    }

    #[test]
    fn validation_is_deterministic_and_recomputable() {
        let cfg = tiny();
        let model = TextToLatent::new(&cfg, 0).unwrap();
        let set = ValidationSet {
            items: corpus(&cfg, 3),
            seed: 11,
        };
        let a = validation_loss(&model, &set, &cfg).unwrap();
        let b = validation_loss(&model, &set, &cfg).unwrap();
        assert_eq!(a, b);
        let recomputed = a.per_item.iter().flatten().sum::<f64>() / 15.0;
        assert!((recomputed - a.mean).abs() < 1e-12);
    }

    #[test]
    fn training_determinism_and_errors() {
        let mut cfg = tiny();
        cfg.flow_train.batch_size = 2;
        cfg.flow_train.k_e = 2;
        cfg.flow_train.steps = 2;
        let items = corpus(&cfg, 4);
        let latents: Vec<Tensor> = items.iter().map(|i| i.z1.values.t().unwrap()).collect();
        let stats = LatentStats::fit(latents.iter(), cfg.ttl.k_c).unwrap();
        let a = train_ttl(&items, &stats, &cfg, &TtlTrainOptions::default()).unwrap();
        let b = train_ttl(&items, &stats, &cfg, &TtlTrainOptions::default()).unwrap();
        let la: Vec<f64> = a.metrics.iter().map(|m| m.loss).collect();
        let lb: Vec<f64> = b.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(la, lb);
        assert!(a.metrics.iter().all(|m| m.flops_step > 0.0));
        assert!(train_ttl(&[], &stats, &cfg, &TtlTrainOptions::default()).is_err());
        let unfitted = LatentStats::identity(stats.channels, cfg.ttl.k_c);
        assert!(train_ttl(&items, &unfitted, &cfg, &TtlTrainOptions::default()).is_err());
    }

    #[test]
    fn expanded_loss_equals_naive_duplication_bitwise() {
        let cfg = tiny();
        let model = TextToLatent::new(&cfg, 1).unwrap();
        let items = corpus(&cfg, 3);
        let b = prepared(&cfg, &items, 2);
        for k_e in [1, 2, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(k_e as u64);
            let draw = ExpansionDraw::sample(&b, k_e, 0.3, &mut rng).unwrap();
            model.reset_encoder_calls();
            let ex = expand_batch(&model, &b, k_e, &draw, 1e-8).unwrap();
            let expanded = scalar(&ex.loss(&model).unwrap());
            assert_eq!(model.encoder_calls(), 3);
            let naive_batch = b.select(&ex.source).unwrap();
            let naive_draw = ExpansionDraw {
                drop: ex.source.iter().map(|&s| draw.drop[s]).collect(),
                ..draw.clone()
            };
            let naive = expand_batch(&model, &naive_batch, 1, &naive_draw, 1e-8).unwrap();
            let dup = scalar(&naive.loss(&model).unwrap());
            assert_eq!(expanded.to_bits(), dup.to_bits(), "K_e = {k_e}");
        }
    }
}
