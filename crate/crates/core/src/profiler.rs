//! Analytic parameter / FLOP / activation accounting and wall-clock timing.
//!
//! Counting rules, per item:
//! - linear `in -> out` over `n` rows: `n * in * out` MACs
//! - conv1d: `k * c_in * c_out * t / groups` MACs
//! - attention: `2 * L_q * L_k * d` MACs (scores and weighted sum, all heads)
//! - one MAC is 2 FLOPs; bias adds, norms and elementwise ops are 1 FLOP per
//!   element (softmax counted as 3 per score)
//! - masking, rotary embedding and reshapes are free
//!
//! Layer lists mirror the module constructors one-to-one, so the summed
//! parameter counts are checked against the instantiated stores.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: f64,
    pub flops: f64,
}

impl Cost {
    pub fn scale(self, k: f64) -> Self {
        Self {
            macs: self.macs * k,
            flops: self.flops * k,
        }
    }

    pub fn gmacs(&self) -> f64 {
        self.macs / 1e9
    }

    pub fn gflops(&self) -> f64 {
        self.flops / 1e9
    }
}

impl std::ops::Add for Cost {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            macs: self.macs + o.macs,
            flops: self.flops + o.flops,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear { inp: usize, out: usize, rows: usize, bias: bool },
    Conv1d { k: usize, c_in: usize, c_out: usize, t: usize, groups: usize, bias: bool },
    Attention { l_q: usize, l_k: usize, d: usize, heads: usize },
    /// Normalization over `rows` vectors of width `dim` with affine params.
    Norm { dim: usize, rows: usize },
    /// Activations, scales and residual adds; `params` for learned slopes/scales.
    Elementwise { elems: usize, params: usize },
    Embedding { vocab: usize, dim: usize, rows: usize },
    /// Learned tensors used without arithmetic (queries, null conditions).
    Param { count: usize },
}

impl LayerSpec {
    pub fn params(&self) -> usize {
        match *self {
            Self::Linear { inp, out, bias, .. } => inp * out + if bias { out } else { 0 },
            Self::Conv1d { k, c_in, c_out, groups, bias, .. } => {
                k * c_in * c_out / groups + if bias { c_out } else { 0 }
            }
            Self::Attention { .. } => 0,
            Self::Norm { dim, .. } => 2 * dim,
            Self::Elementwise { params, .. } => params,
            Self::Embedding { vocab, dim, .. } => vocab * dim,
            Self::Param { count } => count,
        }
    }

    pub fn cost(&self) -> Cost {
        let (macs, extra) = match *self {
            Self::Linear { inp, out, rows, bias } => {
                ((rows * inp * out) as f64, if bias { (rows * out) as f64 } else { 0.0 })
            }
            Self::Conv1d { k, c_in, c_out, t, groups, bias } => (
                (k * c_in * c_out * t / groups) as f64,
                if bias { (c_out * t) as f64 } else { 0.0 },
            ),
            Self::Attention { l_q, l_k, d, heads } => {
                ((2 * l_q * l_k * d) as f64, (3 * heads * l_q * l_k) as f64)
            }
            Self::Norm { dim, rows } => (0.0, (dim * rows) as f64),
            Self::Elementwise { elems, .. } => (0.0, elems as f64),
            Self::Embedding { .. } | Self::Param { .. } => (0.0, 0.0),
        };
        Cost {
            macs,
            flops: 2.0 * macs + extra,
        }
    }

    /// Output elements (what a training step keeps alive for backward).
    pub fn output_elems(&self) -> usize {
        match *self {
            Self::Linear { out, rows, .. } => out * rows,
            Self::Conv1d { c_out, t, .. } => c_out * t,
            // Scores plus the attended values.
            Self::Attention { l_q, l_k, d, heads } => heads * l_q * l_k + l_q * d,
            Self::Norm { dim, rows } => dim * rows,
            Self::Elementwise { elems, .. } => elems,
            Self::Embedding { dim, rows, .. } => dim * rows,
            Self::Param { .. } => 0,
        }
    }
}

/// Parses `kind key=value ...`, e.g. `conv1d k=7 c_in=4 c_out=4 t=10`.
/// `bias` defaults to false, `groups` to 1, `rows` to 1.
impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty layer description".into()))?;
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {p:?}")))?;
            kv.insert(k, v);
        }
        let num = |key: &str, default: Option<usize>| -> Result<usize> {
            match kv.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("{key}={v} is not an integer"))),
                None => default.ok_or_else(|| Error::InvalidArgument(format!("{kind}: missing {key}"))),
            }
        };
        let bias = match kv.get("bias") {
            None | Some(&"false") => false,
            Some(&"true") => true,
            Some(v) => return Err(Error::InvalidArgument(format!("bias={v}"))),
        };
        Ok(match kind {
            "linear" => Self::Linear {
                inp: num("in", None)?,
                out: num("out", None)?,
                rows: num("rows", Some(1))?,
                bias,
            },
            "conv1d" => Self::Conv1d {
                k: num("k", None)?,
                c_in: num("c_in", None)?,
                c_out: num("c_out", None)?,
                t: num("t", None)?,
                groups: num("groups", Some(1))?,
                bias,
            },
            "attention" => Self::Attention {
                l_q: num("l_q", None)?,
                l_k: num("l_k", None)?,
                d: num("d", None)?,
                heads: num("heads", Some(1))?,
            },
            "norm" => Self::Norm {
                dim: num("dim", None)?,
                rows: num("rows", Some(1))?,
            },
            "elementwise" => Self::Elementwise {
                elems: num("elems", None)?,
                params: num("params", Some(0))?,
            },
            "embedding" => Self::Embedding {
                vocab: num("vocab", None)?,
                dim: num("dim", None)?,
                rows: num("rows", Some(1))?,
            },
            "param" => Self::Param {
                count: num("count", None)?,
            },
            other => return Err(Error::InvalidArgument(format!("unknown layer kind {other:?}"))),
        })
    }
}

/// A named list of layers for one item at fixed sequence lengths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerList {
    pub layers: Vec<LayerSpec>,
}

impl LayerList {
    fn push(&mut self, l: LayerSpec) {
        self.layers.push(l);
    }

    fn extend(&mut self, o: LayerList) {
        self.layers.extend(o.layers);
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(LayerSpec::params).sum()
    }

    pub fn cost(&self) -> Cost {
        count_flops(&self.layers)
    }

    pub fn activation_elems(&self) -> usize {
        self.layers.iter().map(LayerSpec::output_elems).sum()
    }
}

pub fn count_flops(layers: &[LayerSpec]) -> Cost {
    layers.iter().map(LayerSpec::cost).sum()
}

/// Trainable scalars under `prefix` (all when `None`).
pub fn count_params(store: &ParamStore, prefix: Option<&str>) -> usize {
    store.num_params(prefix)
}

fn linear(inp: usize, out: usize, rows: usize) -> LayerSpec {
    LayerSpec::Linear { inp, out, rows, bias: true }
}

fn norm(dim: usize, rows: usize) -> LayerSpec {
    LayerSpec::Norm { dim, rows }
}

fn elementwise(elems: usize) -> LayerSpec {
    LayerSpec::Elementwise { elems, params: 0 }
}

fn convnext(w: usize, inter: usize, k: usize, rows: usize) -> LayerList {
    LayerList {
        layers: vec![
            LayerSpec::Conv1d { k, c_in: w, c_out: w, t: rows, groups: w, bias: true },
            norm(w, rows),
            linear(w, inter, rows),
            elementwise(inter * rows),
            linear(inter, w, rows),
            LayerSpec::Elementwise { elems: w * rows, params: w },
            elementwise(w * rows),
        ],
    }
}

#[allow(clippy::too_many_arguments)]
fn mha(q_dim: usize, kv_dim: usize, d: usize, heads: usize, out: Option<usize>, l_q: usize, l_k: usize) -> LayerList {
    let mut l = LayerList {
        layers: vec![
            linear(q_dim, d, l_q),
            linear(kv_dim, d, l_k),
            linear(kv_dim, d, l_k),
            LayerSpec::Attention { l_q, l_k, d, heads },
        ],
    };
    if let Some(o) = out {
        l.push(linear(d, o, l_q));
    }
    l
}

fn self_attention(dim: usize, filter: usize, heads: usize, rows: usize) -> LayerList {
    let mut l = mha(dim, dim, dim, heads, Some(dim), rows, rows);
    l.layers.extend([
        elementwise(dim * rows),
        norm(dim, rows),
        linear(dim, filter, rows),
        elementwise(filter * rows),
        linear(filter, dim, rows),
        elementwise(dim * rows),
        norm(dim, rows),
    ]);
    l
}

/// Latent encoder over `frames` mel frames.
pub fn encoder_layers(cfg: &ModelConfig, frames: usize) -> LayerList {
    let c = &cfg.autoencoder;
    let mut l = LayerList::default();
    l.push(LayerSpec::Conv1d {
        k: c.enc_kernel,
        c_in: cfg.mel.n_mels,
        c_out: c.enc_width,
        t: frames,
        groups: 1,
        bias: true,
    });
    l.push(norm(c.enc_width, frames));
    for _ in 0..c.enc_blocks {
        l.extend(convnext(c.enc_width, c.enc_intermediate, c.enc_kernel, frames));
    }
    l.push(linear(c.enc_width, c.latent_dim, frames));
    l.push(norm(c.latent_dim, frames));
    l
}

/// Latent decoder over `frames` latent frames.
pub fn decoder_layers(cfg: &ModelConfig, frames: usize) -> LayerList {
    let c = &cfg.autoencoder;
    let mut l = LayerList::default();
    l.push(LayerSpec::Conv1d {
        k: c.dec_kernel,
        c_in: c.latent_dim,
        c_out: c.dec_width,
        t: frames,
        groups: 1,
        bias: true,
    });
    l.push(norm(c.dec_width, frames));
    for _ in &c.dec_dilations {
        l.extend(convnext(c.dec_width, c.dec_intermediate, c.dec_kernel, frames));
    }
    l.push(norm(c.dec_width, frames));
    l.push(LayerSpec::Conv1d {
        k: c.dec_head_kernel,
        c_in: c.dec_width,
        c_out: c.dec_head_hidden,
        t: frames,
        groups: 1,
        bias: true,
    });
    l.push(LayerSpec::Elementwise {
        elems: c.dec_head_hidden * frames,
        params: c.dec_head_hidden,
    });
    l.push(linear(c.dec_head_hidden, cfg.mel.hop_size, frames));
    l
}

/// Reference encoder over `ref_frames` compressed frames.
pub fn ref_encoder_layers(cfg: &ModelConfig, ref_frames: usize) -> LayerList {
    let c = &cfg.ttl;
    let h = c.ref_hidden;
    let n = c.n_ref_tokens;
    let mut l = LayerList::default();
    l.push(linear(cfg.compressed_channels(), h, ref_frames));
    for _ in 0..c.ref_blocks {
        l.extend(convnext(h, c.ref_intermediate, c.conv_kernel, ref_frames));
    }
    l.push(LayerSpec::Param { count: n * h });
    for _ in 0..2 {
        l.extend(mha(h, h, h, c.cross_heads, None, n, ref_frames));
        l.push(elementwise(n * h));
    }
    l
}

/// Text encoder over `chars` characters.
pub fn text_encoder_layers(cfg: &ModelConfig, chars: usize) -> LayerList {
    let c = &cfg.ttl;
    let h = c.text_hidden;
    let mut l = LayerList::default();
    l.push(LayerSpec::Embedding { vocab: cfg.vocab_size, dim: h, rows: chars });
    for _ in 0..c.text_conv_blocks {
        l.extend(convnext(h, c.text_intermediate, c.conv_kernel, chars));
    }
    for _ in 0..c.text_attn_blocks {
        l.extend(self_attention(h, c.text_filter, c.text_heads, chars));
    }
    for _ in 0..c.text_cross_layers {
        l.extend(mha(h, c.ref_hidden, h, c.cross_heads, None, chars, c.n_ref_tokens));
        l.push(elementwise(h * chars));
        l.push(norm(h, chars));
    }
    l
}

/// Vector-field estimator over `frames` compressed frames and `chars`
/// encoded text positions.
pub fn vector_field_layers(cfg: &ModelConfig, frames: usize, chars: usize) -> LayerList {
    let c = &cfg.ttl;
    let h = c.vf_hidden;
    let conv = || convnext(h, c.vf_intermediate, c.conv_kernel, frames);
    let cross = |kv: usize, l_k: usize| {
        let mut l = LayerList { layers: vec![norm(h, frames)] };
        l.extend(mha(h, kv, h, c.vf_heads, None, frames, l_k));
        l.push(elementwise(h * frames));
        l
    };
    let mut l = LayerList::default();
    l.push(elementwise(c.time_dim));
    l.push(linear(cfg.compressed_channels(), h, frames));
    for _ in 0..c.vf_main_blocks {
        for _ in &c.vf_dilations {
            l.extend(conv());
        }
        l.push(linear(c.time_dim, h, 1));
        l.push(elementwise(h * frames));
        let before = c.vf_std_blocks / 2;
        for _ in 0..before {
            l.extend(conv());
        }
        l.extend(cross(c.text_hidden, chars));
        for _ in before..c.vf_std_blocks {
            l.extend(conv());
        }
        l.extend(cross(c.ref_hidden, c.n_ref_tokens));
    }
    for _ in 0..c.vf_tail_blocks {
        l.extend(conv());
    }
    l.push(linear(h, cfg.compressed_channels(), frames));
    l
}

/// Shared reference keys and the null conditions.
pub fn ttl_shared_layers(cfg: &ModelConfig) -> LayerList {
    let c = &cfg.ttl;
    LayerList {
        layers: vec![
            LayerSpec::Param { count: c.n_ref_tokens * c.ref_hidden },
            LayerSpec::Param { count: c.n_null_text * c.text_hidden },
            LayerSpec::Param { count: c.n_ref_tokens * c.ref_hidden },
        ],
    }
}

/// Duration predictor for `chars` characters and `ref_frames` frames.
pub fn duration_layers(cfg: &ModelConfig, chars: usize, ref_frames: usize) -> LayerList {
    let c = &cfg.duration;
    let h = c.hidden;
    let n = c.n_queries;
    let mut l = LayerList::default();
    l.push(linear(cfg.compressed_channels(), h, ref_frames));
    for _ in 0..c.ref_blocks {
        l.extend(convnext(h, c.ref_intermediate, c.conv_kernel, ref_frames));
    }
    l.push(LayerSpec::Param { count: n * h });
    l.extend(mha(h, h, c.attn_dim, c.heads, None, n, ref_frames));
    l.extend(mha(c.attn_dim, h, c.attn_dim, c.heads, Some(h / n), n, ref_frames));
    l.push(LayerSpec::Embedding { vocab: cfg.vocab_size, dim: h, rows: chars });
    for _ in 0..c.text_conv_blocks {
        l.extend(convnext(h, c.text_intermediate, c.conv_kernel, chars));
    }
    l.push(LayerSpec::Param { count: h });
    for _ in 0..c.attn_blocks {
        l.extend(self_attention(h, c.filter, c.heads, chars + 1));
    }
    l.push(linear(h, h, 1));
    l.push(linear(2 * h, 2 * h, 1));
    l.push(LayerSpec::Elementwise { elems: 2 * h, params: 2 * h });
    l.push(linear(2 * h, 1, 1));
    l.push(elementwise(1));
    l
}

/// Sequence lengths of one text-to-latent training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtlWorkload {
    pub batch: usize,
    pub k_e: usize,
    /// Compressed latent frames per item.
    pub frames: usize,
    pub chars: usize,
    /// Compressed reference frames per item.
    pub ref_frames: usize,
}

impl TtlWorkload {
    /// Workload given in seconds of speech and reference audio.
    pub fn from_seconds(cfg: &ModelConfig, speech_s: f64, chars: usize, ref_s: f64, batch: usize, k_e: usize) -> Self {
        let frames = |s: f64| {
            let latent = (s * cfg.mel.sample_rate as f64 / cfg.mel.hop_size as f64).round() as usize;
            latent.div_ceil(cfg.ttl.k_c)
        };
        Self {
            batch,
            k_e,
            frames: frames(speech_s),
            chars,
            ref_frames: frames(ref_s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtlFlops {
    /// Reference and text encoders, run once per source item.
    pub encoders: Cost,
    /// Vector-field estimator, run once per expanded entry.
    pub denoiser: Cost,
}

impl TtlFlops {
    pub fn total(&self) -> Cost {
        self.encoders + self.denoiser
    }
}

/// Forward cost of one expanded batch: `B` encoder passes and `B K_e`
/// vector-field passes.
pub fn ttl_forward_flops(cfg: &ModelConfig, w: &TtlWorkload) -> Result<TtlFlops> {
    if w.batch == 0 || w.k_e == 0 || w.frames == 0 || w.chars == 0 || w.ref_frames == 0 {
        return Err(Error::InvalidArgument(format!("degenerate workload {w:?}")));
    }
    let enc = ref_encoder_layers(cfg, w.ref_frames).cost() + text_encoder_layers(cfg, w.chars).cost();
    let vf = vector_field_layers(cfg, w.frames, w.chars).cost();
    Ok(TtlFlops {
        encoders: enc.scale(w.batch as f64),
        denoiser: vf.scale((w.batch * w.k_e) as f64),
    })
}

/// Activation bytes kept for backward in one training step, assuming every
/// layer output stays live.
pub fn ttl_activation_bytes(cfg: &ModelConfig, w: &TtlWorkload) -> usize {
    let bytes = cfg.dtype().size_in_bytes();
    let enc = ref_encoder_layers(cfg, w.ref_frames).activation_elems()
        + text_encoder_layers(cfg, w.chars).activation_elems();
    let vf = vector_field_layers(cfg, w.frames, w.chars).activation_elems();
    bytes * (w.batch * enc + w.batch * w.k_e * vf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub text_to_latent: usize,
    pub ref_encoder: usize,
    pub text_encoder: usize,
    pub vector_field: usize,
    pub latent_decoder: usize,
    pub latent_encoder: usize,
    pub duration_predictor: usize,
    /// Inference stack: text-to-latent, decoder and duration predictor.
    pub all: usize,
}

/// Closed-form counts from the layer lists (no instantiation).
pub fn analytic_params(cfg: &ModelConfig) -> ParamReport {
    let r = ref_encoder_layers(cfg, 1).params();
    let t = text_encoder_layers(cfg, 1).params();
    let v = vector_field_layers(cfg, 1, 1).params();
    let ttl = r + t + v + ttl_shared_layers(cfg).params();
    let dec = decoder_layers(cfg, 1).params();
    let dp = duration_layers(cfg, 1, 1).params();
    ParamReport {
        text_to_latent: ttl,
        ref_encoder: r,
        text_encoder: t,
        vector_field: v,
        latent_decoder: dec,
        latent_encoder: encoder_layers(cfg, 1).params(),
        duration_predictor: dp,
        all: ttl + dec + dp,
    }
}

/// Counts read off instantiated parameter stores.
pub fn measured_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let ttl = crate::text_to_latent::TextToLatent::new(cfg, 0)?;
    let ae = crate::autoencoder::SpeechAutoencoder::new(cfg, 0)?;
    let dp = crate::duration::DurationPredictor::new(cfg, 0)?;
    let s = ttl.store();
    let total = count_params(s, None);
    let dec = count_params(ae.store(), Some("decoder"));
    let dpn = count_params(dp.store(), None);
    Ok(ParamReport {
        text_to_latent: total,
        ref_encoder: count_params(s, Some("ref_encoder")),
        text_encoder: count_params(s, Some("text_encoder")),
        vector_field: count_params(s, Some("vf")),
        latent_decoder: dec,
        latent_encoder: count_params(ae.store(), Some("encoder")),
        duration_predictor: dpn,
        all: total + dec + dpn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub trials: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Half-width of the two-sided 95% confidence interval of the mean.
    pub ci95_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl TimingStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Result<Self> {
        let n = samples_ms.len();
        if n < 2 {
            return Err(Error::InvalidArgument("timing needs at least 2 trials".into()));
        }
        let mean = samples_ms.iter().sum::<f64>() / n as f64;
        let var = samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        Ok(Self {
            trials: n,
            mean_ms: mean,
            std_ms: std,
            ci95_ms: t_critical_95(n - 1) * std / (n as f64).sqrt(),
            samples_ms,
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean_ms - self.ci95_ms, self.mean_ms + self.ci95_ms)
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        let (a0, a1) = self.interval();
        let (b0, b1) = other.interval();
        a0 <= b1 && b0 <= a1
    }
}

/// Two-sided 95% Student-t quantile.
fn t_critical_95(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179,
        2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
        2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match df {
        0 => f64::INFINITY,
        1..=30 => TABLE[df - 1],
        31..=60 => 2.000,
        61..=120 => 1.980,
        _ => 1.960,
    }
}

/// Runs `f` `warmup` times untimed, then `trials` timed times.
pub fn benchmark<T>(warmup: usize, trials: usize, mut f: impl FnMut() -> Result<T>) -> Result<TimingStats> {
    if trials < 2 {
        return Err(Error::InvalidArgument("timing needs at least 2 trials".into()));
    }
    for i in 0..warmup {
        f().map_err(|e| Error::Trial { trial: i, source: Box::new(e) })?;
    }
    let mut samples = Vec::with_capacity(trials);
    for i in 0..trials {
        let t0 = Instant::now();
        let out = f().map_err(|e| Error::Trial { trial: i, source: Box::new(e) })?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    TimingStats::from_samples(samples)
}

/// Real-time factor: wall time over produced audio duration.
pub fn rtf(wall_seconds: f64, audio_seconds: f64) -> f64 {
    wall_seconds / audio_seconds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub preset: String,
    pub params: ParamReport,
    pub workload: TtlWorkload,
    pub forward: TtlFlops,
    pub gmacs: f64,
    pub gflops: f64,
    pub activation_bytes: usize,
    pub timing: Option<TimingStats>,
}

impl ProfileReport {
    pub fn new(cfg: &ModelConfig, workload: TtlWorkload) -> Result<Self> {
        let forward = ttl_forward_flops(cfg, &workload)?;
        Ok(Self {
            preset: format!("{:?}", cfg.preset).to_lowercase(),
            params: analytic_params(cfg),
            workload,
            forward,
            gmacs: forward.total().gmacs(),
            gflops: forward.total().gflops(),
            activation_bytes: ttl_activation_bytes(cfg, &workload),
            timing: None,
        })
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match serde_json::to_string_pretty(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => Err(fmt::Error),
        }
    }
}

/// One row of the batch-expansion grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub batch: usize,
    pub k_e: usize,
    pub gmacs: f64,
    pub gflops: f64,
    pub activation_gib: f64,
}

pub const EXPANSION_HEADER: &str = "batch,k_e,gmacs,gflops,activation_gib";

impl ExpansionRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3}",
            self.batch, self.k_e, self.gmacs, self.gflops, self.activation_gib
        )
    }
}

/// Analytic cost over a `(B, K_e)` grid at a fixed per-item workload.
pub fn expansion_grid(cfg: &ModelConfig, base: TtlWorkload, grid: &[(usize, usize)]) -> Result<Vec<ExpansionRow>> {
    grid.iter()
        .map(|&(batch, k_e)| {
            let w = TtlWorkload { batch, k_e, ..base };
            let c = ttl_forward_flops(cfg, &w)?.total();
            Ok(ExpansionRow {
                batch,
                k_e,
                gmacs: c.gmacs(),
                gflops: c.gflops(),
                activation_gib: ttl_activation_bytes(cfg, &w) as f64 / (1u64 << 30) as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_example_and_parser() {
        let l: LayerSpec = "conv1d k=7 c_in=4 c_out=4 t=10".parse().unwrap();
        assert_eq!(l.cost().flops, 2240.0);
        assert_eq!(l.cost().macs, 1120.0);
        assert!("pooling k=2".parse::<LayerSpec>().is_err());
        assert!("conv1d k=7".parse::<LayerSpec>().is_err());
        let lin: LayerSpec = "linear in=10 out=5 bias=true".parse().unwrap();
        assert_eq!(lin.params(), 55);
    }

    #[test]
    fn analytic_counts_match_instantiated_stores() {
        for cfg in [ModelConfig::toy(), ModelConfig::tiny()] {
            assert_eq!(analytic_params(&cfg), measured_params(&cfg).unwrap());
        }
    }

    #[test]
    fn conv_cost_is_linear_in_length() {
        let cfg = ModelConfig::toy();
        let c: Vec<f64> = [100, 200, 400].iter().map(|&t| decoder_layers(&cfg, t).cost().flops).collect();
        assert_eq!(c[1] - c[0], (c[2] - c[1]) / 2.0);
        assert_eq!(c[0] * 2.0, c[1]);
    }

    #[test]
    fn expansion_identity() {
        let cfg = ModelConfig::paper();
        let w = TtlWorkload::from_seconds(&cfg, 15.0, 250, 3.0, 16, 1);
        let one = ttl_forward_flops(&cfg, &w).unwrap();
        for k in [1, 2, 4, 8] {
            let f = ttl_forward_flops(&cfg, &TtlWorkload { k_e: k, ..w }).unwrap();
            assert_eq!(f.total().flops, one.encoders.flops + k as f64 * one.denoiser.flops);
        }
    }

    #[test]
    fn timing_stats_and_errors() {
        let s = TimingStats::from_samples(vec![1.0, 2.0, 3.0]).unwrap();
        assert!((s.mean_ms - 2.0).abs() < 1e-12);
        assert!((s.ci95_ms - 4.303 / 3f64.sqrt()).abs() < 1e-9);
        assert!(TimingStats::from_samples(vec![1.0]).is_err());
        let mut n = 0;
        let r = benchmark(0, 5, || {
            n += 1;
            if n == 3 {
                Err(Error::EmptyInput("x"))
            } else {
                Ok(())
            }
        });
        match r {
            Err(Error::Trial { trial, .. }) => assert_eq!(trial, 2),
            other => panic!("{other:?}"),
        }
    }
}
