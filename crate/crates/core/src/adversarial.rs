//! Multi-period and multi-resolution discriminators, least-squares GAN
//! objectives and the autoencoder training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{multires_configs, reflect_index, AudioWaveform};
use crate::autoencoder::SpeechAutoencoder;
use crate::config::{DiscriminatorConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{conv, leaky_relu, Init, Mode, ParamStore, Scope, Stft};

/// Scores and intermediate activations of a set of sub-discriminators.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// One score map per sub-discriminator.
    pub scores: Vec<Tensor>,
    /// Every layer's activation, over all sub-discriminators (score maps included).
    pub features: Vec<Tensor>,
}

impl DiscriminatorOutput {
    fn merge(parts: Vec<DiscriminatorOutput>) -> Self {
        let mut scores = Vec::new();
        let mut features = Vec::new();
        for p in parts {
            scores.extend(p.scores);
            features.extend(p.features);
        }
        Self { scores, features }
    }
}

/// Weight-normalized 1-D convolution over `[N, C, T]`.
#[derive(Debug, Clone)]
struct WnConv1d {
    v: Tensor,
    g: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl WnConv1d {
    fn new(vs: &Scope, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let std = (1.0 / (cin * kernel) as f64).sqrt();
        let v = vs.param("v", (cout, cin, kernel), Init::Normal(std))?;
        let norms: Vec<f64> = v
            .to_dtype(DType::F64)?
            .sqr()?
            .sum((1, 2))?
            .sqrt()?
            .to_vec1()?;
        // g = ||v|| so the initial weight equals v.
        let g = vs.param_from("g", Tensor::from_vec(norms, cout, &Device::Cpu)?)?;
        Ok(Self {
            v,
            g,
            bias: vs.param("bias", cout, Init::Const(0.0))?,
            stride,
            padding: (kernel - 1) / 2,
        })
    }

    fn weight(&self) -> Result<Tensor> {
        let norm = self.v.sqr()?.sum_keepdim((1, 2))?.sqrt()?;
        let scale = self.g.unsqueeze(1)?.unsqueeze(2)?.div(&norm)?;
        Ok(self.v.broadcast_mul(&scale)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv1d(x, &self.weight()?, self.padding, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.unsqueeze(1)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct PeriodDiscriminator {
    period: usize,
    layers: Vec<WnConv1d>,
    slope: f64,
}

impl PeriodDiscriminator {
    fn new(vs: &Scope, period: usize, c: &DiscriminatorConfig) -> Result<Self> {
        let n = c.mpd_channels.len();
        let mut layers = Vec::with_capacity(n);
        let mut cin = 1;
        for (i, &cout) in c.mpd_channels.iter().enumerate() {
            let (kernel, stride) = if i == n - 1 {
                (3, 1)
            } else if i == n - 2 {
                (c.mpd_kernel, 1)
            } else {
                (c.mpd_kernel, c.mpd_stride)
            };
            layers.push(WnConv1d::new(
                &vs.pp(format!("layers.{i}")),
                cin,
                cout,
                kernel,
                stride,
            )?);
            cin = cout;
        }
        Ok(Self {
            period,
            layers,
            slope: c.leaky_slope,
        })
    }

    /// `[B, N]` to `[B * period, 1, ceil(N / period)]` after reflect padding.
    pub fn fold(&self, wave: &Tensor) -> Result<Tensor> {
        let (b, n) = wave.dims2()?;
        let p = self.period;
        let pad = period_pad(n, p);
        let wave = if pad > 0 {
            let idx: Vec<u32> = (0..n + pad)
                .map(|i| reflect_index(i as isize, n) as u32)
                .collect();
            wave.index_select(&Tensor::from_vec(idx, n + pad, wave.device())?, 1)?
        } else {
            wave.clone()
        };
        let t = (n + pad) / p;
        Ok(wave
            .reshape((b, t, p))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, 1, t))?)
    }

    pub fn forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        let mut h = self.fold(wave)?;
        let mut features = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = leaky_relu(&h, self.slope)?;
            }
            features.push(h.clone());
        }
        Ok(DiscriminatorOutput {
            scores: vec![h],
            features,
        })
    }
}

/// Samples appended so the length becomes a multiple of `period`.
pub fn period_pad(len: usize, period: usize) -> usize {
    (period - len % period) % period
}

#[derive(Debug, Clone)]
struct Conv2dLayer {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    freq_stride: usize,
}

/// `(in, out, kernel, frequency stride)` for each layer of one resolution.
pub fn mrd_layer_specs(channels: usize) -> Vec<(usize, usize, usize, usize)> {
    vec![
        (1, channels, 5, 1),
        (channels, channels, 5, 2),
        (channels, channels, 5, 2),
        (channels, channels, 5, 2),
        (channels, channels, 5, 1),
        (channels, 1, 3, 1),
    ]
}

#[derive(Debug, Clone)]
pub struct ResolutionDiscriminator {
    stft: Stft,
    layers: Vec<Conv2dLayer>,
    slope: f64,
}

impl ResolutionDiscriminator {
    fn new(vs: &Scope, fft: usize, c: &DiscriminatorConfig) -> Result<Self> {
        let layers = mrd_layer_specs(c.mrd_channels)
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k, s))| {
                let s_vs = vs.pp(format!("layers.{i}"));
                let std = (1.0 / (cin * k * k) as f64).sqrt();
                Ok(Conv2dLayer {
                    weight: s_vs.param("weight", (cout, cin, k, k), Init::Normal(std))?,
                    bias: s_vs.param("bias", cout, Init::Const(0.0))?,
                    kernel: k,
                    freq_stride: s,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stft: Stft::new(fft, fft / 4, fft, vs.dtype())?,
            layers,
            slope: c.leaky_slope,
        })
    }

    /// `(in, out, kernel, frequency stride)` of each layer, for introspection.
    pub fn layer_specs(&self) -> Vec<(usize, usize, usize, usize)> {
        self.layers
            .iter()
            .map(|l| {
                let d = l.weight.dims();
                (d[1], d[0], l.kernel, l.freq_stride)
            })
            .collect()
    }

    pub fn forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        // [B, T, F] -> [B, 1, F, T]
        let spec = self.stft.log_spectrum(wave)?;
        let mut h = spec.transpose(1, 2)?.unsqueeze(1)?.contiguous()?;
        let mut features = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = conv::conv2d(&h, &l.weight, l.kernel / 2)?;
            if l.freq_stride > 1 {
                let f = h.dim(2)?;
                let idx: Vec<u32> = (0..f).step_by(l.freq_stride).map(|i| i as u32).collect();
                let n = idx.len();
                h = h.index_select(&Tensor::from_vec(idx, n, h.device())?, 2)?;
            }
            h = h.broadcast_add(&l.bias.reshape((1, (), 1, 1))?)?;
            if i < last {
                h = leaky_relu(&h, self.slope)?;
            }
            features.push(h.clone());
        }
        Ok(DiscriminatorOutput {
            scores: vec![h],
            features,
        })
    }
}

/// All MPD and MRD sub-discriminators with their own parameter store.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub mpd: Vec<PeriodDiscriminator>,
    pub mrd: Vec<ResolutionDiscriminator>,
    store: ParamStore,
}

impl Discriminators {
    pub fn new(c: &DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, seed);
        let mpd = c
            .mpd_periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&store.scope(&format!("mpd.{p}")), p, c))
            .collect::<Result<_>>()?;
        let mrd = c
            .mrd_ffts
            .iter()
            .map(|&f| ResolutionDiscriminator::new(&store.scope(&format!("mrd.{f}")), f, c))
            .collect::<Result<_>>()?;
        Ok(Self { mpd, mrd, store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn mpd_forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        let n = wave.dim(1)?;
        if let Some(&p) = self.mpd.iter().map(|d| &d.period).max() {
            if n < p {
                return Err(Error::InvalidArgument(format!(
                    "segment of {n} samples is shorter than period {p}"
                )));
            }
        }
        Ok(DiscriminatorOutput::merge(
            self.mpd
                .iter()
                .map(|d| d.forward(wave))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn mrd_forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        Ok(DiscriminatorOutput::merge(
            self.mrd
                .iter()
                .map(|d| d.forward(wave))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        Ok(DiscriminatorOutput::merge(vec![
            self.mpd_forward(wave)?,
            self.mrd_forward(wave)?,
        ]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLossWeights {
    pub lambda_recon: f64,
    pub lambda_adv: f64,
    pub lambda_fm: f64,
}

impl GanLossWeights {
    pub fn from_config(tc: &crate::config::AeTrainConfig) -> Self {
        Self {
            lambda_recon: tc.lambda_recon,
            lambda_adv: tc.lambda_adv,
            lambda_fm: tc.lambda_fm,
        }
    }

    pub fn combine(&self, recon: f64, adv: f64, fm: f64) -> f64 {
        self.lambda_recon * recon + self.lambda_adv * adv + self.lambda_fm * fm
    }
}

/// Multi-resolution log-mel L1 loss.
#[derive(Debug, Clone)]
pub struct MelReconLoss {
    views: Vec<Stft>,
}

impl MelReconLoss {
    pub fn new(c: &DiscriminatorConfig, sample_rate: u32, dtype: DType) -> Result<Self> {
        let views = multires_configs(&c.recon_ffts, &c.recon_mels, sample_rate)
            .iter()
            .map(|m| Stft::log_mel(m, dtype))
            .collect::<Result<_>>()?;
        Ok(Self { views })
    }

    /// Mean over resolutions of the mean absolute log-mel difference.
    pub fn forward(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let mut terms = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let d = (v.log_spectrum(real)? - v.log_spectrum(fake)?)?
                .abs()?
                .mean_all()?;
            terms.push(d);
        }
        Ok((Tensor::stack(&terms, 0)?.mean_all())?)
    }
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Mean over sub-discriminators of `mean((D(G(x)) - 1)^2)`.
pub fn adversarial_g_loss(fake: &DiscriminatorOutput) -> Result<Tensor> {
    mean_of(
        fake.scores
            .iter()
            .map(|s| Ok((s - 1.0)?.sqr()?.mean_all()?))
            .collect::<Result<_>>()?,
    )
}

/// Mean over sub-discriminators of `mean((D(G(x)) + 1)^2) + mean((D(x) - 1)^2)`.
pub fn discriminator_loss(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
) -> Result<Tensor> {
    mean_of(
        real.scores
            .iter()
            .zip(&fake.scores)
            .map(|(r, f)| Ok(((f + 1.0)?.sqr()?.mean_all()? + (r - 1.0)?.sqr()?.mean_all()?)?))
            .collect::<Result<_>>()?,
    )
}

/// Mean over layers of the mean absolute feature difference.
pub fn feature_matching_loss(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
) -> Result<Tensor> {
    mean_of(
        real.features
            .iter()
            .zip(&fake.features)
            .map(|(r, f)| Ok((r.detach() - f)?.abs()?.mean_all()?))
            .collect::<Result<_>>()?,
    )
}

#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub recon: f64,
    pub adv: f64,
    pub fm: f64,
}

fn scalar(t: &Tensor, name: &'static str) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name))
    }
}

pub fn generator_loss(
    recon: &MelReconLoss,
    real: &Tensor,
    fake: &Tensor,
    d_real: &DiscriminatorOutput,
    d_fake: &DiscriminatorOutput,
    w: &GanLossWeights,
) -> Result<GeneratorLoss> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} differ in shape",
            real.dims(),
            fake.dims()
        )));
    }
    let l_recon = recon.forward(real, fake)?;
    let l_adv = adversarial_g_loss(d_fake)?;
    let l_fm = feature_matching_loss(d_real, d_fake)?;
    let (r, a, f) = (
        scalar(&l_recon, "l_recon")?,
        scalar(&l_adv, "l_adv_g")?,
        scalar(&l_fm, "l_fm")?,
    );
    let total = ((l_recon * w.lambda_recon)? + (l_adv * w.lambda_adv)? + (l_fm * w.lambda_fm)?)?;
    Ok(GeneratorLoss {
        total,
        recon: r,
        adv: a,
        fm: f,
    })
}

/// One row of the autoencoder metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct AeMetrics {
    pub step: usize,
    pub l_recon: f64,
    pub l_adv_g: f64,
    pub l_fm: f64,
    pub l_d: f64,
    pub wall_ms: f64,
}

pub const AE_METRICS_HEADER: &str = "step,l_recon,l_adv_g,l_fm,l_d,wall_ms";

impl AeMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step, self.l_recon, self.l_adv_g, self.l_fm, self.l_d, self.wall_ms
        )
    }
}

pub struct AeTrainOutput {
    pub autoencoder: SpeechAutoencoder,
    pub discriminators: Discriminators,
    pub metrics: Vec<AeMetrics>,
}

/// Draws `batch` crops of `len` samples (zero-padded when the clip is shorter).
fn sample_crops(
    corpus: &[AudioWaveform],
    batch: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
    dtype: DType,
) -> Result<Tensor> {
    let mut v = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let clip = &corpus[rng.random_range(0..corpus.len())];
        let start = if clip.len() > len {
            rng.random_range(0..=clip.len() - len)
        } else {
            0
        };
        let end = (start + len).min(clip.len());
        v.extend(clip.samples[start..end].iter().map(|&s| s as f64));
        v.extend(std::iter::repeat_n(0.0, len - (end - start)));
    }
    Ok(Tensor::from_vec(v, (batch, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Alternating discriminator and generator updates on random crops.
///
/// When `metrics_path` is set, one CSV row per step is appended there.
pub fn train_autoencoder(
    corpus: &[AudioWaveform],
    cfg: &ModelConfig,
    metrics_path: Option<&Path>,
) -> Result<AeTrainOutput> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("autoencoder corpus"));
    }
    let tc = &cfg.ae_train;
    let hop = cfg.mel.hop_size;
    if tc.segment_len % hop != 0 || tc.segment_len == 0 {
        return Err(Error::Config(format!(
            "segment_len {} must be a positive multiple of hop {hop}",
            tc.segment_len
        )));
    }
    if let Some(a) = corpus.iter().find(|a| a.sample_rate != cfg.mel.sample_rate) {
        return Err(Error::SampleRateMismatch {
            expected: cfg.mel.sample_rate,
            actual: a.sample_rate,
        });
    }
    let dtype = cfg.dtype();
    let ae = SpeechAutoencoder::new(cfg, tc.seed)?;
    let disc = Discriminators::new(&cfg.discriminator, dtype, tc.seed.wrapping_add(1))?;
    let mel = Stft::log_mel(&cfg.mel, dtype)?;
    let recon = MelReconLoss::new(&cfg.discriminator, cfg.mel.sample_rate, dtype)?;
    let weights = GanLossWeights::from_config(tc);
    let params = ParamsAdamW {
        lr: tc.lr,
        beta1: tc.betas.0,
        beta2: tc.betas.1,
        eps: 1e-8,
        weight_decay: tc.weight_decay,
    };
    let mut opt_g = AdamW::new(ae.store().trainable_vars(None), params.clone())?;
    let mut opt_d = AdamW::new(disc.store().trainable_vars(None), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let frames = tc.segment_len / hop;

    let mut log = match metrics_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "{AE_METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let t0 = Instant::now();
        let real = sample_crops(corpus, tc.batch_size, tc.segment_len, &mut rng, dtype)?;
        let m = mel.log_spectrum(&real)?.narrow(1, 0, frames)?;
        let z = ae.encoder.forward(&m, Mode::Train)?;
        let fake = ae.decoder.forward(&z, Mode::Train)?;

        let d_real = disc.forward(&real)?;
        let d_fake = disc.forward(&fake.detach())?;
        let l_d = discriminator_loss(&d_real, &d_fake)?;
        let l_d_val = scalar(&l_d, "l_d")?;
        opt_d.backward_step(&l_d)?;

        let d_real = disc.forward(&real)?;
        let d_fake = disc.forward(&fake)?;
        let g = generator_loss(&recon, &real, &fake, &d_real, &d_fake, &weights)?;
        opt_g.backward_step(&g.total)?;

        let row = AeMetrics {
            step,
            l_recon: g.recon,
            l_adv_g: g.adv,
            l_fm: g.fm,
            l_d: l_d_val,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("{}", row.csv_row());
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", row.csv_row())?;
        }
        metrics.push(row);
    }
    Ok(AeTrainOutput {
        autoencoder: ae,
        discriminators: disc,
        metrics,
    })
}

/// Mean of `l_recon` over the first `n` logged steps.
pub fn early_recon_average(metrics: &[AeMetrics], n: usize) -> f64 {
    let k = n.min(metrics.len()).max(1);
    metrics.iter().take(k).map(|m| m.l_recon).sum::<f64>() / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: (usize, usize), seed: u64, dtype: DType) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..shape.0 * shape.1)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.3 * z
            })
            .collect::<Vec<f64>>();
        Tensor::from_vec(v, shape, &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    fn scores(values: &[f64]) -> DiscriminatorOutput {
        let s: Vec<Tensor> = values
            .iter()
            .map(|&v| Tensor::full(v, (1, 1, 3), &Device::Cpu).unwrap())
            .collect();
        DiscriminatorOutput {
            features: s.clone(),
            scores: s,
        }
    }

    #[test]
    fn period_padding_rule() {
        assert_eq!(period_pad(8192, 7), 5);
        assert_eq!(period_pad(8192, 2), 0);
        assert_eq!(period_pad(8192, 11), 11 - 8192 % 11);
    }

    #[test]
    fn paper_discriminator_shapes() {
        let d = Discriminators::new(&ModelConfig::paper().discriminator, DType::F32, 0).unwrap();
        let x = randn((1, 8192), 0, DType::F32);
        let mpd = d.mpd_forward(&x).unwrap();
        assert_eq!(mpd.scores.len(), 5);
        assert_eq!(mpd.features.len(), 5 * 6);
        let mrd = d.mrd_forward(&x).unwrap();
        assert_eq!(mrd.scores.len(), 3);
        for r in &d.mrd {
            assert_eq!(
                r.layer_specs(),
                vec![
                    (1, 16, 5, 1),
                    (16, 16, 5, 2),
                    (16, 16, 5, 2),
                    (16, 16, 5, 2),
                    (16, 16, 5, 1),
                    (16, 1, 3, 1)
                ]
            );
        }
        let folded = d.mpd[3].fold(&x).unwrap();
        assert_eq!(folded.dims(), &[7, 1, (8192 + 5) / 7]);
    }

    #[test]
    fn silence_gives_finite_scores() {
        let d = Discriminators::new(&ModelConfig::toy().discriminator, DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 8192), DType::F32, &Device::Cpu).unwrap();
        let out = d.forward(&x).unwrap();
        for s in &out.scores {
            let v: Vec<f32> = s.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn short_segment_is_rejected() {
        let d = Discriminators::new(&ModelConfig::toy().discriminator, DType::F32, 0).unwrap();
        assert!(d.mpd_forward(&randn((1, 10), 0, DType::F32)).is_err());
    }

    #[test]
    fn loss_zero_cases() {
        assert_eq!(
            adversarial_g_loss(&scores(&[1.0, 1.0]))
                .unwrap()
                .to_scalar::<f64>()
                .unwrap(),
            0.0
        );
        let l = discriminator_loss(&scores(&[1.0]), &scores(&[-1.0])).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
        let l = discriminator_loss(&scores(&[0.0, 0.0]), &scores(&[0.0, 0.0])).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 2.0);
        // D(fake) = -1: generator term is 4 per element, discriminator fake term 0.
        let g = adversarial_g_loss(&scores(&[-1.0])).unwrap();
        assert_eq!(g.to_scalar::<f64>().unwrap(), 4.0);
    }

    #[test]
    fn weighted_combination() {
        let w = GanLossWeights {
            lambda_recon: 45.0,
            lambda_adv: 1.0,
            lambda_fm: 0.1,
        };
        assert!((w.combine(0.2, 0.5, 0.3) - 9.53).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_have_zero_recon_and_fm() {
        let cfg = ModelConfig::tiny();
        let d = Discriminators::new(&cfg.discriminator, DType::F64, 0).unwrap();
        let r = MelReconLoss::new(&cfg.discriminator, 44_100, DType::F64).unwrap();
        let x = randn((2, 256), 1, DType::F64);
        let dr = d.forward(&x).unwrap();
        let w = GanLossWeights {
            lambda_recon: 45.0,
            lambda_adv: 1.0,
            lambda_fm: 0.1,
        };
        let g = generator_loss(&r, &x, &x, &dr, &dr, &w).unwrap();
        assert_eq!(g.recon, 0.0);
        assert_eq!(g.fm, 0.0);
        let y = (&x + 1e-3).unwrap();
        let dy = d.forward(&y).unwrap();
        assert!(
            feature_matching_loss(&dr, &dy)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
                > 0.0
        );
    }

    #[test]
    fn discriminator_loss_gradient_matches_central_difference() {
        let eval = |f: f64, r: f64| {
            let l = discriminator_loss(&scores(&[r]), &scores(&[f])).unwrap();
            l.to_scalar::<f64>().unwrap()
        };
        let (f0, r0) = (0.37, -0.21);
        let fv = candle_core::Var::new(&[[[f0, f0, f0]]], &Device::Cpu).unwrap();
        let real = scores(&[r0]);
        let fake = DiscriminatorOutput {
            scores: vec![fv.as_tensor().clone()],
            features: vec![],
        };
        let grads = discriminator_loss(&real, &fake)
            .unwrap()
            .backward()
            .unwrap();
        let g: f64 = grads
            .get(&fv)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        let h = 1e-6;
        let fd = (eval(f0 + h, r0) - eval(f0 - h, r0)) / (2.0 * h);
        assert!((g - fd).abs() <= 1e-6 * fd.abs().max(1e-12));
    }

    #[test]
    fn zero_steps_returns_initial_parameters() {
        let mut cfg = ModelConfig::tiny();
        cfg.ae_train.steps = 0;
        cfg.ae_train.segment_len = 256;
        let audio = AudioWaveform::sine(440.0, 0.5, 1024, 44_100);
        let out = train_autoencoder(&[audio], &cfg, None).unwrap();
        let init = SpeechAutoencoder::new(&cfg, cfg.ae_train.seed).unwrap();
        let a = out.autoencoder.store().snapshot().unwrap();
        let b = init.store().snapshot().unwrap();
        for (k, t) in &a {
            let x: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f64> = b[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn fixed_seed_training_is_deterministic() {
        let mut cfg = ModelConfig::tiny();
        cfg.ae_train.steps = 3;
        cfg.ae_train.segment_len = 256;
        let audio = AudioWaveform::sine(440.0, 0.5, 2048, 44_100);
        let run = || {
            train_autoencoder(std::slice::from_ref(&audio), &cfg, None)
                .unwrap()
                .metrics
                .into_iter()
                .map(|m| (m.l_recon, m.l_adv_g, m.l_fm, m.l_d))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(train_autoencoder(&[], &ModelConfig::tiny(), None).is_err());
    }
}
