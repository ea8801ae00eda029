use std::path::Path;
use std::time::Duration;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use supertonic::audio::{write_wav, AudioWaveform, WavFormat};
use supertonic::autoencoder::{Latent, SpeechAutoencoder};
use supertonic::checkpoint::{self, Component};
use supertonic::config::ModelConfig;
use supertonic::corpus_io::{cache_latents, load_manifest, read_record, CacheIndex, Split};
use supertonic::duration::{train_duration, DurationPredictor, DurationSample};
use supertonic::flow_training::{
    normalize_items, synthetic_corpus, train_ttl, SyntheticSpec, TrainingItem, TtlTrainOptions, ValidationSet,
};
use supertonic::latent_ops::{decompress, LatentStats};
use supertonic::profiler::{benchmark, rtf};
use supertonic::sampler::{Pipeline, SamplerConfig};
use supertonic::text::CharacterSequence;
use supertonic::text_to_latent::TextToLatent;
use supertonic::Error;

fn toy_pipeline() -> Pipeline {
    let cfg = ModelConfig::toy();
    let duration = DurationPredictor::new(&cfg, 2).unwrap();
    duration.set_output_offset(30.0).unwrap();
    Pipeline {
        autoencoder: SpeechAutoencoder::new(&cfg, 0).unwrap(),
        text_to_latent: TextToLatent::new(&cfg, 1).unwrap(),
        duration,
        stats: LatentStats::identity(cfg.compressed_channels(), cfg.ttl.k_c),
        cfg,
    }
}

fn tone(seconds: f64, freq: f64, sr: u32) -> AudioWaveform {
    AudioWaveform::sine(freq, 0.4, (seconds * sr as f64) as usize, sr)
}

fn finite(a: &AudioWaveform) -> bool {
    a.samples.iter().all(|x| x.is_finite())
}

/// Duration samples from the synthetic corpus, whose frame count is
/// `frames_per_char * chars`.
fn duration_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<DurationSample> {
    let spec = SyntheticSpec::for_config(cfg);
    synthetic_corpus(n, seed, &spec)
        .unwrap()
        .into_iter()
        .map(|s| DurationSample {
            ids: s.item.chars.ids.clone(),
            target_frames: s.item.frames(),
            latent: s.item.z1.values.t().unwrap().contiguous().unwrap(),
        })
        .collect()
}

#[test]
fn duration_learns_linear_length_relation() {
    let cfg = ModelConfig::toy();
    let train = duration_samples(&cfg, 256, 1);
    let out = train_duration(&train, &cfg, None).unwrap();
    let test = duration_samples(&cfg, 64, 2);
    let mut abs = 0.0;
    let mut total = 0.0;
    for s in &test {
        let p = out
            .model
            .predict(&CharacterSequence { ids: s.ids.clone() }, &s.latent)
            .unwrap();
        abs += (p - s.target_frames as f64).abs();
        total += s.target_frames as f64;
    }
    let mae = abs / total;
    assert!(mae < 0.10, "relative MAE {mae:.4}");
}

#[test]
fn duration_converges_to_constant_target() {
    let cfg = ModelConfig::toy();
    let mut train = duration_samples(&cfg, 64, 3);
    for s in &mut train {
        s.target_frames = 25;
    }
    let out = train_duration(&train, &cfg, None).unwrap();
    for s in train.iter().take(16) {
        let p = out
            .model
            .predict(&CharacterSequence { ids: s.ids.clone() }, &s.latent)
            .unwrap();
        assert!((p - 25.0).abs() <= 0.02 * 25.0, "{p}");
    }
}

#[test]
fn ttl_validation_drops_after_500_steps() {
    let mut cfg = ModelConfig::toy();
    cfg.flow_train.steps = 500;
    let spec = SyntheticSpec::for_config(&cfg);
    let train: Vec<TrainingItem> = synthetic_corpus(256, 0, &spec).unwrap().into_iter().map(|s| s.item).collect();
    let latents: Vec<Tensor> = train.iter().map(|i| i.z1.values.t().unwrap()).collect();
    let stats = LatentStats::fit(latents.iter(), cfg.ttl.k_c).unwrap();
    let val_raw: Vec<TrainingItem> = synthetic_corpus(16, 99, &spec).unwrap().into_iter().map(|s| s.item).collect();
    let val = ValidationSet {
        items: normalize_items(&val_raw, &stats).unwrap(),
        seed: 5,
    };
    let opts = TtlTrainOptions {
        validation: Some(&val),
        val_every: 500,
        ..Default::default()
    };
    let out = train_ttl(&train, &stats, &cfg, &opts).unwrap();
    let first = out.validation.first().unwrap().1;
    let last = out.validation.last().unwrap().1;
    assert_eq!(out.validation.last().unwrap().0, 500);
    assert!(last <= 0.7 * first, "{first} -> {last}");
}

#[test]
fn synthesis_length_determinism_and_seeds() {
    let pipe = toy_pipeline();
    let reference = tone(1.0, 180.0, pipe.cfg.mel.sample_rate);
    let spf = pipe.cfg.ttl.k_c * pipe.cfg.mel.hop_size;
    let s = SamplerConfig::from_defaults(&pipe.cfg, 3);
    let a = pipe.synthesize("a short test", &reference, &s, None).unwrap();
    assert_eq!(a.audio.len(), a.frames * spf);
    assert_eq!(a.frames, 30);
    for seed in 0..50 {
        let s = SamplerConfig { nfe: 2, cfg_scale: 3.0, seed };
        let out = pipe.synthesize("seed sweep", &reference, &s, Some(6)).unwrap();
        assert!(finite(&out.audio), "seed {seed}");
        assert_eq!(out.evaluations, 4);
    }
    let s4 = SamplerConfig { nfe: 4, cfg_scale: 2.0, seed: 9 };
    let s32 = SamplerConfig { nfe: 32, ..s4.clone() };
    let x = pipe.synthesize("nfe matters", &reference, &s4, Some(8)).unwrap();
    let y = pipe.synthesize("nfe matters", &reference, &s32, Some(8)).unwrap();
    assert!(finite(&x.audio) && finite(&y.audio));
    assert_ne!(x.audio.samples, y.audio.samples);
}

#[test]
fn synthesis_errors_are_distinct() {
    let pipe = toy_pipeline();
    let sr = pipe.cfg.mel.sample_rate;
    let s = SamplerConfig::from_defaults(&pipe.cfg, 0);
    assert!(matches!(
        pipe.synthesize("", &tone(1.0, 200.0, sr), &s, None),
        Err(Error::EmptyInput(_))
    ));
    assert!(matches!(
        pipe.synthesize("hi", &tone(0.05, 200.0, sr), &s, None),
        Err(Error::ReferenceTooShort { .. })
    ));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Pipeline::load(dir.path()), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn saved_pipeline_reproduces_output() {
    let pipe = toy_pipeline();
    let dir = tempfile::tempdir().unwrap();
    pipe.save(dir.path()).unwrap();
    let before = std::fs::read(dir.path().join(Component::TextToLatent.file_name())).unwrap();
    let loaded = Pipeline::load(dir.path()).unwrap();
    let reference = tone(0.8, 300.0, pipe.cfg.mel.sample_rate);
    let s = SamplerConfig { nfe: 4, cfg_scale: 2.0, seed: 1 };
    let a = pipe.synthesize("same voice", &reference, &s, None).unwrap();
    let b = loaded.synthesize("same voice", &reference, &s, None).unwrap();
    assert_eq!(a.audio.samples, b.audio.samples);
    let after = std::fs::read(dir.path().join(Component::TextToLatent.file_name())).unwrap();
    assert_eq!(before, after);
}

fn write_corpus(dir: &Path, sr: u32) -> std::path::PathBuf {
    write_wav(dir.join("a.wav"), &tone(0.6, 220.0, sr), WavFormat::Pcm16).unwrap();
    write_wav(dir.join("b.wav"), &tone(0.9, 330.0, sr), WavFormat::Float32).unwrap();
    let manifest = dir.join("train.tsv");
    std::fs::write(&manifest, "a.wav\tfirst clip\nb.wav\tsecond clip\n").unwrap();
    manifest
}

#[test]
fn latent_cache_is_idempotent_and_decodable() {
    let cfg = ModelConfig::toy();
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(write_corpus(dir.path(), cfg.mel.sample_rate), Split::Train).unwrap();
    let ae = SpeechAutoencoder::new(&cfg, 0).unwrap();
    let ckpt = dir.path().join("ae.safetensors");
    checkpoint::save(ae.store(), Component::Autoencoder, &cfg, &ckpt).unwrap();
    let out = dir.path().join("cache");

    let first = cache_latents(&manifest, &ckpt, &cfg, &out).unwrap();
    assert_eq!(first.written, 2);
    let records = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "lat"))
        .count();
    assert_eq!(records, 2);
    assert_eq!(cache_latents(&manifest, &ckpt, &cfg, &out).unwrap().written, 0);

    let index = CacheIndex::load(&out).unwrap();
    for (entry, src) in index.entries.iter().zip(&manifest.entries) {
        let cl = read_record(out.join(&entry.file)).unwrap();
        let latent = decompress(&cl, ae.frame_rate()).unwrap();
        let mel_frames = (src.duration_seconds * cfg.mel.sample_rate as f64).round() as usize / cfg.mel.hop_size + 1;
        assert_eq!(latent.frames(), mel_frames);
        let audio = ae.decode(&latent).unwrap();
        assert_eq!(audio.len(), mel_frames * cfg.mel.hop_size);
    }

    let mut other = cfg.clone();
    other.flow_train.lr *= 2.0;
    assert!(cache_latents(&manifest, &ckpt, &other, &out).is_err());
}

#[test]
fn sleep_stub_timing() {
    let stats = benchmark(2, 10, || {
        std::thread::sleep(Duration::from_millis(10));
        Ok(())
    })
    .unwrap();
    assert!((9.0..=15.0).contains(&stats.mean_ms), "{}", stats.mean_ms);
    assert_eq!(stats.trials, 10);
}

#[test]
fn decode_rtf_repeatable_and_streaming_amortized() {
    let cfg = ModelConfig::toy();
    let ae = SpeechAutoencoder::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames = 86;
    let v: Vec<f32> = (0..frames * cfg.autoencoder.latent_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let z = Tensor::from_vec(v, (cfg.autoencoder.latent_dim, frames), &candle_core::Device::Cpu).unwrap();
    let latent = Latent {
        values: z.to_dtype(DType::F32).unwrap(),
        frame_rate: ae.frame_rate(),
    };
    let seconds = (frames * cfg.mel.hop_size) as f64 / cfg.mel.sample_rate as f64;
    let run = || benchmark(2, 12, || ae.decode(&latent)).unwrap();
    let (a, b) = (run(), run());
    println!(
        "decode RTF {:.4} / {:.4}",
        rtf(a.mean_ms / 1e3, seconds),
        rtf(b.mean_ms / 1e3, seconds)
    );
    assert!(a.overlaps(&b), "{:?} vs {:?}", a.interval(), b.interval());

    let chunk = Latent {
        values: latent.values.narrow(1, 0, 4).unwrap(),
        frame_rate: latent.frame_rate,
    };
    let per_chunk = benchmark(2, 12, || {
        let state = ae.init_stream()?;
        ae.decode_streaming(state, &chunk)
    })
    .unwrap();
    assert!(per_chunk.mean_ms < a.mean_ms, "{} vs {}", per_chunk.mean_ms, a.mean_ms);
}
