use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use supertonic::adversarial::train_autoencoder;
use supertonic::audio::{read_wav, resample, write_wav, WavFormat};
use supertonic::autoencoder::SpeechAutoencoder;
use supertonic::checkpoint::{self, Component, CHECKPOINT_DIR_ENV};
use supertonic::config::{ModelConfig, Preset};
use supertonic::corpus_io::{cache_with, load_manifest, read_record, CacheIndex, Split};
use supertonic::duration::{train_duration, DurationSample};
use supertonic::flow_training::{train_ttl, TrainingItem, TtlTrainOptions};
use supertonic::latent_ops::{CompressedLatent, LatentStats};
use supertonic::profiler::{expansion_grid, ProfileReport, TtlWorkload, EXPANSION_HEADER};
use supertonic::sampler::{Pipeline, SamplerConfig, CONFIG_FILE, STATS_FILE};
use supertonic::text::tokenize;

#[derive(Parser)]
#[command(name = "supertonic", version, about = "Flow-matching text-to-speech toolkit")]
struct Cli {
    /// Checkpoint directory (holds config.toml, *.safetensors, latent_stats.json).
    #[arg(long, env = CHECKPOINT_DIR_ENV, default_value = "checkpoints", global = true)]
    checkpoint_dir: PathBuf,

    /// TOML config: `preset = "paper" | "toy"` plus per-field overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the speech autoencoder with the GAN objective.
    TrainAutoencoder(TrainArgs),
    /// Train the text-to-latent module on cached latents.
    TrainTtl(TrainArgs),
    /// Train the utterance-level duration predictor.
    TrainDuration(TrainArgs),
    /// Synthesize speech from text and a reference clip.
    Synthesize(SynthArgs),
    /// Print parameter counts, analytic FLOPs and activation memory as JSON.
    Profile(ProfileArgs),
    /// Print analytic cost over a (batch, K_e) grid as CSV.
    BenchExpansion(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Tab-separated `path<TAB>transcript` manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    text: String,
    /// Reference WAV file.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force the number of compressed frames instead of predicting it.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, default_value_t = 15.0)]
    speech_seconds: f64,
    #[arg(long, default_value_t = 250)]
    chars: usize,
    #[arg(long, default_value_t = 3.0)]
    ref_seconds: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    k_e: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32, 64])]
    batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4])]
    k_e: Vec<usize>,
    #[arg(long, default_value_t = 15.0)]
    speech_seconds: f64,
    #[arg(long, default_value_t = 250)]
    chars: usize,
    #[arg(long, default_value_t = 3.0)]
    ref_seconds: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainAutoencoder(a) => train_ae_cmd(&cli, a),
        Command::TrainTtl(a) => train_ttl_cmd(&cli, a),
        Command::TrainDuration(a) => train_duration_cmd(&cli, a),
        Command::Synthesize(a) => synthesize_cmd(&cli, a),
        Command::Profile(a) => profile_cmd(&cli, a),
        Command::BenchExpansion(a) => bench_cmd(&cli, a),
    }
}

/// Explicit `--config`, else the checkpoint directory's config, else toy.
fn resolve_config(cli: &Cli) -> Result<ModelConfig> {
    if let Some(p) = &cli.config {
        return ModelConfig::load(p).with_context(|| format!("reading {}", p.display()));
    }
    let saved = cli.checkpoint_dir.join(CONFIG_FILE);
    if saved.exists() {
        return Ok(ModelConfig::load(&saved)?);
    }
    Ok(ModelConfig::from_preset(Preset::Toy))
}

fn write_config(dir: &Path, cfg: &ModelConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let existing = ModelConfig::load(&path)?;
        if existing.fingerprint() != cfg.fingerprint() {
            bail!("{} holds a different configuration", path.display());
        }
    }
    std::fs::write(path, cfg.to_toml_string()?)?;
    Ok(())
}

fn train_ae_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let manifest = load_manifest(&a.manifest, Split::AudioOnly)?;
    let corpus = manifest
        .entries
        .iter()
        .map(|e| {
            let w = read_wav(&e.path)?;
            Ok(if w.sample_rate != cfg.mel.sample_rate {
                resample(&w, cfg.mel.sample_rate)
            } else {
                w
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("training autoencoder on {} clips", corpus.len());
    let out = train_autoencoder(&corpus, &cfg, a.metrics.as_deref())?;
    let dir = &cli.checkpoint_dir;
    write_config(dir, &cfg)?;
    checkpoint::save(
        out.autoencoder.store(),
        Component::Autoencoder,
        &cfg,
        dir.join(Component::Autoencoder.file_name()),
    )?;
    checkpoint::save(
        out.discriminators.store(),
        Component::Discriminators,
        &cfg,
        dir.join(Component::Discriminators.file_name()),
    )?;
    log::info!("saved to {}", dir.display());
    Ok(())
}

fn load_autoencoder(dir: &Path, cfg: &ModelConfig) -> Result<SpeechAutoencoder> {
    let ae = SpeechAutoencoder::new(cfg, 0)?;
    checkpoint::load_into(ae.store(), Component::Autoencoder, cfg, dir.join(Component::Autoencoder.file_name()))?;
    Ok(ae)
}

/// Caches latents for the manifest and returns `(latent, transcript)` pairs.
fn cached_corpus(cli: &Cli, cfg: &ModelConfig, manifest: &Path) -> Result<Vec<(CompressedLatent, String)>> {
    let dir = &cli.checkpoint_dir;
    let m = load_manifest(manifest, Split::Train)?;
    let ae = load_autoencoder(dir, cfg)?;
    let cache = dir.join("cache");
    let report = cache_with(&m, &ae, cfg, &cache)?;
    log::info!("latent cache: {} new records", report.written);
    let index = CacheIndex::load(&cache)?;
    index
        .entries
        .iter()
        .map(|e| {
            Ok((
                read_record(cache.join(&e.file))?,
                e.transcript.clone().unwrap_or_default(),
            ))
        })
        .collect()
}

fn train_ttl_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let corpus = cached_corpus(cli, &cfg, &a.manifest)?;
    let time_major: Vec<_> = corpus
        .iter()
        .map(|(cl, _)| cl.values.t().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let stats = LatentStats::fit(time_major.iter(), cfg.ttl.k_c)?;
    let items: Vec<TrainingItem> = corpus
        .into_iter()
        .map(|(z1, text)| TrainingItem { z1, chars: tokenize(&text) })
        .collect();
    let opts = TtlTrainOptions {
        metrics_path: a.metrics.as_deref(),
        ..Default::default()
    };
    let out = train_ttl(&items, &stats, &cfg, &opts)?;
    let dir = &cli.checkpoint_dir;
    checkpoint::save(
        out.model.store(),
        Component::TextToLatent,
        &cfg,
        dir.join(Component::TextToLatent.file_name()),
    )?;
    stats.save(dir.join(STATS_FILE))?;
    log::info!("final loss {:?}", out.metrics.last().map(|m| m.loss));
    Ok(())
}

fn train_duration_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let dir = &cli.checkpoint_dir;
    let stats = LatentStats::load(dir.join(STATS_FILE)).context("train-ttl writes the latent statistics")?;
    let samples = cached_corpus(cli, &cfg, &a.manifest)?
        .into_iter()
        .map(|(cl, text)| {
            Ok(DurationSample {
                ids: tokenize(&text).ids,
                latent: stats.normalize(&cl.values.t()?)?,
                target_frames: cl.frames(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = train_duration(&samples, &cfg, a.metrics.as_deref())?;
    checkpoint::save(
        out.model.store(),
        Component::DurationPredictor,
        &cfg,
        dir.join(Component::DurationPredictor.file_name()),
    )?;
    log::info!("final L1 {:?}", out.losses.last());
    Ok(())
}

fn synthesize_cmd(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let pipeline = Pipeline::load(&cli.checkpoint_dir)?;
    let mut sampler = SamplerConfig::from_defaults(&pipeline.cfg, a.seed);
    if let Some(n) = a.nfe {
        sampler.nfe = n;
    }
    if let Some(s) = a.cfg {
        sampler.cfg_scale = s;
    }
    let reference = read_wav(&a.reference)?;
    let out = pipeline.synthesize(&a.text, &reference, &sampler, a.frames)?;
    write_wav(&a.out, &out.audio, WavFormat::Pcm16)?;
    log::info!(
        "{} frames ({:.2} s), {} field evaluations",
        out.frames,
        out.audio.duration_seconds(),
        out.evaluations
    );
    Ok(())
}

fn profile_cmd(cli: &Cli, a: &ProfileArgs) -> Result<()> {
    let cfg = match &cli.config {
        Some(_) => resolve_config(cli)?,
        None => ModelConfig::paper(),
    };
    let w = TtlWorkload::from_seconds(&cfg, a.speech_seconds, a.chars, a.ref_seconds, a.batch, a.k_e);
    println!("{}", ProfileReport::new(&cfg, w)?);
    Ok(())
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = match &cli.config {
        Some(_) => resolve_config(cli)?,
        None => ModelConfig::paper(),
    };
    let base = TtlWorkload::from_seconds(&cfg, a.speech_seconds, a.chars, a.ref_seconds, 1, 1);
    let grid: Vec<(usize, usize)> = a
        .batches
        .iter()
        .flat_map(|&b| a.k_e.iter().map(move |&k| (b, k)))
        .collect();
    println!("{EXPANSION_HEADER}");
    for row in expansion_grid(&cfg, base, &grid)? {
        println!("{}", row.csv_row());
    }
    Ok(())
}
