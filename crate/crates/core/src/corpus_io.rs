//! Manifests, compressed-latent cache records and the cache index.
//!
//! Manifest: UTF-8 text, one `path<TAB>transcript` entry per line. Blank
//! lines and lines starting with `#` are skipped; relative paths resolve
//! against the manifest's directory.
//!
//! Latent record (little endian):
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `STLC`                   |
//! | 2     | version (1)                    |
//! | 1     | dtype (0 = f32, 1 = f64)       |
//! | 1     | reserved, 0                    |
//! | 4     | k_c                            |
//! | 4     | pad frames                     |
//! | 4     | rows (`k_c C`)                 |
//! | 4     | cols (compressed frames)       |
//! | ...   | row-major payload              |

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{extract_logmel, read_wav, resample};
use crate::autoencoder::SpeechAutoencoder;
use crate::checkpoint::{self, Component};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent_ops::{compress, CompressedLatent};

pub const RECORD_MAGIC: &[u8; 4] = b"STLC";
pub const RECORD_VERSION: u16 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
    /// Audio without transcripts (autoencoder training).
    AudioOnly,
}

impl Split {
    pub fn needs_transcripts(self) -> bool {
        self != Self::AudioOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub transcript: Option<String>,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub dataset_id: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parses manifest text; `base` resolves relative paths.
pub fn parse_manifest(src: &str, base: &Path, dataset_id: &str, split: Split) -> Result<CorpusManifest> {
    let mut entries = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let text = raw.trim_end_matches('\r');
        if text.trim().is_empty() || text.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Manifest { line, message };
        let (path, transcript) = match text.split_once('\t') {
            Some((p, t)) => (p, Some(t.trim())),
            None => (text, None),
        };
        let path = path.trim();
        if path.is_empty() {
            return Err(err("empty audio path".into()));
        }
        let transcript = transcript.filter(|t| !t.is_empty()).map(str::to_string);
        if split.needs_transcripts() && transcript.is_none() {
            return Err(err(format!("missing transcript for `{path}`")));
        }
        let full = base.join(path);
        if !full.exists() {
            return Err(err(format!("audio file `{}` not found", full.display())));
        }
        let reader = hound::WavReader::open(&full).map_err(|e| err(format!("{}: {e}", full.display())))?;
        let duration_seconds = reader.duration() as f64 / reader.spec().sample_rate as f64;
        entries.push(ManifestEntry {
            path: full,
            transcript,
            duration_seconds,
        });
    }
    Ok(CorpusManifest {
        dataset_id: dataset_id.to_string(),
        split,
        entries,
    })
}

/// Reads a manifest file; the dataset id is the file stem.
pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_manifest(&src, base, &id, split)
}

/// Serializes a compressed latent into the record layout.
pub fn encode_record(cl: &CompressedLatent) -> Result<Vec<u8>> {
    let (rows, cols) = cl.values.dims2()?;
    let (code, width) = match cl.values.dtype() {
        DType::F32 => (0u8, 4),
        DType::F64 => (1u8, 8),
        other => return Err(Error::InvalidArgument(format!("cannot cache dtype {other:?}"))),
    };
    let mut out = Vec::with_capacity(24 + rows * cols * width);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.push(code);
    out.push(0);
    for v in [cl.k_c, cl.pad, rows, cols] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let flat = cl.values.flatten_all()?;
    if code == 0 {
        for v in flat.to_vec1::<f32>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for v in flat.to_vec1::<f64>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_record(bytes: &[u8]) -> Result<CompressedLatent> {
    let bad = |m: &str| Error::Checkpoint(format!("latent record: {m}"));
    if bytes.len() < 24 || &bytes[..4] != RECORD_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RECORD_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (k_c, pad, rows, cols) = (word(8), word(12), word(16), word(20));
    let payload = &bytes[24..];
    let values = match bytes[6] {
        0 => {
            if payload.len() != rows * cols * 4 {
                return Err(bad("truncated payload"));
            }
            let v: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, (rows, cols), &Device::Cpu)?
        }
        1 => {
            if payload.len() != rows * cols * 8 {
                return Err(bad("truncated payload"));
            }
            let v: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, (rows, cols), &Device::Cpu)?
        }
        d => return Err(bad(&format!("unknown dtype code {d}"))),
    };
    Ok(CompressedLatent { values, k_c, pad })
}

/// Write to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_record(path: impl AsRef<Path>, cl: &CompressedLatent) -> Result<String> {
    let bytes = encode_record(cl)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_record(path: impl AsRef<Path>) -> Result<CompressedLatent> {
    decode_record(&std::fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub source: PathBuf,
    pub transcript: Option<String>,
    /// Record file name inside the cache directory.
    pub file: String,
    pub sha256: String,
    pub frames: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub config_fingerprint: String,
    pub k_c: usize,
    pub entries: Vec<CacheEntry>,
}

impl CacheIndex {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.as_ref().join(INDEX_FILE))?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheReport {
    pub index: CacheIndex,
    /// Records written by this call (existing valid ones are skipped).
    pub written: usize,
}

fn record_name(i: usize, source: &Path) -> String {
    let h = sha256_hex(source.to_string_lossy().as_bytes());
    format!("{i:06}_{}.lat", &h[..12])
}

/// Encodes every manifest entry with an autoencoder checkpoint and stores
/// one compressed-latent record per entry plus `index.json`.
pub fn cache_latents(
    manifest: &CorpusManifest,
    autoencoder_checkpoint: impl AsRef<Path>,
    cfg: &ModelConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CacheReport> {
    let ae = SpeechAutoencoder::new(cfg, 0)?;
    checkpoint::load_into(ae.store(), Component::Autoencoder, cfg, autoencoder_checkpoint)?;
    cache_with(manifest, &ae, cfg, out_dir)
}

/// Like [`cache_latents`] with an in-memory autoencoder.
pub fn cache_with(
    manifest: &CorpusManifest,
    ae: &SpeechAutoencoder,
    cfg: &ModelConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CacheReport> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let fingerprint = cfg.fingerprint();
    let previous = match CacheIndex::load(dir) {
        Ok(idx) if idx.config_fingerprint != fingerprint => {
            return Err(Error::Checkpoint(format!(
                "cache in {} was built with a different configuration",
                dir.display()
            )))
        }
        Ok(idx) => Some(idx),
        Err(_) => None,
    };
    let mut entries = Vec::with_capacity(manifest.len());
    let mut written = 0;
    for (i, e) in manifest.entries.iter().enumerate() {
        let file = record_name(i, &e.path);
        let path = dir.join(&file);
        let cached = previous
            .as_ref()
            .and_then(|p| p.entries.iter().find(|c| c.file == file && c.source == e.path));
        if let Some(c) = cached {
            if let Ok(bytes) = std::fs::read(&path) {
                if sha256_hex(&bytes) == c.sha256 {
                    entries.push(c.clone());
                    continue;
                }
            }
        }
        let audio = read_wav(&e.path)?;
        let audio = if audio.sample_rate != cfg.mel.sample_rate {
            resample(&audio, cfg.mel.sample_rate)
        } else {
            audio
        };
        let latent = ae.encode(&extract_logmel(&audio, &cfg.mel)?)?;
        let cl = compress(&latent, cfg.ttl.k_c)?;
        let sha256 = write_record(&path, &cl)?;
        written += 1;
        entries.push(CacheEntry {
            source: e.path.clone(),
            transcript: e.transcript.clone(),
            file,
            sha256,
            frames: cl.frames(),
            channels: cl.channels(),
        });
    }
    let index = CacheIndex {
        config_fingerprint: fingerprint,
        k_c: cfg.ttl.k_c,
        entries,
    };
    write_atomic(&dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(CacheReport { index, written })
}
