//! safetensors checkpoints tagged with the component name and the
//! fingerprint of the configuration that produced them.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: &str = "1";

/// Environment variable naming the default checkpoint directory.
pub const CHECKPOINT_DIR_ENV: &str = "SUPERTONIC_CHECKPOINT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Autoencoder,
    Discriminators,
    TextToLatent,
    DurationPredictor,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Self::Autoencoder => "autoencoder",
            Self::Discriminators => "discriminators",
            Self::TextToLatent => "text_to_latent",
            Self::DurationPredictor => "duration_predictor",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.safetensors", self.name())
    }
}

/// Header fields stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub component: String,
    pub fingerprint: String,
    pub config: String,
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes every entry of `store` (parameters and buffers).
pub fn save(store: &ParamStore, component: Component, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensors = store.snapshot()?;
    let meta = HashMap::from([
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("component".to_string(), component.name().to_string()),
        ("config_fingerprint".to_string(), cfg.fingerprint()),
        ("config".to_string(), cfg.to_toml_string()?),
    ]);
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors.iter(), Some(meta), &tmp).map_err(st_err)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads tensors and header without checking them against a config.
pub fn read(path: impl AsRef<Path>) -> Result<(CheckpointInfo, BTreeMap<String, Tensor>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(st_err)?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: header lacks `{k}`", path.display())))
    };
    if field("format_version")? != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported format version", path.display())));
    }
    let info = CheckpointInfo {
        component: field("component")?,
        fingerprint: field("config_fingerprint")?,
        config: field("config")?,
    };
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, view.load(&Device::Cpu)?);
    }
    Ok((info, tensors))
}

/// Loads `path` into `store` after checking component and config.
pub fn load_into(store: &ParamStore, component: Component, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (info, tensors) = read(path)?;
    if info.component != component.name() {
        return Err(Error::Checkpoint(format!(
            "{} holds `{}`, expected `{}`",
            path.display(),
            info.component,
            component.name()
        )));
    }
    if info.fingerprint != cfg.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different configuration",
            path.display()
        )));
    }
    let dtype = store.dtype();
    let cast = tensors
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    store.load(&cast)
}

/// Directory from the environment, if set.
pub fn dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duration::DurationPredictor;

    #[test]
    fn round_trip_is_exact_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let a = DurationPredictor::new(&cfg, 1).unwrap();
        let p = dir.path().join("dp.safetensors");
        save(a.store(), Component::DurationPredictor, &cfg, &p).unwrap();
        let b = DurationPredictor::new(&cfg, 2).unwrap();
        load_into(b.store(), Component::DurationPredictor, &cfg, &p).unwrap();
        let sa = a.store().snapshot().unwrap();
        let sb = b.store().snapshot().unwrap();
        for (k, v) in &sa {
            let x: Vec<f64> = v.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f64> = sb[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{k}");
        }
        assert!(matches!(
            load_into(b.store(), Component::TextToLatent, &cfg, &p),
            Err(Error::Checkpoint(_))
        ));
        let mut other = cfg.clone();
        other.duration_train.lr *= 2.0;
        assert!(load_into(b.store(), Component::DurationPredictor, &other, &p).is_err());
        assert!(matches!(
            read(dir.path().join("none.safetensors")),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
