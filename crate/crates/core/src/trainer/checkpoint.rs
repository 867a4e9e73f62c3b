//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json      format version, model name, step, per-parameter entries
//! <dir>/config.toml        model configuration
//! <dir>/params/<name>.esmt one tensor per parameter
//! <dir>/optim/{m,v}/<name>.esmt and optim.json, when optimizer state is saved
//! ```
//!
//! The directory is assembled under a temporary name and renamed into place.

use std::path::{Path, PathBuf};

use esm_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimState};
use crate::config::ModelConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::EsmStereo;
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    /// Checkpoint segment: `backbone`, `aggregate3d` or `esm.stage<n>`.
    pub segment: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: String,
    pub step: u64,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimMeta {
    config: AdamWConfig,
    step: u64,
}

fn segment(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("esm"), Some(stage)) => format!("esm.{stage}"),
        (Some(first), _) => first.to_string(),
        _ => String::new(),
    }
}

fn write_tensor<T: Element>(path: &Path, data: &[T], shape: &[usize]) -> Result<()> {
    let bytes = esm_tensor::io::encode(data, shape)?;
    write_atomic(path, &bytes)
}

fn read_tensor<T: Element>(path: &Path) -> Result<(Vec<T>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    esm_tensor::io::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Element>(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    store: &ParamStore<T>,
    optim: Option<&OptimState<T>>,
    epoch: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(parent)?;
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    create_dir(&tmp.join("params"))?;
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let file = format!("params/{}.esmt", p.name);
        write_tensor(&tmp.join(&file), &p.data, &p.shape)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            segment: segment(&p.name),
            file,
            shape: p.shape.clone(),
            dtype: T::DTYPE.name().to_string(),
            trainable: p.trainable,
        });
    }
    if let Some(st) = optim {
        create_dir(&tmp.join("optim/m"))?;
        create_dir(&tmp.join("optim/v"))?;
        for ((_, p), (m, v)) in store.iter().zip(st.m.iter().zip(&st.v)) {
            write_tensor(&tmp.join(format!("optim/m/{}.esmt", p.name)), m, &p.shape)?;
            write_tensor(&tmp.join(format!("optim/v/{}.esmt", p.name)), v, &p.shape)?;
        }
        let meta = OptimMeta { config: st.config.clone(), step: st.step };
        write_atomic(&tmp.join("optim/optim.json"), serde_json::to_string_pretty(&meta).expect("json").as_bytes())?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: config.name(),
        step: optim.map_or(0, |o| o.step),
        epoch,
        params,
    };
    write_atomic(&tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json").as_bytes())?;
    write_atomic(&tmp.join("config.toml"), config.to_toml().as_bytes())?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub struct LoadedCheckpoint<T: Element> {
    pub net: EsmStereo,
    pub store: ParamStore<T>,
    pub optim: Option<OptimState<T>>,
    pub manifest: Manifest,
}

pub fn load_checkpoint<T: Element>(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint<T>> {
    let dir = dir.as_ref();
    let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e));
    let manifest: Manifest = serde_json::from_str(&read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let config = ModelConfig::from_toml(&read(dir.join("config.toml"))?)?;
    let (net, mut store) = EsmStereo::build::<T>(&config)?;
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, {} expects {}",
            manifest.params.len(),
            config.name(),
            store.len()
        )));
    }
    let load_into = |store: &mut ParamStore<T>, name: &str, path: &Path| -> Result<Vec<T>> {
        let id = store.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let (data, shape) = read_tensor::<T>(path)?;
        if shape != store.get(id).shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", store.get(id).shape)));
        }
        Ok(data)
    };
    for e in &manifest.params {
        let data = load_into(&mut store, &e.name, &dir.join(&e.file))?;
        let id = store.find(&e.name).expect("checked");
        store.get_mut(id).data = data;
    }
    let meta_path = dir.join("optim/optim.json");
    let optim = if meta_path.exists() {
        let meta: OptimMeta =
            serde_json::from_str(&read(meta_path)?).map_err(|e| Error::Checkpoint(format!("optimizer: {e}")))?;
        let mut st = OptimState::new(&store, meta.config);
        st.step = meta.step;
        for (id, p) in store.iter() {
            st.m[id.0] = load_into(&mut store.clone(), &p.name, &dir.join(format!("optim/m/{}.esmt", p.name)))?;
            st.v[id.0] = load_into(&mut store.clone(), &p.name, &dir.join(format!("optim/v/{}.esmt", p.name)))?;
        }
        Some(st)
    } else {
        None
    };
    Ok(LoadedCheckpoint { net, store, optim, manifest })
}

/// Loads one tensor file, for tools that inspect checkpoints.
pub fn read_param<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let (data, shape) = read_tensor::<T>(path.as_ref())?;
    Ok(Tensor::new(data, &shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments() {
        assert_eq!(segment("backbone.enc0.conv.weight"), "backbone");
        assert_eq!(segment("esm.stage2.fuse.mix0.conv.bias"), "esm.stage2");
        assert_eq!(segment("aggregate3d.head.weight"), "aggregate3d");
    }
}
