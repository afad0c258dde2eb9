//! Parameter checkpoints: `manifest.json` listing `(name, shape, offset)` plus
//! `params.bin` holding little-endian `f32` values in manifest order.
//! Loading upcasts to `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const BINARY: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint manifest {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary file.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub entries: Vec<Entry>,
    /// Free-form metadata owned by the caller (model config, step counters).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the checkpoint to `dir` atomically: contents go to a sibling
/// temporary directory which is then renamed over `dir`.
pub fn save(
    dir: &Path,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let file_name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    let tmp = parent.join(format!(".{file_name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f32le".into(),
        entries,
        meta,
    };
    let mpath = tmp.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| CheckpointError::Json {
        path: mpath.clone(),
        source,
    })?;
    write_synced(&mpath, &json)?;
    write_synced(&tmp.join(BINARY), &bytes)?;

    if dir.exists() {
        let old = parent.join(format!(".{file_name}.old"));
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        fs::rename(dir, &old).map_err(io_err(dir))?;
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    } else {
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn write_synced(path: &Path, data: &[u8]) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(data).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    serde_json::from_slice(&text).map_err(|source| CheckpointError::Json { path: mpath, source })
}

/// Loads every tensor listed in the manifest, in manifest order.
pub fn load(dir: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(BINARY);
    if manifest.dtype != "f32le" {
        return Err(CheckpointError::Format {
            path: bpath,
            msg: format!("unsupported dtype `{}`", manifest.dtype),
        });
    }
    let bytes = fs::read(&bpath).map_err(io_err(&bpath))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > bytes.len() {
            return Err(CheckpointError::Format {
                path: bpath,
                msg: format!(
                    "`{}` needs bytes {}..{end} but file holds {}",
                    e.name,
                    e.offset,
                    bytes.len()
                ),
            });
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Format {
            path: bpath.clone(),
            msg: err.to_string(),
        })?;
        out.push((e.name, t));
    }
    Ok((out, manifest.meta))
}

pub fn save_store(
    dir: &Path,
    store: &ParamStore,
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    let tensors: Vec<(String, &Tensor)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), &p.tensor))
        .collect();
    save(dir, &tensors, meta)
}

/// Overwrites matching parameters in `store`; returns the names that were
/// present in the checkpoint but unknown to the store.
pub fn load_into(
    dir: &Path,
    store: &mut ParamStore,
) -> Result<(Vec<String>, serde_json::Value), CheckpointError> {
    let (tensors, meta) = load(dir)?;
    let mut unknown = Vec::new();
    for (name, t) in tensors {
        match store.id(&name) {
            Some(id) => store.set(id, t).map_err(|e| CheckpointError::Format {
                path: dir.to_path_buf(),
                msg: format!("{name}: {e}"),
            })?,
            None => unknown.push(name),
        }
    }
    Ok((unknown, meta))
}
