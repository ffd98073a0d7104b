//! Versioned checkpoint files: magic, version, JSON manifest, raw tensors.
//!
//! Layout: `b"L3DCKPT\0"`, `u32` LE version, `u64` LE manifest length, the
//! manifest JSON, then every parameter tensor in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"L3DCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
    /// Free-form run metadata (step counter, seed).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint(
    out: &mut impl Write,
    config: &ModelConfig,
    store: &ParamStore<f32>,
    meta: serde_json::Value,
) -> Result<()> {
    let manifest = Manifest {
        config: config.clone(),
        params: store
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for e in store.entries() {
        e.value.write_to(out)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<(Manifest, ParamStore<f32>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let t = Tensor::read_from(input)?;
        if t.shape() != p.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: stored tensor {:?}, manifest says {:?}",
                p.name,
                t.shape(),
                p.shape
            )));
        }
        store.add(p.name.clone(), t, p.trainable);
    }
    Ok((manifest, store))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore<f32>, meta: serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, config, store, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Manifest, ParamStore<f32>)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_checkpoint(&mut BufReader::new(file))
}

/// Loads a checkpoint whose architecture must equal `expected`; on mismatch the
/// error lists every differing key.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<(Manifest, ParamStore<f32>)> {
    let (manifest, store) = load_checkpoint(path)?;
    let diff = manifest.config.diff(expected);
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(
            diff.iter().map(|l| format!("  {l}")).collect::<Vec<_>>().join("\n"),
        ));
    }
    Ok((manifest, store))
}

/// Copies checkpoint values into `store`, matching by name and shape.
pub fn restore_into(store: &mut ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.entry(id).name.clone();
        let src = loaded
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        store
            .set(id, src.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}
