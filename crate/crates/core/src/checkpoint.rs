//! Checkpoint archives: every parameter of a [`ParamStore`] plus a JSON
//! descriptor in one array-container file, written atomically.
//!
//! Layout inside the container:
//! - `__descriptor__`: the [`CheckpointMeta`] JSON as raw bytes,
//! - `param/{name}`: one f64 array per parameter,
//! - `adam_m/{name}`, `adam_v/{name}`: optimizer moments (training
//!   checkpoints only, needed for `--resume`).
//!
//! The autoencoder rides along under its `vae.` name prefix, so a single
//! file restores the full inference surface. Loading is strict: a parameter
//! present in the store but absent from the archive, a leftover archive
//! parameter unknown to the store, or any shape mismatch is an error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::nn::ParamStore;
use crate::npz::Npz;
use crate::{CoreError, Result};

/// Descriptor stored inside every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training phase that produced the file: "vae", "pretrain" or "finetune".
    pub kind: String,
    /// Ablation variant for finetune checkpoints ("no_fff", "lp", "lp_dna").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Optimizer steps completed when the file was written.
    pub step: usize,
    /// Hash of the run configuration that produced the file.
    pub config_hash: String,
    /// Hash of the training corpus manifest, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
    /// Multiplier applied to encoder outputs; this pipeline trains in raw
    /// latent units, so the value is fixed at 1.0 and recorded for clarity.
    pub latent_scale: f64,
    /// Full configuration snapshot (widths, schedule, freeze policy, seeds).
    pub config: RunConfig,
}

fn meta_to_npz(meta: &CheckpointMeta, npz: &mut Npz) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(meta)?;
    let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[bytes.len()]), bytes)
        .expect("1-d byte array");
    npz.insert_u8("__descriptor__", arr);
    Ok(())
}

/// Serializes the store and descriptor, then renames into place so readers
/// never observe a half-written file.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &CheckpointMeta,
    with_moments: bool,
) -> Result<()> {
    let mut npz = Npz::new();
    meta_to_npz(meta, &mut npz)?;
    for slot in store.iter() {
        npz.insert_f64(&format!("param/{}", slot.name), slot.value.clone());
        if with_moments {
            npz.insert_f64(&format!("adam_m/{}", slot.name), slot.m.clone());
            npz.insert_f64(&format!("adam_v/{}", slot.name), slot.v.clone());
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CoreError::Config(format!("checkpoint path {path:?} has no file name")))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    npz.write_to(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads only the descriptor (cheap relative to training, full file is still
/// parsed; the corpus stays desk-scale so this is fine).
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let npz = Npz::read_from(path)?;
    parse_meta(&npz)
}

fn parse_meta(npz: &Npz) -> Result<CheckpointMeta> {
    let data = npz.required("__descriptor__")?;
    let bytes = data
        .as_u8()
        .ok_or_else(|| CoreError::Data("descriptor is not a byte array".into()))?;
    let vec: Vec<u8> = bytes.iter().copied().collect();
    Ok(serde_json::from_slice(&vec)?)
}

/// Restores parameter values (and optimizer moments when present) into an
/// already-built store. The store defines the expected architecture; any
/// disagreement with the archive is a data error naming the parameter.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<CheckpointMeta> {
    let npz = Npz::read_from(path)?;
    let meta = parse_meta(&npz)?;

    // Strictness in both directions: collect archive parameter names first.
    let mut archive_params: std::collections::BTreeSet<String> = npz
        .names()
        .filter_map(|n| n.strip_prefix("param/").map(String::from))
        .collect();

    let ids: Vec<usize> = (0..store.len()).collect();
    for id in ids {
        let name = store.slot(id).name.clone();
        let key = format!("param/{name}");
        let data = npz.get(&key).ok_or_else(|| {
            CoreError::Data(format!("checkpoint {path:?} is missing parameter {name}"))
        })?;
        let value = data.to_f64();
        if value.shape() != store.value(id).shape() {
            return Err(CoreError::Data(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        archive_params.remove(&name);
        let slot = store.slot_mut(id);
        slot.value = value;
        let m_key = format!("adam_m/{name}");
        let v_key = format!("adam_v/{name}");
        match (npz.get(&m_key), npz.get(&v_key)) {
            (Some(m), Some(v)) => {
                let m = m.to_f64();
                let v = v.to_f64();
                if m.shape() != slot.value.shape() || v.shape() != slot.value.shape() {
                    return Err(CoreError::Data(format!(
                        "optimizer moments for {name} have mismatched shapes"
                    )));
                }
                slot.m = m;
                slot.v = v;
            }
            _ => {
                slot.m = ndarray::ArrayD::zeros(slot.value.raw_dim());
                slot.v = ndarray::ArrayD::zeros(slot.value.raw_dim());
            }
        }
    }
    if let Some(extra) = archive_params.into_iter().next() {
        return Err(CoreError::Data(format!(
            "checkpoint {path:?} carries parameter {extra} unknown to this model"
        )));
    }
    Ok(meta)
}
