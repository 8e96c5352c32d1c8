//! Training checkpoints: the model's `.pcsw` records, one `vel.<name>` record
//! per momentum buffer and a final `__trainstate` record holding, as raw
//! little-endian bytes, the iteration (u64), the crop sampler position (u128)
//! and the running loss (f64).

use std::path::{Path, PathBuf};

use super::TrainState;
use crate::csmodel::weights::{self, Record};
use crate::csmodel::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const TRAINSTATE_RECORD: &str = "__trainstate";
pub const VELOCITY_PREFIX: &str = "vel.";
const TRAINSTATE_BYTES: usize = 8 + 16 + 8;

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.pcsw")
}

pub fn encode_state(state: &TrainState) -> Result<Vec<Record>> {
    let mut records = state.params.to_records()?;
    for (name, v) in state.params.names().iter().zip(&state.velocity) {
        records.push(Record::from_tensor(format!("{VELOCITY_PREFIX}{name}"), v)?);
    }
    let mut raw = Vec::with_capacity(TRAINSTATE_BYTES);
    raw.extend_from_slice(&state.iteration.to_le_bytes());
    raw.extend_from_slice(&state.rng_position.to_le_bytes());
    raw.extend_from_slice(&state.running_loss.to_le_bytes());
    records.push(Record::from_raw(TRAINSTATE_RECORD, raw)?);
    Ok(records)
}

pub fn decode_state(records: &[Record], config: &ModelConfig) -> Result<TrainState> {
    let params = ModelParams::from_records(records, Some(config))?;
    let mut velocity = Vec::with_capacity(params.tensors().len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let vname = format!("{VELOCITY_PREFIX}{name}");
        let r = weights::find(records, &vname)
            .ok_or_else(|| Error::config(format!("checkpoint has no momentum buffer '{vname}'")))?;
        velocity.push(r.to_tensor(t.shape())?);
    }
    let trailer = weights::find(records, TRAINSTATE_RECORD)
        .ok_or_else(|| Error::config(format!("checkpoint has no '{TRAINSTATE_RECORD}' record")))?;
    let raw = trailer.raw();
    if raw.len() != TRAINSTATE_BYTES {
        return Err(Error::config(format!(
            "'{TRAINSTATE_RECORD}' has {} bytes, expected {TRAINSTATE_BYTES}",
            raw.len()
        )));
    }
    let mut it = [0u8; 8];
    it.copy_from_slice(&raw[..8]);
    let mut pos = [0u8; 16];
    pos.copy_from_slice(&raw[8..24]);
    let mut run = [0u8; 8];
    run.copy_from_slice(&raw[24..32]);
    Ok(TrainState {
        params,
        velocity,
        iteration: u64::from_le_bytes(it),
        rng_position: u128::from_le_bytes(pos),
        running_loss: f64::from_le_bytes(run),
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    weights::write_file(path, &encode_state(state)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<TrainState> {
    let path = path.as_ref();
    let records = weights::read_file(path)?;
    decode_state(&records, config).map_err(|e| e.in_file(path))
}

/// Highest-iteration `ckpt-*.pcsw` in `dir`.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".pcsw"))
        })
        .collect();
    found.sort();
    found.pop()
}
