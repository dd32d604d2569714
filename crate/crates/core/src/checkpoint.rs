//! Checkpoint persistence.
//!
//! Layout: an 8-byte magic string, a little-endian u32 format version, a
//! little-endian u32 descriptor length, a JSON descriptor
//! ([`CheckpointMeta`]), then every parameter as a little-endian 64-bit
//! float in flat order. Parameters stay in 64 bits so a save/load round
//! trip reproduces the in-memory model exactly, bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::net::{init_network_with, Activation, Network};
use crate::schedule::{build_schedule, BetaProfile, Schedule, Spacing};
use crate::tasks::{make_task, PairedDataset, TaskKind, TaskParams};
use crate::train::TrainMode;
use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"DBRIDGE1";
pub const VERSION: u32 = 1;

/// Network shape stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub layer_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

/// The four scalars that rebuild the training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub n_steps: usize,
    pub beta_profile: BetaProfile,
    pub sigma2_total: f64,
    pub spacing: Spacing,
}

/// The dataset the model was trained on, specified fully enough to rebuild
/// it (sampling needs the paired source to draw conditioning from).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: TaskKind,
    pub params: TaskParams,
    pub seed: u64,
}

/// Everything about a trained model except its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchMeta,
    pub schedule: ScheduleMeta,
    pub task: TaskMeta,
    pub mode: TrainMode,
    /// Optimizer steps the parameters have absorbed.
    pub train_steps: usize,
    /// Training seed; together with the task seed this pins every random
    /// draw of the run.
    pub seed: u64,
}

impl CheckpointMeta {
    /// Rebuilds the schedule the checkpoint was trained with.
    pub fn build_schedule(&self) -> Result<Schedule> {
        build_schedule(
            self.schedule.n_steps,
            self.schedule.beta_profile,
            self.schedule.sigma2_total,
            self.schedule.spacing,
        )
    }

    /// Rebuilds the paired dataset the checkpoint was trained on.
    pub fn build_task(&self) -> Result<PairedDataset> {
        make_task(self.task.kind, self.task.params.clone(), self.task.seed)
    }
}

/// Serializes the model and its descriptor into the checkpoint layout.
pub fn checkpoint_bytes(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.arch.layer_dims != net.layer_dims
        || meta.arch.time_embed_dim != net.time_embed_dim
        || meta.arch.activation != net.activation
    {
        return Err(Error::Format(
            "descriptor does not match the network being saved".into(),
        ));
    }
    let desc = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let desc_len = u32::try_from(desc.len())
        .map_err(|_| Error::Format("descriptor exceeds the u32 length field".into()))?;
    let params = net.flat_params();
    let mut out = Vec::with_capacity(16 + desc.len() + params.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&desc_len.to_le_bytes());
    out.extend_from_slice(&desc);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

/// Parses a checkpoint byte stream back into a model and its descriptor.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint is truncated before the header ends".into()));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic header; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let desc_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < desc_len {
        return Err(Error::Format("checkpoint is truncated inside the descriptor".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[..desc_len])
        .map_err(|e| Error::Format(format!("descriptor is not valid JSON: {e}")))?;
    let mut net = init_network_with(
        &meta.arch.layer_dims,
        meta.arch.time_embed_dim,
        meta.arch.activation,
        0,
    )?;
    let payload = &body[desc_len..];
    let expected = net.param_count() * 8;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "parameter payload is {} bytes but the architecture needs {expected}",
            payload.len()
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    net.set_flat_params(&params)?;
    Ok((net, meta))
}

/// Writes a checkpoint file.
pub fn save_checkpoint(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<()> {
    let bytes = checkpoint_bytes(net, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Batch;
    use crate::net::{forward, init_network};

    fn demo_meta(net: &Network) -> CheckpointMeta {
        CheckpointMeta {
            arch: ArchMeta {
                layer_dims: net.layer_dims.clone(),
                time_embed_dim: net.time_embed_dim,
                activation: net.activation,
            },
            schedule: ScheduleMeta {
                n_steps: 64,
                beta_profile: BetaProfile::Symmetric,
                sigma2_total: 1.0,
                spacing: Spacing::Quadratic,
            },
            task: TaskMeta { kind: TaskKind::GaussShift, params: TaskParams::default(), seed: 3 },
            mode: TrainMode::I2sb,
            train_steps: 123,
            seed: 7,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = init_network(&[10, 24, 2], 8, 99).unwrap();
        let meta = demo_meta(&net);
        let bytes = checkpoint_bytes(&net, &meta).unwrap();
        let (loaded, loaded_meta) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.flat_params(), net.flat_params());

        let xs = Batch::from_flat(vec![0.3, -0.8, 1.1, 0.2], 2).unwrap();
        let ts = [0.25, 0.75];
        let a = forward(&net, &xs, &ts).unwrap();
        let b = forward(&loaded, &xs, &ts).unwrap();
        // 0 ulp: the raw bits agree, not merely the rounded values.
        for (x, y) in a.as_flat().iter().zip(b.as_flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let net = init_network(&[10, 24, 2], 8, 99).unwrap();
        let meta = demo_meta(&net);
        assert_eq!(checkpoint_bytes(&net, &meta).unwrap(), checkpoint_bytes(&net, &meta).unwrap());
    }

    #[test]
    fn corrupted_streams_are_rejected() {
        let net = init_network(&[10, 24, 2], 8, 99).unwrap();
        let meta = demo_meta(&net);
        let good = checkpoint_bytes(&net, &meta).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(parse_checkpoint(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(matches!(parse_checkpoint(&bad_version), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 8];
        assert!(matches!(parse_checkpoint(truncated), Err(Error::Format(_))));

        let mut extra = good.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(parse_checkpoint(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn descriptor_must_match_the_network() {
        let net = init_network(&[10, 24, 2], 8, 99).unwrap();
        let other = init_network(&[10, 16, 2], 8, 99).unwrap();
        let meta = demo_meta(&other);
        assert!(matches!(checkpoint_bytes(&net, &meta), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = init_network(&[12, 20, 20, 4], 8, 5).unwrap();
        let meta = demo_meta(&net);
        save_checkpoint(&path, &net, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.flat_params(), net.flat_params());
        assert_eq!(loaded_meta.task.kind, TaskKind::GaussShift);
        assert!(loaded_meta.build_schedule().is_ok());
        assert!(loaded_meta.build_task().is_ok());
    }
}
