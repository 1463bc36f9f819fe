use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::numerics::{AdamWConfig, AdamWState};
use crate::transformer::ModelConfig;

const MAGIC: &[u8; 8] = b"MMAECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step_count: u64,
}

/// JSON header stored ahead of the raw payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptimizerEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

/// A loaded checkpoint: model with restored values, optimizer moments if
/// they were saved.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model<f32>,
    pub optimizer: Option<(AdamWConfig, AdamWState<f32>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `model` (and optionally the optimizer moments) atomically: the
/// bytes go to a sibling temp file which is then renamed over `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    optimizer: Option<(&AdamWConfig, &AdamWState<f32>)>,
    vocab: &Vocabulary,
    step: u64,
) -> Result<()> {
    let mut payload = Vec::with_capacity(model.params.total_elements() * 4);
    for (_, t) in model.params.iter() {
        push_f32(&mut payload, &t.data());
    }
    if let Some((_, state)) = optimizer {
        if state.first_moment.len() != model.params.len() {
            bail!(
                Argument,
                "optimizer state covers {} of {} parameters",
                state.first_moment.len(),
                model.params.len()
            );
        }
        for m in state.first_moment.iter().chain(&state.second_moment) {
            push_f32(&mut payload, m);
        }
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        step,
        params: model
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        vocab: vocab.clone(),
        optimizer: optimizer.map(|(c, s)| OptimizerEntry {
            config: *c,
            step_count: s.step_count,
        }),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::Argument(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses and verifies the container; returns the manifest and payload.
pub fn read_container(bytes: &[u8]) -> Result<(CheckpointManifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        bail!(Integrity, "not a checkpoint file (bad magic or header)");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        bail!(Integrity, "unsupported checkpoint version {version}");
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let Some(header) = bytes.get(20..20usize.saturating_add(header_len)) else {
        bail!(
            Integrity,
            "manifest truncated: {} of {header_len} bytes",
            bytes.len() - 20
        );
    };
    let manifest: CheckpointManifest = serde_json::from_slice(header)
        .map_err(|e| Error::Integrity(format!("manifest unreadable: {e}")))?;
    let payload = &bytes[20 + header_len..];
    if payload.len() as u64 != manifest.payload_bytes {
        bail!(
            Integrity,
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        );
    }
    let expected: u64 = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() as u64 * 4)
        .sum::<u64>()
        * if manifest.optimizer.is_some() { 3 } else { 1 };
    if expected != manifest.payload_bytes {
        bail!(
            Integrity,
            "parameter table implies {expected} payload bytes, manifest declares {}",
            manifest.payload_bytes
        );
    }
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        bail!(Integrity, "payload checksum mismatch");
    }
    Ok((manifest, payload))
}

fn take_f32(payload: &[u8], offset: &mut usize, n: usize) -> Vec<f32> {
    let out = payload[*offset..*offset + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *offset += 4 * n;
    out
}

/// Loads a checkpoint and rebuilds the model it describes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = read_container(&bytes)?;
    if manifest.config.hash() != manifest.config_hash {
        bail!(Integrity, "stored config does not match its hash");
    }
    let model = Model::<f32>::new(&manifest.config, 0)?;
    let optimizer = restore(&model, &manifest, payload)?;
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}

/// Loads a checkpoint into an existing model, which must have the same
/// configuration and parameter layout.
pub fn load_into(path: &Path, model: &Model<f32>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = read_container(&bytes)?;
    check_layout(model, &manifest)?;
    if manifest.config_hash != model.config.hash() {
        bail!(
            Config,
            "checkpoint config hash {} does not match the current config {}",
            manifest.config_hash,
            model.config.hash()
        );
    }
    let optimizer = restore(model, &manifest, payload)?;
    Ok(Checkpoint {
        manifest,
        model: model.clone(),
        optimizer,
    })
}

/// Names and shapes must agree entry by entry; the first difference is reported.
fn check_layout(model: &Model<f32>, manifest: &CheckpointManifest) -> Result<()> {
    let ours: Vec<_> = model.params.iter().collect();
    for (i, entry) in manifest.params.iter().enumerate() {
        match ours.get(i) {
            Some((name, t)) if *name == entry.name && t.shape() == entry.shape.as_slice() => {}
            Some((name, t)) => bail!(
                Config,
                "parameter {i}: checkpoint has {} {:?}, model has {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            ),
            None => bail!(
                Config,
                "checkpoint parameter {} {:?} has no counterpart in the model",
                entry.name,
                entry.shape
            ),
        }
    }
    if ours.len() != manifest.params.len() {
        let (name, t) = ours[manifest.params.len()];
        bail!(
            Config,
            "model parameter {name} {:?} is missing from the checkpoint",
            t.shape()
        );
    }
    Ok(())
}

fn restore(
    model: &Model<f32>,
    manifest: &CheckpointManifest,
    payload: &[u8],
) -> Result<Option<(AdamWConfig, AdamWState<f32>)>> {
    check_layout(model, manifest)?;
    let ours: Vec<_> = model.params.iter().collect();
    let mut offset = 0;
    let values: Vec<Vec<f32>> = ours
        .iter()
        .map(|(_, t)| take_f32(payload, &mut offset, t.numel()))
        .collect();
    let optimizer = manifest.optimizer.as_ref().map(|o| {
        let first = ours
            .iter()
            .map(|(_, t)| take_f32(payload, &mut offset, t.numel()))
            .collect();
        let second = ours
            .iter()
            .map(|(_, t)| take_f32(payload, &mut offset, t.numel()))
            .collect();
        (
            o.config,
            AdamWState {
                first_moment: first,
                second_moment: second,
                step_count: o.step_count,
            },
        )
    });
    for ((_, t), v) in ours.iter().zip(values) {
        t.set_data(v)?;
    }
    Ok(optimizer)
}
