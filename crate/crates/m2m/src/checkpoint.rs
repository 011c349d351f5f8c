//! Single-file checkpoint format: a JSON header describing the run (schema
//! version, variant, configs, featurizer, output scales, epoch counter)
//! followed by raw little-endian f64 blobs for every named parameter and,
//! when present, the Adam moment vectors. Parameters round-trip bit-exactly,
//! so evaluation after a load reproduces the original report to the bit.

use crate::baselines::BaselineConfig;
use crate::config::{ModelConfig, Variant};
use crate::features::Featurizer;
use crate::tensor::{AdamState, ParamGroup, ParamStore, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"M2MCKPT\x01";
const SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub variant: Variant,
    pub config: ModelConfig,
    /// Solved baseline widths; None for the scenario-aware model.
    pub baseline: Option<BaselineConfig>,
    /// Per-task rate-head scales, calibrated at train time.
    pub scales: Vec<f64>,
    /// Hash of the run config that produced this checkpoint.
    pub config_hash: String,
    /// Epochs completed so far; resume continues from here.
    pub epochs_done: usize,
    /// The fitted featurization pipeline; evaluation must reuse it.
    pub featurizer: Featurizer,
    pub store: ParamStore,
    /// Optimizer moments, kept so a resumed run continues the same
    /// trajectory instead of restarting Adam cold.
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    variant: String,
    config: ModelConfig,
    baseline: Option<BaselineConfig>,
    scales: Vec<f64>,
    config_hash: String,
    epochs_done: usize,
    featurizer: Featurizer,
    params: Vec<ParamHeader>,
    /// Adam step count; the moment blobs follow the parameter blobs iff set.
    adam_steps: Option<u64>,
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| CheckpointError::Format(format!("blob truncated: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect())
}

fn parse_group(label: &str) -> Result<ParamGroup, CheckpointError> {
    match label {
        "meta_generator" => Ok(ParamGroup::MetaGenerator),
        "backbone" => Ok(ParamGroup::Backbone),
        other => Err(CheckpointError::Format(format!(
            "unknown parameter group {other:?}"
        ))),
    }
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let params: Vec<ParamHeader> = ck
        .store
        .ids()
        .map(|id| ParamHeader {
            name: ck.store.name(id).to_string(),
            group: ck.store.group(id).label().to_string(),
            shape: ck.store.value(id).shape().to_vec(),
        })
        .collect();
    let header = Header {
        schema: SCHEMA,
        variant: ck.variant.label().to_string(),
        config: ck.config.clone(),
        baseline: ck.baseline.clone(),
        scales: ck.scales.clone(),
        config_hash: ck.config_hash.clone(),
        epochs_done: ck.epochs_done,
        featurizer: ck.featurizer.clone(),
        params,
        adam_steps: ck.adam.as_ref().map(|a| a.steps_taken()),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for id in ck.store.ids() {
        write_f64s(&mut w, ck.store.value(id).data())?;
    }
    if let Some(adam) = &ck.adam {
        write_f64s(&mut w, &adam.m)?;
        write_f64s(&mut w, &adam.v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| CheckpointError::Format(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)
        .map_err(|e| CheckpointError::Format(format!("missing header length: {e}")))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| CheckpointError::Format(format!("header truncated: {e}")))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.schema != SCHEMA {
        return Err(CheckpointError::Format(format!(
            "schema {} not supported (this build reads {})",
            header.schema, SCHEMA
        )));
    }
    let variant = Variant::parse(&header.variant)
        .map_err(|e| CheckpointError::Format(format!("variant: {e}")))?;

    let mut store = ParamStore::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let data = read_f64s(&mut r, n)?;
        let group = parse_group(&p.group)?;
        store.add(&p.name, group, Tensor::from_vec(&p.shape, data)?)?;
    }
    let adam = match header.adam_steps {
        Some(t) => {
            let n = store.total_len();
            let m = read_f64s(&mut r, n)?;
            let v = read_f64s(&mut r, n)?;
            Some(AdamState { m, v, t })
        }
        None => None,
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Format(
            "trailing bytes after the last blob".into(),
        ));
    }

    Ok(Checkpoint {
        variant,
        config: header.config,
        baseline: header.baseline,
        scales: header.scales,
        config_hash: header.config_hash,
        epochs_done: header.epochs_done,
        featurizer: header.featurizer,
        store,
        adam,
    })
}
