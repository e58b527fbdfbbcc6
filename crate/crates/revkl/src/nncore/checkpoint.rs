//! Checkpoint files: a one-line JSON header followed by the flat
//! little-endian f64 parameter array in canonical order (embedding, then per
//! layer w_ih / w_hh / bias, then w_out, b_out).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{HeadKind, ModelDims, ModelParams};
use crate::corpus::marginal_read_json_line;
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "revkl.checkpoint.v1";

/// Training provenance stored in the header. Field order is fixed so that a
/// save/load/save cycle is byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub phase: String,
    pub world_seed: u64,
    pub run_seed: u64,
    pub epochs: u32,
    pub best_val_metric: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    vocab_size: usize,
    hidden: usize,
    layers: usize,
    head: HeadKind,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = CheckpointHeader {
        format: FORMAT_TAG.to_string(),
        vocab_size: params.dims.vocab_size,
        hidden: params.dims.hidden,
        layers: params.dims.layers,
        head: params.head,
        meta: meta.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(params.dims.param_count() * 8);
    params.for_each_slice(|s| {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header: CheckpointHeader = marginal_read_json_line(&mut r, path)?;
    if header.format != FORMAT_TAG {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("unexpected format tag {:?}", header.format),
        });
    }
    let dims = ModelDims { vocab_size: header.vocab_size, hidden: header.hidden, layers: header.layers };
    let mut bytes = vec![0u8; dims.param_count() * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format {
            path: path.into(),
            reason: "trailing bytes after parameter array".into(),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_flat(dims, header.head, &flat)?;
    Ok((params, header.meta))
}

/// Load a checkpoint and verify it matches expected dims and head.
pub fn load_checkpoint_expecting(
    path: &Path,
    dims: ModelDims,
    head: HeadKind,
) -> Result<(ModelParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    if params.dims != dims || params.head != head {
        return Err(Error::Checkpoint(format!(
            "{} holds dims {:?} head {:?}, expected dims {:?} head {:?}",
            path.display(),
            params.dims,
            params.head,
            dims,
            head
        )));
    }
    Ok((params, meta))
}
