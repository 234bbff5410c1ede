//! Checkpoint files: one JSON header line followed by the parameters as
//! little-endian 32-bit floats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UfpsError};
use crate::labels::ClassSet;
use crate::model::{ModelLayout, ParamVector};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub round: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub channels: usize,
    pub num_params: usize,
    /// Classes a teacher checkpoint owns; absent for global models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owned: Option<ClassSet>,
}

impl CheckpointHeader {
    pub fn new(config_hash: &str, round: usize, layout: ModelLayout) -> Self {
        CheckpointHeader {
            config_hash: config_hash.to_string(),
            round,
            hidden1: layout.hidden1,
            hidden2: layout.hidden2,
            channels: layout.channels,
            num_params: layout.param_count(),
            owned: None,
        }
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(self.hidden1, self.hidden2, self.channels - 1)
    }
}

/// Parameters are stored as f32, so a loaded checkpoint equals the saved
/// one rounded to single precision.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamVector) -> Result<()> {
    if header.num_params != params.len() || header.layout() != params.layout() {
        return Err(UfpsError::LengthMismatch {
            expected: header.num_params,
            got: params.len(),
        });
    }
    let file = File::create(path).map_err(|e| UfpsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_string(header).expect("header serialises");
    let io = |e| UfpsError::io(path, e);
    w.write_all(json.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for &v in params.values() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamVector)> {
    let file = File::open(path).map_err(|e| UfpsError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| UfpsError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| UfpsError::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
    if header.channels < 2 || header.num_params != header.layout().param_count() {
        return Err(bad("header layout is inconsistent".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| UfpsError::io(path, e))?;
    if payload.len() != header.num_params * 4 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            header.num_params * 4,
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let params = ParamVector::from_values(header.layout(), values)
        .map_err(|e| bad(e.to_string()))?;
    Ok((header, params))
}
