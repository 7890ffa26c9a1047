//! Binary parameter files: `MLND`, u32 LE version, u64 LE count, then the
//! values as f64 LE. A JSON sidecar next to each file describes it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::meta::AdamState;
use crate::model::{ModelSpec, ParameterVector};

use super::RunnerError;

pub const MAGIC: &[u8; 4] = b"MLND";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

pub fn encode(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<f64>, RunnerError> {
    let err = |m: String| Err(RunnerError::Checkpoint(m));
    if bytes.len() < HEADER {
        return err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return err(format!("bad magic bytes {:?}", &bytes[..4]));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return err(format!("unsupported version {version}"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER..];
    if (body.len() as u64) != count.saturating_mul(8) {
        return err(format!("header says {count} values but {} payload bytes follow", body.len()));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
    pub algorithm: String,
    /// ADAM step count at save time; moments are in the `.opt.bin` file.
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterVector,
    pub sidecar: Sidecar,
    pub adam: Option<AdamState>,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn optimizer_path(bin: &Path) -> PathBuf {
    bin.with_extension("opt.bin")
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    std::fs::write(path, bytes).map_err(|e| RunnerError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, RunnerError> {
    std::fs::read(path).map_err(|e| RunnerError::io(path, e))
}

pub fn save_params(path: &Path, params: &[f64]) -> Result<(), RunnerError> {
    write(path, &encode(params))
}

pub fn load_params(path: &Path) -> Result<ParameterVector, RunnerError> {
    decode(&read(path)?).map(ParameterVector::new).map_err(|e| match e {
        RunnerError::Checkpoint(m) => RunnerError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes the parameters, sidecar and (when given) optimizer moments.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), RunnerError> {
    let expected = ckpt.sidecar.spec.param_count();
    if ckpt.params.len() != expected {
        return Err(RunnerError::Checkpoint(format!(
            "spec expects {expected} parameters, got {}",
            ckpt.params.len()
        )));
    }
    save_params(path, &ckpt.params)?;
    let side = serde_json::to_string_pretty(&ckpt.sidecar).expect("sidecar serializes");
    write(&sidecar_path(path), side.as_bytes())?;
    if let Some(adam) = &ckpt.adam {
        let mut moments = adam.m.clone();
        moments.extend_from_slice(&adam.v);
        save_params(&optimizer_path(path), &moments)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, RunnerError> {
    let params = load_params(path)?;
    let side_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&read(&side_path)?)
        .map_err(|e| RunnerError::Checkpoint(format!("{}: {e}", side_path.display())))?;
    let expected = sidecar.spec.param_count();
    if params.len() != expected {
        return Err(RunnerError::Checkpoint(format!(
            "{}: sidecar spec expects {expected} parameters, file has {}",
            path.display(),
            params.len()
        )));
    }
    let opt = optimizer_path(path);
    let adam = if opt.exists() {
        let moments = load_params(&opt)?;
        if moments.len() != 2 * expected {
            return Err(RunnerError::Checkpoint(format!(
                "{}: expected {} optimizer values, found {}",
                opt.display(),
                2 * expected,
                moments.len()
            )));
        }
        let (m, v) = moments.split_at(expected);
        Some(AdamState { m: m.to_vec(), v: v.to_vec(), t: sidecar.adam_steps })
    } else {
        None
    };
    Ok(Checkpoint { params, sidecar, adam })
}
