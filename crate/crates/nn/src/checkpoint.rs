//! Checkpoint file format: a versioned header line, a JSON manifest with
//! (name, shape, offset) records plus training metadata, then concatenated
//! little-endian f32 payloads. Round-trips bitwise.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use smv4d_core::tensor::Tensor;

use crate::params::{Optimizer, ParamStore};

pub const CKPT_FORMAT_VERSION: &str = "SMV4D-CKPT-1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint version mismatch at {path}: found '{found}', expected '{expected}'")]
    Version { path: PathBuf, found: String, expected: String },
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: String,
    pub meta: CkptMeta,
    tensors: Vec<TensorRecord>,
}

/// Training metadata carried alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkptMeta {
    pub step: usize,
    pub phase: String,
    pub seed: u64,
    pub optimizer_step: usize,
    /// Named RNG stream states (key, counter).
    pub rng_states: BTreeMap<String, (u64, u64)>,
    /// Echo of the resolved config the run used.
    pub config_json: String,
}

/// Everything needed to resume training bitwise.
pub struct Checkpoint {
    pub meta: CkptMeta,
    pub params: ParamStore<f32>,
    pub moments_m: BTreeMap<String, Tensor<f32>>,
    pub moments_v: BTreeMap<String, Tensor<f32>>,
    pub update_counts: BTreeMap<String, u32>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CkptError + '_ {
    move |source| CkptError::Io { path: path.to_path_buf(), source }
}

pub fn save(path: &Path, meta: &CkptMeta, params: &ParamStore<f32>, opt: Option<&Optimizer>) -> Result<(), CkptError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let push = |name: String, t: &Tensor<f32>, payload: &mut Vec<f32>, tensors: &mut Vec<TensorRecord>| {
        tensors.push(TensorRecord { name, shape: t.shape().to_vec(), offset: payload.len(), len: t.len() });
        payload.extend_from_slice(t.data());
    };
    for (name, t) in params.iter() {
        push(format!("param.{name}"), t, &mut payload, &mut tensors);
    }
    if let Some(opt) = opt {
        let (m, v, counts) = opt.moments();
        for (name, t) in m {
            push(format!("adam_m.{name}"), t, &mut payload, &mut tensors);
        }
        for (name, t) in v {
            push(format!("adam_v.{name}"), t, &mut payload, &mut tensors);
        }
        for (name, &count) in counts {
            let t = Tensor::from_vec(&[1], vec![count as f32]);
            push(format!("adam_t.{name}"), &t, &mut payload, &mut tensors);
        }
    }
    let manifest = Manifest {
        version: CKPT_FORMAT_VERSION.to_string(),
        meta: meta.clone(),
        tensors,
    };
    let manifest_json = serde_json::to_string(&manifest)
        .map_err(|source| CkptError::Json { path: path.to_path_buf(), source })?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    writeln!(file, "{CKPT_FORMAT_VERSION}").map_err(io_err(path))?;
    writeln!(file, "{}", manifest_json.len()).map_err(io_err(path))?;
    file.write_all(manifest_json.as_bytes()).map_err(io_err(path))?;
    for x in &payload {
        file.write_all(&x.to_le_bytes()).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CkptError::Mismatch("missing header line".into()))?;
    let header = String::from_utf8_lossy(&bytes[..header_end]).to_string();
    if header != CKPT_FORMAT_VERSION {
        return Err(CkptError::Version {
            path: path.to_path_buf(),
            found: header,
            expected: CKPT_FORMAT_VERSION.to_string(),
        });
    }
    let rest = &bytes[header_end + 1..];
    let len_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CkptError::Mismatch("missing manifest length".into()))?;
    let manifest_len: usize = String::from_utf8_lossy(&rest[..len_end])
        .trim()
        .parse()
        .map_err(|_| CkptError::Mismatch("bad manifest length".into()))?;
    let manifest_bytes = &rest[len_end + 1..len_end + 1 + manifest_len];
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|source| CkptError::Json { path: path.to_path_buf(), source })?;
    let payload_bytes = &rest[len_end + 1 + manifest_len..];
    let payload: Vec<f32> = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut params = ParamStore::new();
    let mut moments_m = BTreeMap::new();
    let mut moments_v = BTreeMap::new();
    let mut update_counts = BTreeMap::new();
    for rec in &manifest.tensors {
        if rec.offset + rec.len > payload.len() {
            return Err(CkptError::Mismatch(format!("tensor '{}' exceeds payload", rec.name)));
        }
        let tensor = Tensor::from_vec(&rec.shape, payload[rec.offset..rec.offset + rec.len].to_vec());
        if let Some(name) = rec.name.strip_prefix("param.") {
            params.insert(name, tensor);
        } else if let Some(name) = rec.name.strip_prefix("adam_m.") {
            moments_m.insert(name.to_string(), tensor);
        } else if let Some(name) = rec.name.strip_prefix("adam_v.") {
            moments_v.insert(name.to_string(), tensor);
        } else if let Some(name) = rec.name.strip_prefix("adam_t.") {
            update_counts.insert(name.to_string(), tensor.data()[0] as u32);
        } else {
            return Err(CkptError::Mismatch(format!("unknown tensor class '{}'", rec.name)));
        }
    }
    Ok(Checkpoint { meta: manifest.meta, params, moments_m, moments_v, update_counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use smv4d_core::rng::Prng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join(format!("smv4d_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");

        let mut rng = Prng::new(1, "ck");
        let mut params = ParamStore::new();
        params.insert("mjd.w", Tensor::from_fn(&[3, 4], |_| rng.normal() as f32));
        params.insert("dpa.b", Tensor::from_fn(&[4], |_| rng.normal() as f32));
        let meta = CkptMeta {
            step: 42,
            phase: "joint".into(),
            seed: 7,
            optimizer_step: 42,
            rng_states: BTreeMap::from([("noise".to_string(), (1u64, 2u64))]),
            config_json: "{}".into(),
        };
        save(&path, &meta, &params, None).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.params.get("mjd.w").data(), params.get("mjd.w").data());
        assert_eq!(loaded.params.get("dpa.b").data(), params.get("dpa.b").data());

        // Version tamper is rejected.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[11] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CkptError::Version { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
