//! Binary checkpoints: `GAG1`, a length-prefixed JSON header, then every
//! tensor's little-endian f32 values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"GAG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Expert,
    Projector,
    Encoder,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Base => "base",
            Self::Expert => "expert",
            Self::Projector => "projector",
            Self::Encoder => "encoder",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    /// Whatever configuration produced the parameters, echoed verbatim.
    pub config: serde_json::Value,
    pub seed: u64,
    pub content_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet<f32>,
}

pub fn encode(kind: CheckpointKind, config: &serde_json::Value, seed: u64, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind,
        config: config.clone(),
        seed,
        content_hash: params.content_hash(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + h.len() + params.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for (_, t) in params.iter() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| GagError::Corruption {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing GAG1 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let mut pos = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..pos]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(corrupt(format!("unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let end = pos
            .checked_add(n * 4)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("tensor {} is truncated", entry.name)))?;
        let data = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes after the last tensor".into()));
    }
    let hash = params.content_hash();
    if hash != header.content_hash {
        return Err(corrupt(format!(
            "content hash {hash} does not match header {}",
            header.content_hash
        )));
    }
    Ok(Checkpoint { header, params })
}

pub fn save(
    path: &Path,
    kind: CheckpointKind,
    config: &serde_json::Value,
    seed: u64,
    params: &ParamSet<f32>,
) -> Result<String> {
    let bytes = encode(kind, config, seed, params)?;
    std::fs::write(path, &bytes).map_err(|e| GagError::io(path, e))?;
    Ok(params.content_hash())
}

/// Loads and verifies a checkpoint, rejecting any kind other than `expected`.
pub fn load(path: &Path, expected: CheckpointKind) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(GagError::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| GagError::io(path, e))?;
    let ckpt = decode(&bytes, path)?;
    if ckpt.header.kind != expected {
        return Err(GagError::Kind {
            expected: expected.to_string(),
            found: ckpt.header.kind.to_string(),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert(
            "a",
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
        );
        p.insert("b", Tensor::vector(vec![7.0]));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.gag");
        let cfg = serde_json::json!({"d": 3});
        let hash = save(&path, CheckpointKind::Projector, &cfg, 9, &params()).unwrap();
        let ck = load(&path, CheckpointKind::Projector).unwrap();
        assert_eq!(ck.header.content_hash, hash);
        assert_eq!(ck.header.config, cfg);
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_le_bytes(), t2.to_le_bytes());
        }
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"GAG1");
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = encode(CheckpointKind::Base, &serde_json::Value::Null, 0, &params()).unwrap();
        let p = Path::new("mem");
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], p), Err(GagError::Corruption { .. })));
        }
        let mut tampered = bytes.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 0x40;
        assert!(matches!(decode(&tampered, p), Err(GagError::Corruption { .. })));
    }

    #[test]
    fn kind_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.gag");
        save(&path, CheckpointKind::Projector, &serde_json::Value::Null, 0, &params()).unwrap();
        assert!(matches!(
            load(&path, CheckpointKind::Expert),
            Err(GagError::Kind { .. })
        ));
        assert!(matches!(
            load(&dir.path().join("none"), CheckpointKind::Expert),
            Err(GagError::MissingArtifact(_))
        ));
    }
}
