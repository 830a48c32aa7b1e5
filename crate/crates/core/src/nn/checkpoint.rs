//! Checkpoints: `<name>.bin` holds a little-endian `u32` header length, a JSON
//! header listing tensor names and shapes, then every tensor as little-endian
//! `f32` in header order. `<name>.json` holds the architecture.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Architecture, Model};
use crate::data::Seed;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tensors = model.tensors();
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(4 + header.len() + 4 * model.parameter_count());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&model.arch)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    let arch_path = path.with_extension("json");
    let arch_bytes = fs::read(&arch_path).map_err(|source| Error::Load { path: arch_path.clone(), source })?;
    let arch: Architecture = serde_json::from_slice(&arch_bytes).map_err(|e| corrupt(e.to_string()))?;
    let bytes = fs::read(path).map_err(|source| Error::Load { path: path.to_path_buf(), source })?;
    if bytes.len() < 4 {
        return Err(corrupt("missing header length".into()));
    }
    let header_len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let header_end = 4 + header_len;
    if bytes.len() < header_end {
        return Err(corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[4..header_end]).map_err(|e| corrupt(e.to_string()))?;

    let mut model = Model::<f32>::new(arch, Seed(0))?;
    let expected: Vec<(String, Vec<usize>)> =
        model.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(corrupt("tensor layout does not match architecture".into()));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != header_end + 4 * total {
        return Err(corrupt(format!("expected {} data bytes, found {}", 4 * total, bytes.len() - header_end)));
    }
    let mut offset = header_end;
    for (mut dst, (_, shape)) in model.tensors_mut().into_iter().zip(&expected) {
        let count: usize = shape.iter().product();
        let values: Vec<f32> = bytes[offset..offset + 4 * count]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        dst.assign(&ArrayD::from_shape_vec(IxDyn(shape), values).map_err(|e| corrupt(e.to_string()))?);
        offset += 4 * count;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_small_cnn;

    #[test]
    fn reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_small_cnn([16, 16, 3], 10, Seed(77)).unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&path, &model).unwrap();
        assert!(dir.path().join("model.json").exists());
        let back = load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in model.tensors().iter().zip(back.tensors().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&path, &build_small_cnn([8, 8, 1], 2, Seed(1)).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    }
}
