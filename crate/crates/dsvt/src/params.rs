//! Learnable-parameter containers, deterministic seeding, and the named-tensor
//! blob format used to persist them.
//!
//! Weights are stored as a flat little-endian f32 blob plus a JSON sidecar
//! listing tensor names, shapes, and byte offsets, so fixtures can be reused
//! across runs and languages.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

/// Affine map `y = W x + b` with `W` stored row-major as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: FeatureTensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weights drawn uniformly from `±1/sqrt(in_dim)`, zero bias.
    pub fn seeded(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Self {
            weight: FeatureTensor::from_vec(&[out_dim, in_dim], data).expect("seeded shape"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            weight: FeatureTensor::from_vec(&[dim, dim], data).expect("identity shape"),
            bias: vec![0.0; dim],
        }
    }

    /// `y = W x + b`, accumulated in f64.
    pub fn apply(&self, x: &[f32], y: &mut [f32]) {
        let (out, inp) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(x.len(), inp);
        debug_assert_eq!(y.len(), out);
        let w = self.weight.data();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * inp..(o + 1) * inp];
            let mut acc = self.bias[o] as f64;
            for (wi, xi) in row.iter().zip(x) {
                acc += *wi as f64 * *xi as f64;
            }
            *yo = acc as f32;
        }
    }
}

/// Per-channel scale and offset of a layer-normalization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Fold a label into a master seed (FNV-1a), so independently named
/// components draw independent streams from one CLI seed.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    master_seed ^ h
}

/// Deterministic per-tensor RNG: one master seed, one stream per tensor name.
pub fn tensor_rng(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, name))
}

// --- named-tensor blob -------------------------------------------------------

/// One entry of the JSON sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's first element inside the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobManifest {
    pub dtype: String,
    pub byte_order: String,
    pub tensors: Vec<TensorRecord>,
}

/// A named tensor pending serialization.
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

impl<'a> NamedTensor<'a> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: &'a [f32]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Sidecar path convention: the blob path with its extension replaced by `json`.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Write tensors as one little-endian f32 blob plus a JSON sidecar.
pub fn save_tensors(blob_path: &Path, tensors: &[NamedTensor<'_>]) -> Result<()> {
    let mut records = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if t.data.len() != expect {
            return Err(Error::Contract(format!(
                "tensor `{}`: shape {:?} does not match {} elements",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        records.push(TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        let start = blob.len();
        blob.resize(start + 4 * t.data.len(), 0);
        LittleEndian::write_f32_into(t.data, &mut blob[start..]);
    }
    let manifest = BlobManifest {
        dtype: "f32".to_string(),
        byte_order: "little".to_string(),
        tensors: records,
    };
    let mut f = fs::File::create(blob_path)?;
    f.write_all(&blob)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
    fs::write(sidecar_path(blob_path), json)?;
    Ok(())
}

/// Read a blob + sidecar back into `(name, tensor)` pairs, in sidecar order.
pub fn load_tensors(blob_path: &Path) -> Result<Vec<(String, FeatureTensor)>> {
    let blob = fs::read(blob_path)?;
    let side = sidecar_path(blob_path);
    let json = fs::read_to_string(&side)?;
    let manifest: BlobManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Parse(format!("sidecar {}: {e}", side.display())))?;
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::Parse(format!(
            "sidecar {}: unsupported dtype/byte_order {}/{}",
            side.display(),
            manifest.dtype,
            manifest.byte_order
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let count: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(Error::Parse(format!(
                "tensor `{}`: blob too short ({} bytes, need {})",
                rec.name,
                blob.len(),
                end
            )));
        }
        let mut data = vec![0.0f32; count];
        LittleEndian::read_f32_into(&blob[start..end], &mut data);
        out.push((rec.name.clone(), FeatureTensor::from_vec(&rec.shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_apply_matches_hand_computation() {
        let lin = Linear {
            weight: FeatureTensor::from_vec(&[2, 3], vec![1.0, 0.0, 2.0, -1.0, 1.0, 0.5]).unwrap(),
            bias: vec![0.5, -0.5],
        };
        let mut y = [0.0f32; 2];
        lin.apply(&[1.0, 2.0, 3.0], &mut y);
        assert_eq!(y, [7.5, 2.0]);
    }

    #[test]
    fn blob_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let a = vec![1.0f32, -2.5, 3.25];
        let b = vec![0.125f32; 4];
        save_tensors(
            &path,
            &[
                NamedTensor::new("a", &[3], &a),
                NamedTensor::new("b", &[2, 2], &b),
            ],
        )
        .unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a");
        assert_eq!(loaded[0].1.data(), &a[..]);
        assert_eq!(loaded[1].1.shape(), &[2, 2]);
        assert_eq!(loaded[1].1.data(), &b[..]);
    }

    #[test]
    fn seeding_is_reproducible_and_name_dependent() {
        let l1 = Linear::seeded(4, 4, &mut tensor_rng(7, "wq"));
        let l2 = Linear::seeded(4, 4, &mut tensor_rng(7, "wq"));
        let l3 = Linear::seeded(4, 4, &mut tensor_rng(7, "wk"));
        assert_eq!(l1.weight.data(), l2.weight.data());
        assert_ne!(l1.weight.data(), l3.weight.data());
    }
}
