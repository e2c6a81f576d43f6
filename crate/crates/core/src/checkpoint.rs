//! Versioned tensor container used for generator checkpoints, resumable
//! training state and pretrained feature weights.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes  "IDDCKPT\0"
//! version        u32      FORMAT_VERSION
//! manifest_len   u32
//! manifest       manifest_len bytes of UTF-8 JSON (see `Manifest`)
//! tensor_count   u32
//! tensor_count × {
//!     name_len   u16
//!     name       name_len bytes of UTF-8
//!     ndim       u8
//!     dims       ndim × u32
//!     data       product(dims) × f64 (IEEE-754 bits, little-endian)
//! }
//! ```
//!
//! Tensors are written in lexicographic name order and the file must end
//! exactly after the last tensor. Writes go to a sibling temporary file that
//! is renamed over the destination.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_params, ModelConfig, ParamTensor, Parameters};

pub const MAGIC: &[u8; 8] = b"IDDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
/// Tensor-name prefix reserved for optimizer moments.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Training progress, present only in resumable training checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainMeta>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// Number of completed training steps.
    pub step: u64,
    /// Optimizer update count per parameter tensor.
    pub optimizer_steps: BTreeMap<String, u64>,
}

pub fn encode(manifest: &Manifest, tensors: &BTreeMap<String, ParamTensor>) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(manifest).map_err(|e| Error::Config(e.to_string()))?;
    let payload: usize = tensors.values().map(|t| t.data.len() * 8 + 64).sum();
    let mut buf = Vec::with_capacity(32 + manifest.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len()
            || t.shape.len() > u8::MAX as usize
            || name.len() > u16::MAX as usize
        {
            return Err(Error::Shape(format!("tensor {name} cannot be encoded")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Manifest, BTreeMap<String, ParamTensor>)> {
    let corrupt = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(corrupt)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32().map_err(corrupt)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest_len = r.u32().map_err(corrupt)? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(manifest_len).map_err(corrupt)?)
        .map_err(|e| corrupt(format!("manifest: {e}")))?;
    let count = r.u32().map_err(corrupt)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16().map_err(corrupt)? as usize;
        let name = std::str::from_utf8(r.take(name_len).map_err(corrupt)?)
            .map_err(|e| corrupt(format!("tensor name: {e}")))?
            .to_string();
        let ndim = r.u8().map_err(corrupt)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(corrupt)?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| corrupt(format!("tensor {name} is too large")))?;
        let raw = r
            .take(
                len.checked_mul(8)
                    .ok_or_else(|| corrupt("overflow".into()))?,
            )
            .map_err(corrupt)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors
            .insert(name.clone(), ParamTensor { shape, data })
            .is_some()
        {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((manifest, tensors))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_tensor_file(
    path: &Path,
    manifest: &Manifest,
    tensors: &BTreeMap<String, ParamTensor>,
) -> Result<()> {
    write_atomic(path, &encode(manifest, tensors)?)
}

pub fn read_tensor_file(path: &Path) -> Result<(Manifest, BTreeMap<String, ParamTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn save_checkpoint(params: &Parameters, config: &ModelConfig, path: &Path) -> Result<()> {
    let manifest = Manifest {
        model: Some(config.clone()),
        train: None,
    };
    write_tensor_file(path, &manifest, params)
}

/// Loads generator parameters and configuration; optimizer tensors in a
/// training checkpoint are ignored.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, ModelConfig)> {
    let (manifest, mut tensors) = read_tensor_file(path)?;
    let config = manifest.model.ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        reason: "manifest carries no model configuration".into(),
    })?;
    tensors.retain(|name, _| !name.starts_with(OPTIMIZER_PREFIX));
    validate_params(&config, &tensors)?;
    Ok((tensors, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig::default();
        let mut params = init_params(&config, 9).unwrap();
        // values that do not survive a decimal round trip
        params.get_mut("stem.bias").unwrap().data[0] = 0.1 + 0.2;
        params.get_mut("stem.bias").unwrap().data[1] = -f64::MIN_POSITIVE;
        save_checkpoint(&params, &config, &path).unwrap();
        let (back, back_config) = load_checkpoint(&path).unwrap();
        assert_eq!(back_config, config);
        for (name, t) in &params {
            let b = &back[name];
            assert_eq!(t.shape, b.shape);
            assert!(t
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn truncated_file_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig::default();
        save_checkpoint(&init_params(&config, 1).unwrap(), &config, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::Decode { .. })),
                "cut {cut}"
            );
        }
        let mut extended = bytes.clone();
        extended.push(0);
        fs::write(&path, extended).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Decode { .. })));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig::default();
        save_checkpoint(&init_params(&config, 1).unwrap(), &config, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_checkpoint(Path::new("/no/such/file.ckpt")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn header_layout() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a".to_string(),
            ParamTensor {
                shape: vec![2],
                data: vec![1.0, -2.0],
            },
        );
        let bytes = encode(&Manifest::default(), &tensors).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + mlen], b"{}");
        let rest = &bytes[16 + mlen..];
        assert_eq!(u32::from_le_bytes(rest[..4].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(rest[4..6].try_into().unwrap()), 1);
        assert_eq!(rest[6], b'a');
        assert_eq!(rest[7], 1);
        assert_eq!(u32::from_le_bytes(rest[8..12].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(rest[12..20].try_into().unwrap()), 1.0);
        assert_eq!(rest.len(), 28);
    }
}
