//! Binary container for checkpoints and precomputed embedding tables.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u64  header length in bytes
//! ...  header: JSON { format_version, config_hash, kind, extra{...} }
//! u32  array count
//! per array:
//!   u32  name length, then that many UTF-8 bytes
//!   u32  rank, then rank x u64 dimensions
//!   dims-product x f64 values
//! ```
//!
//! Arrays are written in the order given (parameter registration order for
//! checkpoints), `extra` is a sorted map, and floats round-trip exactly via
//! their bit patterns, so save -> load -> save reproduces the file byte for
//! byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeqPeError};
use crate::numerics::params::ParamSet;

/// Current container format version.
pub const FORMAT_VERSION: u32 = 1;

/// JSON header of a container file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ContainerMeta {
    pub format_version: u32,
    /// Hash of the run config that produced the file; loaders compare it to
    /// their own config's hash and refuse mismatches.
    pub config_hash: String,
    /// What the arrays are: `"checkpoint"` or `"table"`.
    pub kind: String,
    /// Free-form extras (table region bounds, step counts, ...), sorted for
    /// determinism.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl ContainerMeta {
    pub fn new(kind: &str, config_hash: &str) -> ContainerMeta {
        ContainerMeta {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            kind: kind.to_string(),
            extra: BTreeMap::new(),
        }
    }
}

/// One named f64 array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn bad(msg: impl Into<String>) -> SeqPeError {
    SeqPeError::ContainerFormat(msg.into())
}

/// Writes a container file.
pub fn save_container(path: &Path, meta: &ContainerMeta, arrays: &[NamedArray]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(meta)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let numel: usize = a.shape.iter().product();
        if numel != a.data.len() {
            return Err(bad(format!(
                "array {:?}: shape {:?} does not match {} values",
                a.name,
                a.shape,
                a.data.len()
            )));
        }
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &d in &a.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated container"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated container"))?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a container file back.
pub fn load_container(path: &Path) -> Result<(ContainerMeta, Vec<NamedArray>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header_len = read_exact_u64(&mut r)? as usize;
    if header_len > 1 << 20 {
        return Err(bad(format!("implausible header length {header_len}")));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let meta: ContainerMeta = serde_json::from_slice(&header)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(SeqPeError::ContainerMismatch(format!(
            "format version {} (this build reads {})",
            meta.format_version, FORMAT_VERSION
        )));
    }
    let count = read_exact_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_exact_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
        let rank = read_exact_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(bad(format!("implausible rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_exact_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated data for {name:?}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push(NamedArray { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last array"));
    }
    Ok((meta, arrays))
}

/// Snapshot of a parameter set as container arrays, in registration order.
pub fn params_to_arrays(params: &ParamSet) -> Vec<NamedArray> {
    params
        .iter()
        .map(|p| NamedArray {
            name: p.name.clone(),
            shape: p.tensor.shape(),
            data: p.tensor.to_vec(),
        })
        .collect()
}

/// Loads arrays into an existing parameter set.  Names, shapes and the
/// overall count must match exactly.
pub fn arrays_into_params(arrays: &[NamedArray], params: &ParamSet) -> Result<()> {
    if arrays.len() != params.len() {
        return Err(SeqPeError::ContainerMismatch(format!(
            "container holds {} arrays, model has {} parameters",
            arrays.len(),
            params.len()
        )));
    }
    for a in arrays {
        let p = params.get(&a.name).ok_or_else(|| {
            SeqPeError::ContainerMismatch(format!("no parameter named {:?}", a.name))
        })?;
        if p.tensor.shape() != a.shape {
            return Err(SeqPeError::ContainerMismatch(format!(
                "parameter {:?}: container shape {:?}, model shape {:?}",
                a.name,
                a.shape,
                p.tensor.shape()
            )));
        }
        p.tensor.update_data(|d| d.copy_from_slice(&a.data));
    }
    Ok(())
}

/// FNV-1a hash of a canonical config rendering, hex-encoded.  Stable across
/// runs and platforms; only used to pair checkpoints with their configs.
pub fn config_hash(canonical: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn sample_meta() -> ContainerMeta {
        let mut extra = BTreeMap::new();
        extra.insert("steps".into(), "120".into());
        ContainerMeta {
            format_version: FORMAT_VERSION,
            config_hash: config_hash("demo"),
            kind: "checkpoint".into(),
            extra,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let arrays = vec![
            NamedArray {
                name: "w".into(),
                shape: vec![2, 3],
                data: vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 3.75, -0.0],
            },
            NamedArray {
                name: "b".into(),
                shape: vec![3],
                data: vec![0.1, 0.2, 0.3],
            },
        ];
        let meta = sample_meta();
        save_container(&p1, &meta, &arrays).unwrap();
        let (meta2, arrays2) = load_container(&p1).unwrap();
        assert_eq!(meta, meta2);
        save_container(&p2, &meta2, &arrays2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save -> load -> save changed bytes");
        // Values survive exactly, including -0.0.
        assert_eq!(arrays2[0].data[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn wrong_version_and_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut meta = sample_meta();
        meta.format_version = 99;
        save_container(&path, &meta, &[]).unwrap();
        assert!(matches!(
            load_container(&path),
            Err(SeqPeError::ContainerMismatch(_))
        ));
        std::fs::write(&path, b"not a container").unwrap();
        assert!(load_container(&path).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let arrays = vec![NamedArray {
            name: "w".into(),
            shape: vec![4],
            data: vec![1.0, 2.0, 3.0, 4.0],
        }];
        save_container(&path, &sample_meta(), &arrays).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_container(&path).is_err());
    }

    #[test]
    fn params_roundtrip_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut ps = ParamSet::new();
        let w = ps
            .register("layer.w", Tensor::leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true)
            .unwrap();
        ps.register("layer.b", Tensor::leaf(&[2], vec![0.5, -0.5]).unwrap(), false)
            .unwrap();
        save_container(&path, &sample_meta(), &params_to_arrays(&ps)).unwrap();
        w.update_data(|d| d.fill(0.0));
        let (_, arrays) = load_container(&path).unwrap();
        arrays_into_params(&arrays, &ps).unwrap();
        assert_eq!(w.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        // Shape mismatch is refused.
        let mut other = ParamSet::new();
        other
            .register("layer.w", Tensor::leaf(&[4], vec![0.0; 4]).unwrap(), true)
            .unwrap();
        other
            .register("layer.b", Tensor::leaf(&[2], vec![0.0; 2]).unwrap(), false)
            .unwrap();
        assert!(matches!(
            arrays_into_params(&arrays, &other),
            Err(SeqPeError::ContainerMismatch(_))
        ));
    }

    #[test]
    fn config_hash_is_stable() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
        // Frozen value so accidental algorithm changes get noticed.
        assert_eq!(config_hash(""), "cbf29ce484222325");
    }
}
