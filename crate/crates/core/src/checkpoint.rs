//! Checkpoint files.
//!
//! Layout (little-endian): magic `KGNN`, `u32` version = 1, then a
//! `u32`-counted table of records `[u8 kind][u64 id][u32 dim][dim × f64]`
//! sorted by key. The record encoding matches the wire protocol's PULL
//! reply, so shard servers dump their stores directly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{KgError, Result};
use crate::params::{ModelSpec, ParamKey, ParamKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KGNN";
pub const VERSION: u32 = 1;

/// Serializes sorted `(key, tensor)` records.
pub fn encode(entries: &[(ParamKey, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, tensor) in entries {
        buf.push(key.kind.code());
        buf.extend_from_slice(&key.id.to_le_bytes());
        buf.extend_from_slice(&(tensor.numel() as u32).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes a checkpoint; entries are sorted here so identical stores
/// always produce identical bytes.
pub fn write(path: &Path, mut entries: Vec<(ParamKey, Tensor)>) -> Result<()> {
    entries.sort_by_key(|(k, _)| *k);
    let buf = encode(&entries);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint. Tensors come back flat; [`restore_shapes`]
/// reapplies the model layout.
pub fn read(path: &Path) -> Result<Vec<(ParamKey, Tensor)>> {
    let data = fs::read(path)?;
    decode(&data)
}

pub fn decode(data: &[u8]) -> Result<Vec<(ParamKey, Tensor)>> {
    if data.len() < 12 || &data[0..4] != MAGIC {
        return Err(KgError::Checkpoint("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(KgError::Checkpoint(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let n = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if pos + 13 > data.len() {
            return Err(KgError::Checkpoint("truncated checkpoint".into()));
        }
        let kind = ParamKind::from_code(data[pos])?;
        let id = u64::from_le_bytes(data[pos + 1..pos + 9].try_into().unwrap());
        let dim = u32::from_le_bytes(data[pos + 9..pos + 13].try_into().unwrap()) as usize;
        pos += 13;
        if pos + dim * 8 > data.len() {
            return Err(KgError::Checkpoint("truncated checkpoint tensor".into()));
        }
        let mut values = Vec::with_capacity(dim);
        for i in 0..dim {
            values.push(f64::from_le_bytes(
                data[pos + i * 8..pos + i * 8 + 8].try_into().unwrap(),
            ));
        }
        pos += dim * 8;
        out.push((ParamKey::new(kind, id), Tensor::vector(values)));
    }
    if pos != data.len() {
        return Err(KgError::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}

/// Reshapes flat checkpoint tensors per the model layout.
pub fn restore_shapes(
    entries: Vec<(ParamKey, Tensor)>,
    spec: &ModelSpec,
) -> Result<Vec<(ParamKey, Tensor)>> {
    entries
        .into_iter()
        .map(|(key, tensor)| {
            let shape = spec.shape_of(key)?;
            if shape.iter().product::<usize>() != tensor.numel() {
                return Err(KgError::Checkpoint(format!(
                    "checkpoint tensor for {key} has {} values, layout wants {:?}",
                    tensor.numel(),
                    shape
                )));
            }
            Ok((key, tensor.reshaped(shape)?))
        })
        .collect()
}

/// Loads every `shard-*.kgnn` file under an epoch directory into one
/// parameter list.
pub fn read_epoch_dir(dir: &Path) -> Result<Vec<(ParamKey, Tensor)>> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("shard-") && n.ends_with(".kgnn"))
                .unwrap_or(false)
        })
        .collect();
    if files.is_empty() {
        return Err(KgError::Checkpoint(format!(
            "no shard files under {}",
            dir.display()
        )));
    }
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(read(&f)?);
    }
    all.sort_by_key(|(k, _)| *k);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_byte_stability() {
        let entries = vec![
            (
                ParamKey::new(ParamKind::RelationEmb, 1),
                Tensor::vector(vec![0.25, -1.5]),
            ),
            (
                ParamKey::new(ParamKind::EntityEmb, 0),
                Tensor::vector(vec![1.0, 2.0]),
            ),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.kgnn");
        write(&path, entries).unwrap();
        let loaded = read(&path).unwrap();
        assert_eq!(loaded[0].0, ParamKey::new(ParamKind::EntityEmb, 0));
        assert_eq!(loaded[1].1.data(), &[0.25, -1.5]);

        let again = dir.path().join("ck2.kgnn");
        write(&again, loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let entries = vec![(
            ParamKey::new(ParamKind::EntityEmb, 0),
            Tensor::vector(vec![1.0]),
        )];
        let mut buf = encode(&entries);
        buf[0] = b'X';
        assert!(matches!(decode(&buf), Err(KgError::Checkpoint(_))));

        let mut buf = encode(&entries);
        buf[4] = 9;
        assert!(matches!(decode(&buf), Err(KgError::Checkpoint(_))));
    }
}
