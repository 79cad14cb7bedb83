//! Checkpoint format: magic "EAGR", format version u32 LE, entry count
//! u32 LE, then per entry a u16 LE name length, the UTF-8 name, and the
//! tensor in the binary tensor format. Entry names are unique and order
//! is preserved, so save/load/save round-trips are byte-identical.

use std::collections::BTreeSet;
use std::path::Path;

use crate::cursor::Cursor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EAGR";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, _) in &entries {
            if name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("entry name too long: {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate entry name {name:?}")));
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches an entry that must exist; the error names the tensor.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Fetches an entry and validates its shape; the error names the
    /// offending tensor and both shapes.
    pub fn require_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.require(name)?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {}, expected {}",
                crate::error::fmt_shape(&t.shape),
                crate::error::fmt_shape(shape)
            )));
        }
        Ok(t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tensor.write_into(&mut out).expect("vec write cannot fail");
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        let magic = cur.take(4, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(cur.error_at(0, "bad checkpoint magic, expected \"EAGR\""));
        }
        let version = cur.read_u32("checkpoint version")?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(cur.error_at(
                cur.pos() - 4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = cur.read_u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.read_u16("name length")? as usize;
            let name_bytes = cur.take(name_len, "entry name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| cur.error_at(cur.pos() - name_len, "entry name is not UTF-8"))?
                .to_string();
            let tensor = Tensor::read_from(&mut cur)?;
            entries.push((name, tensor));
        }
        if !cur.is_empty() {
            return Err(cur.error_here("trailing bytes after the last entry"));
        }
        Checkpoint::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(vec![
            (
                "a.w".to_string(),
                Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ),
            (
                "a.b".to_string(),
                Tensor::new(vec![2], vec![-0.5, 0.5]).unwrap(),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        back.save(&path).unwrap();
        let third = std::fs::read(&path).unwrap();
        assert_eq!(third, ckpt.to_bytes());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let err = Checkpoint::new(vec![
            ("x".to_string(), Tensor::scalar(1.0)),
            ("x".to_string(), Tensor::scalar(2.0)),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let ckpt = sample();
        let err = ckpt.require_shaped("a.w", &[3, 3]).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("a.w") && msg.contains("2x2") && msg.contains("3x3"),
            "{msg}"
        );
    }

    #[test]
    fn truncated_bytes_are_rejected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
