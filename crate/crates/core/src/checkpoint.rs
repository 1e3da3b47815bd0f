//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"TTVRCKPT"
//! u32    version (= 1)
//! u32    metadata count, u32 entry count
//! per metadata pair: u32 len + key bytes, u32 len + value bytes
//! per entry: u32 len + name bytes, u8 dtype (0 = f32), u32 ndim,
//!            u64 dims[ndim], u64 payload offset, u64 element count
//! payload: raw row-major f32 values, offsets relative to file start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TTVRCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no entry {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Order-sensitive checksum over every entry name and value.
    pub fn checksum(&self) -> u64 {
        self.entries.iter().fold(0u64, |acc, (name, t)| {
            let name_hash = name
                .bytes()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
            acc.rotate_left(7) ^ name_hash ^ t.checksum()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.write_u32::<LittleEndian>(VERSION).unwrap();
        header.write_u32::<LittleEndian>(self.metadata.len() as u32).unwrap();
        header.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        for (k, v) in &self.metadata {
            write_str(&mut header, k);
            write_str(&mut header, v);
        }
        // Offsets depend on the header length, so size the entry table first.
        let table_len: usize = self
            .entries
            .iter()
            .map(|(name, t)| 4 + name.len() + 1 + 4 + 8 * t.shape().len() + 16)
            .sum();
        let mut offset = (header.len() + table_len) as u64;
        let mut table = Vec::with_capacity(table_len);
        for (name, t) in &self.entries {
            write_str(&mut table, name);
            table.push(DTYPE_F32);
            table.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                table.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            table.write_u64::<LittleEndian>(offset).unwrap();
            table.write_u64::<LittleEndian>(t.numel() as u64).unwrap();
            offset += 4 * t.numel() as u64;
        }
        debug_assert_eq!(table.len(), table_len);
        let mut out = header;
        out.extend_from_slice(&table);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_meta = read_u32(&mut cur)?;
        let n_entries = read_u32(&mut cur)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..n_meta {
            let k = read_str(&mut cur)?;
            let v = read_str(&mut cur)?;
            ckpt.metadata.insert(k, v);
        }
        for _ in 0..n_entries {
            let name = read_str(&mut cur)?;
            let dtype = cur
                .read_u8()
                .map_err(|_| Error::Integrity("truncated entry table".into()))?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("entry {name:?} has unknown dtype {dtype}")));
            }
            let ndim = read_u32(&mut cur)? as usize;
            if ndim > 16 {
                return Err(Error::Format(format!("entry {name:?} claims {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut cur)? as usize);
            }
            let offset = read_u64(&mut cur)? as usize;
            let count = read_u64(&mut cur)? as usize;
            let expected: usize = shape.iter().product();
            if expected != count || shape.iter().any(|&d| d == 0) {
                return Err(Error::Integrity(format!(
                    "entry {name:?}: shape {shape:?} disagrees with length {count}"
                )));
            }
            let end = count
                .checked_mul(4)
                .and_then(|n| n.checked_add(offset))
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| Error::Integrity(format!("entry {name:?} payload is truncated")))?;
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.entries.insert(name, Tensor::from_parts(shape, data));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    cur.read_u32::<LittleEndian>()
        .map_err(|_| Error::Integrity("truncated checkpoint header".into()))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    cur.read_u64::<LittleEndian>()
        .map_err(|_| Error::Integrity("truncated checkpoint header".into()))
}

fn read_str(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let len = read_u32(cur)? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(Error::Integrity("truncated string in checkpoint header".into()));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::Integrity("truncated string in checkpoint header".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-utf8 string in checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_entry() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::zeros(&[3]));
        c.set_meta("iteration", "12");
        c
    }

    #[test]
    fn single_entry_round_trip() {
        let c = one_entry();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let bytes = one_entry().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn truncated_header_is_integrity_error() {
        let bytes = one_entry().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..20]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = one_entry().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = one_entry().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn length_mismatch_is_integrity_error() {
        let mut bytes = one_entry().to_bytes();
        // header: 8 magic + 12 counts + meta("iteration","12") = 4+9+4+2
        let entry_start = 8 + 12 + 19;
        // name "w" (4+1), dtype 1, ndim 4, dim 8 -> patch the dim from 3 to 4
        let dim_at = entry_start + 5 + 1 + 4;
        bytes[dim_at] = 4;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }
}
