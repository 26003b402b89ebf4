//! Versioned binary container for parameters, optimizer and PRNG state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SEGLM1\0\0"
//! version    u32
//! records*   until EOF:
//!   name_len u32, name UTF-8 bytes,
//!   rank     u32, dims rank × u64,
//!   values   prod(dims) × f64
//! ```
//!
//! Byte strings (config text, lexicon, vocabulary) are stored as rank-1
//! records with one byte value per entry.

use std::io::{Read, Write};
use std::path::Path;

use super::array::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SEGLM1\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        if let Some(slot) = self.records.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = value;
        } else {
            self.records.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn records(&self) -> &[(String, Array)] {
        &self.records
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.put(name, Array::vector(bytes.iter().map(|b| *b as f64).collect()));
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.require(name)?
            .data()
            .iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(v) {
                    Ok(*v as u8)
                } else {
                    Err(Error::Format(format!("record {name:?} is not a byte string")))
                }
            })
            .collect()
    }

    pub fn put_str(&mut self, name: impl Into<String>, s: &str) {
        self.put_bytes(name, s.as_bytes());
    }

    pub fn get_str(&self, name: &str) -> Result<String> {
        String::from_utf8(self.get_bytes(name)?)
            .map_err(|_| Error::Format(format!("record {name:?} is not UTF-8")))
    }

    /// Stores a `u64` losslessly as eight byte-valued entries.
    pub fn put_u64(&mut self, name: impl Into<String>, value: u64) {
        self.put_bytes(name, &value.to_le_bytes());
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b = self.get_bytes(name)?;
        let arr: [u8; 8] = b
            .try_into()
            .map_err(|_| Error::Format(format!("record {name:?} is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, a) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.shape().len() as u32).to_le_bytes())?;
            for d in a.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in a.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut ck = Checkpoint::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = dims.iter().product();
            if len.saturating_mul(8) > r.len() {
                return Err(Error::Format(format!("record {name:?} truncated")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            ck.records.push((name, Array::from_vec(&dims, data)?));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
