//! Multi-tensor archive used for checkpoints: a name-indexed sequence of
//! LORCK1 records in one file.
//!
//! Layout: 8-byte magic `LORCKAR1`, u32-le entry count, then per entry:
//! u16-le name length, UTF-8 name, u64-le payload length, LORCK1 record.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::lorck1;

const MAGIC: &[u8; 8] = b"LORCKAR1";

#[derive(Default, Debug, Clone)]
pub struct Archive {
    entries: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor<E: Element>(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        self.entries.insert(name.into(), lorck1::encode(t));
    }

    pub fn put_u8(&mut self, name: impl Into<String>, shape: &[usize], data: &[u8]) {
        self.entries.insert(name.into(), lorck1::encode_u8(shape, data));
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.put_tensor(name, &Tensor::<f64>::scalar(value));
    }

    pub fn tensor<E: Element>(&self, name: &str) -> Result<Tensor<E>> {
        let bytes = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive entry `{}` missing", name)))?;
        lorck1::decode(bytes)
    }

    pub fn u8_entry(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let bytes = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive entry `{}` missing", name)))?;
        lorck1::decode_u8(bytes)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.tensor::<f64>(name)?.data()[0])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, payload) in &self.entries {
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(payload.len() as u64).to_le_bytes())?;
            f.write_all(payload)?;
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint archive".into()));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut entries = BTreeMap::new();
        let mut at = 12usize;
        for _ in 0..count {
            if at + 2 > bytes.len() {
                return Err(Error::Format("truncated archive entry header".into()));
            }
            let name_len = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()) as usize;
            at += 2;
            let name = String::from_utf8(bytes[at..at + name_len].to_vec())
                .map_err(|_| Error::Format("archive entry name is not UTF-8".into()))?;
            at += name_len;
            let payload_len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
            at += 8;
            if at + payload_len > bytes.len() {
                return Err(Error::Format(format!("truncated payload for `{}`", name)));
            }
            entries.insert(name, bytes[at..at + payload_len].to_vec());
            at += payload_len;
        }
        Ok(Archive { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.lorck");
        let mut ar = Archive::new();
        ar.put_tensor("w", &Tensor::<f32>::from_vec(vec![2], vec![1.5, -2.0]).unwrap());
        ar.put_u8("mask", &[2, 2], &[1, 0, 0, 1]);
        ar.put_scalar("iteration", 42.0);
        ar.write(&path).unwrap();

        let back = Archive::read(&path).unwrap();
        assert!(back.tensor::<f32>("w").unwrap().bit_eq(&ar.tensor::<f32>("w").unwrap()));
        assert_eq!(back.u8_entry("mask").unwrap().1, vec![1, 0, 0, 1]);
        assert_eq!(back.scalar("iteration").unwrap(), 42.0);
        assert!(back.tensor::<f32>("absent").is_err());
    }
}
