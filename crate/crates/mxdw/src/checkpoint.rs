//! Binary checkpoint format: magic `MXDW`, format version, then named
//! parameter tensors (name, shape, little-endian f32 payload).

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::nn::ParamStore;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MXDW";
pub const VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Default)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        assert!(!self.tensors.iter().any(|(n, _)| n == name), "duplicate tensor name {name}");
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Add every parameter of a store under `prefix.`.
    pub fn push_store(&mut self, prefix: &str, ps: &ParamStore) {
        for (name, tensor) in ps.iter() {
            self.push(&format!("{prefix}.{name}"), tensor.clone());
        }
    }

    /// Restore every parameter of a store from `prefix.` entries.
    pub fn restore_store(&self, prefix: &str, ps: &mut ParamStore) -> Result<()> {
        for i in 0..ps.len() {
            let name = format!("{prefix}.{}", ps.name_at(i));
            let tensor = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            ps.set_by_name(&name[prefix.len() + 1..], tensor.clone()).map_err(Error::Format)?;
        }
        Ok(())
    }

    /// True if any stored tensor name starts with `prefix.`.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
            w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
            for &v in tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
            r.read_exact(&mut u32buf)?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut u32buf)?;
                data.push(f32::from_le_bytes(u32buf) as f64);
            }
            ck.push(&name, Tensor::from_vec(rows, cols, data));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_quantized_values() {
        let mut ck = Checkpoint::new();
        ck.push("a.w", Tensor::from_vec(2, 3, vec![0.5, -0.25, 1.5, 3.25, -0.125, 0.0]));
        ck.push("b", Tensor::scalar(42.0));
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"MXDW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());

        let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        // all values above are exactly representable in f32
        assert_eq!(back.get("a.w").unwrap(), ck.get("a.w").unwrap());
        assert_eq!(back.get("b").unwrap().item(), 42.0);
    }

    #[test]
    fn double_round_trip_is_idempotent() {
        let mut ck = Checkpoint::new();
        // an f64 value that is NOT exactly representable in f32
        ck.push("x", Tensor::scalar(0.1234567890123456789));
        let mut bytes1 = Vec::new();
        ck.write(&mut bytes1).unwrap();
        let once = Checkpoint::read(&mut bytes1.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        once.write(&mut bytes2).unwrap();
        let twice = Checkpoint::read(&mut bytes2.as_slice()).unwrap();
        assert_eq!(once.get("x").unwrap(), twice.get("x").unwrap());
    }

    #[test]
    fn bad_magic_is_rejected_as_format_error() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Checkpoint::read(&mut bytes.as_slice()).is_err());
    }
}
