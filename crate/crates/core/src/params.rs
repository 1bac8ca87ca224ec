//! Named parameter storage and the binary checkpoint container.
//!
//! A checkpoint file is:
//!
//! ```text
//! b"MFCK" | u32 LE format version | u64 LE header length | JSON header | f32 LE blob
//! ```
//!
//! The JSON header echoes the configuration and lists every tensor's name,
//! shape and offset into the blob. Floats are stored bit-exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, t: Tensor<T>, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.trainable.push(trainable);
    }

    pub fn add_param(&mut self, name: &str, t: Tensor<T>) {
        self.insert(name, t, true);
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn add_buffer(&mut self, name: &str, t: Tensor<T>) {
        self.insert(name, t, false);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|e| e.2).map(|e| e.1.len()).sum()
    }

    /// Copy every same-named, same-shaped tensor from `other`; returns the
    /// names that were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.get(name) {
                if src.shape() == self.tensors[i].shape() {
                    self.tensors[i] = src.clone();
                    copied.push(name.clone());
                }
            }
        }
        copied
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    groups: Vec<(String, Vec<TensorEntry>)>,
}

/// Named groups of f32 tensors plus a free-form JSON metadata block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub groups: Vec<(String, ParamStore<f32>)>,
}

impl Container {
    pub fn group(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.groups.iter().find(|g| g.0 == name).map(|g| &g.1)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut offset = 0;
        let mut groups = Vec::new();
        for (gname, store) in &self.groups {
            let mut entries = Vec::new();
            for (name, t, trainable) in store.iter() {
                entries.push(TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    trainable,
                });
                offset += t.len();
            }
            groups.push((gname.clone(), entries));
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            groups,
        })?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut blob = Vec::with_capacity(offset * 4);
        for (_, store) in &self.groups {
            for (_, t, _) in store.iter() {
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut blob = Vec::new();
        input.read_to_end(&mut blob)?;
        if blob.len() % 4 != 0 {
            return Err(Error::Checkpoint("truncated tensor blob".into()));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut groups = Vec::new();
        for (gname, entries) in header.groups {
            let mut store = ParamStore::new();
            for e in entries {
                let len: usize = e.shape.iter().product();
                let data = floats
                    .get(e.offset..e.offset + len)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` out of bounds", e.name)))?
                    .to_vec();
                store.insert(&e.name, Tensor::from_vec(&e.shape, data), e.trainable);
            }
            groups.push((gname, store));
        }
        Ok(Self {
            meta: header.meta,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 1e-30]));
        store.add_buffer("a.mean", Tensor::from_vec(&[1], vec![0.1]));
        let c = Container {
            meta: serde_json::json!({"epoch": 3}),
            groups: vec![("params".into(), store)],
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let a = back.group("params").unwrap().get("a.w").unwrap();
        assert_eq!(a.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(!back.group("params").unwrap().is_trainable(1));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(matches!(
            Container::read_from(&b"XXXX\x01\0\0\0"[..]),
            Err(Error::Checkpoint(_))
        ));
        let mut buf = Vec::new();
        Container::default().write_to(&mut buf).unwrap();
        buf[4] = 9;
        let err = Container::read_from(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn copy_matching_skips_shape_changes() {
        let mut a = ParamStore::<f32>::new();
        a.add_param("x", Tensor::zeros(&[2]));
        a.add_param("y", Tensor::zeros(&[3]));
        let mut b = ParamStore::<f32>::new();
        b.add_param("x", Tensor::full(&[2], 1.0));
        b.add_param("y", Tensor::full(&[4], 1.0));
        assert_eq!(a.copy_matching(&b), vec!["x".to_string()]);
        assert_eq!(a.get("y").unwrap().data(), &[0.0; 3]);
    }
}
