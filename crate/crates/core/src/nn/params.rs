//! Named parameter storage and the flat-binary checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Companion index path of a checkpoint binary.
pub fn index_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

impl<T: Float> ParamStore<T> {
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Writes `bin` (little-endian f32, parameters in registration order)
    /// and its JSON index `name -> {offset, shape}`.
    pub fn save(&self, bin: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(4 * self.num_scalars());
        let mut index = BTreeMap::new();
        let mut offset = 0;
        for (name, v) in self.names.iter().zip(&self.values) {
            for &x in v.data() {
                bytes.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            }
            index.insert(
                name.clone(),
                IndexEntry {
                    offset,
                    shape: v.shape().to_vec(),
                },
            );
            offset += v.len();
        }
        fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
        let ip = index_path(bin);
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&ip, e))?;
        fs::write(&ip, json).map_err(|e| Error::io(&ip, e))
    }

    /// Loads values saved by [`ParamStore::save`] into an identically
    /// structured store.
    pub fn load(&mut self, bin: &Path) -> Result<()> {
        let ip = index_path(bin);
        let text = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: BTreeMap<String, IndexEntry> = serde_json::from_str(&text).map_err(|e| Error::json(&ip, e))?;
        let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
        if index.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint {} holds {} parameters, model has {}",
                bin.display(),
                index.len(),
                self.len()
            )));
        }
        for (name, entry) in &index {
            let id = self.id(name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {name} is not part of the model"))
            })?;
            let dst = &mut self.values[id.0];
            if dst.shape() != entry.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    entry.shape,
                    dst.shape()
                )));
            }
            let end = 4 * (entry.offset + dst.len());
            if end > bytes.len() {
                return Err(Error::Config(format!("checkpoint {} is truncated", bin.display())));
            }
            for (v, b) in dst.data_mut().iter_mut().zip(bytes[4 * entry.offset..end].chunks_exact(4)) {
                *v = T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Grads<T>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f32>::default();
        p.add("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap()).unwrap();
        p.add("b", Tensor::from_vec(&[1], vec![0.25]).unwrap()).unwrap();
        let bin = dir.path().join("model.bin");
        p.save(&bin).unwrap();
        assert_eq!(fs::read(&bin).unwrap().len(), 28);
        let idx: serde_json::Value = serde_json::from_str(&fs::read_to_string(index_path(&bin)).unwrap()).unwrap();
        assert_eq!(idx["b"]["offset"], 6);
        assert_eq!(idx["a.weight"]["shape"], serde_json::json!([2, 3]));

        let mut q = p.clone();
        for id in q.ids().collect::<Vec<_>>() {
            q.get_mut(id).data_mut().fill(0.0);
        }
        q.load(&bin).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f32>::default();
        p.add("w", Tensor::zeros(&[2])).unwrap();
        let bin = dir.path().join("m.bin");
        p.save(&bin).unwrap();
        let mut q = ParamStore::<f32>::default();
        q.add("w", Tensor::zeros(&[3])).unwrap();
        assert!(q.load(&bin).is_err());
        assert!(p.add("w", Tensor::zeros(&[1])).is_err());
    }
}
