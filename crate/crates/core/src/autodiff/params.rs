//! Named parameter sets and the checkpoint file format.
//!
//! Checkpoint layout:
//!
//! ```text
//! MCKPT1 <count>\n
//! <name> <trainable 0|1> <d0>x<d1>x...\n     (one line per entry, in store order)
//! <f32 little-endian payloads concatenated in the same order>
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::tensor::{Real, Tensor};
use super::AutodiffError;

pub const CHECKPOINT_MAGIC: &str = "MCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, uniquely named collection of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<usize, AutodiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.position(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry<T> {
        &mut self.entries[idx]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CHECKPOINT_MAGIC} {}\n", self.entries.len()).into_bytes();
        for e in &self.entries {
            let dims: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(
                format!("{} {} {}\n", e.name, u8::from(e.trainable), dims.join("x")).as_bytes(),
            );
        }
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let bad = |m: &str| AutodiffError::Checkpoint(m.to_string());
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String, AutodiffError> {
            let rest = &bytes[*pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8"))?;
            *pos += nl + 1;
            Ok(line.to_string())
        };
        let head = next_line(&mut pos)?;
        let count: usize = match head.split_once(' ') {
            Some((CHECKPOINT_MAGIC, n)) => n.parse().map_err(|_| bad("bad entry count"))?,
            _ => return Err(bad("bad magic")),
        };
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(&mut pos)?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, trainable, dims] = parts[..] else {
                return Err(bad("manifest line needs three fields"));
            };
            let trainable = match trainable {
                "0" => false,
                "1" => true,
                _ => return Err(bad("trainable flag must be 0 or 1")),
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                .collect::<Result<Vec<_>, _>>()?;
            manifest.push((name.to_string(), trainable, shape));
        }
        let mut store = ParamStore::new();
        for (name, trainable, shape) in manifest {
            let n: usize = shape.iter().product();
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(bad("payload shorter than manifest"));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            pos = end;
            store.insert(name, Tensor::new(shape, data)?, trainable)?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AutodiffError> {
        crate::volio::write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AutodiffError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
