use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// What a registry entry is, which drives initialization and training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
    /// Count of batches folded into running statistics.
    Tracked,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ParamKind::Weight { .. } | ParamKind::Bias | ParamKind::BnGamma | ParamKind::BnBeta
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named store of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.entries[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, e)| e.kind.trainable()).map(|(id, _)| id)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Same registry in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<f32>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect()
    }

    /// Overwrites every entry from `named`; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Data(format!("unexpected tensor '{name}' in checkpoint")))?;
            let slot = &mut self.entries[id.0].value;
            if slot.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
        }
        Ok(())
    }

    /// SHA-256 over the serialized container bytes.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        encode_container(&mut buf, &self.to_named()).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

pub const CONTAINER_MAGIC: &[u8; 4] = b"SAUC";
pub const CONTAINER_VERSION: u32 = 1;

/// Writes named f32 tensors: magic, version, count, then per tensor
/// `name_len u32, name, ndim u32, dims u32[], payload f32[]`, all little-endian.
pub fn encode_container(out: &mut impl Write, tensors: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_container(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    encode_container(&mut buf, tensors).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_container(&bytes).map_err(|(offset, detail)| Error::Format {
        path: path.to_path_buf(),
        offset,
        detail,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], (u64, String)> {
        if self.bytes.len() - self.pos < n {
            return Err((self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, (u64, String)> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, (u64, String)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CONTAINER_MAGIC {
        return Err((0, "bad magic, expected SAUC".into()));
    }
    let version_at = cur.pos as u64;
    let version = cur.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err((version_at, format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_at = cur.pos as u64;
        let len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(len, "name")?.to_vec())
            .map_err(|_| (name_at, "tensor name is not UTF-8".to_string()))?;
        let ndim = cur.u32("ndim")? as usize;
        if ndim > 8 {
            return Err((cur.pos as u64 - 4, format!("implausible ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = cur.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(dims, data).map_err(|e| (cur.pos as u64, e.to_string()))?));
    }
    if cur.pos != bytes.len() {
        return Err((cur.pos as u64, "trailing bytes after last tensor".into()));
    }
    Ok(out)
}
