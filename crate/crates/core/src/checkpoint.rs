//! Binary checkpoints: every parameter and buffer keyed by name.
//!
//! Layout: `"SQMU"` | u32 version | u32 count | per tensor (sorted by name):
//! u16 name length, UTF-8 name, u8 rank, u32 dims, f32 LE payload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use qmix_tensor::{Real, Shape, Tensor};

use crate::error::{Error, FormatError, Result};
use crate::model::Model;

pub const MAGIC: [u8; 4] = *b"SQMU";
pub const VERSION: u32 = 1;

/// Name-sorted tensors of a model, parameters and buffers together.
pub fn collect<T: Real>(model: &Model<T>) -> BTreeMap<String, Tensor<f32>> {
    let mut all = BTreeMap::new();
    for (_, p) in model.params.iter() {
        all.insert(p.name.clone(), p.value.cast());
    }
    for (name, t) in model.buffers.iter() {
        all.insert(name.to_string(), t.cast());
    }
    all
}

pub fn encode(tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| FormatError::Malformed(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.shape().0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if rank > 4 {
            return Err(FormatError::Malformed(format!("{name}: rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for slot in dims.iter_mut().skip(4 - rank) {
            *slot = r.u32("dims")? as usize;
        }
        let shape = Shape(dims);
        let n = shape.numel();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed("size overflow".into()))?, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(FormatError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode(&collect(model))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Overwrite the model's parameters and buffers from `tensors`. The model is
/// left untouched unless the name sets and shapes match exactly.
pub fn restore<T: Real>(model: &mut Model<T>, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let expected = collect(model);
    let want: BTreeSet<&String> = expected.keys().collect();
    let have: BTreeSet<&String> = tensors.keys().collect();
    if want != have {
        return Err(FormatError::RegistryMismatch {
            missing: want.difference(&have).map(|s| s.to_string()).collect(),
            unexpected: have.difference(&want).map(|s| s.to_string()).collect(),
        }
        .into());
    }
    for (name, t) in &expected {
        let found = &tensors[name];
        if found.shape() != t.shape() {
            return Err(FormatError::ShapeMismatch {
                name: name.clone(),
                expected: t.shape().0.to_vec(),
                found: found.shape().0.to_vec(),
            }
            .into());
        }
    }
    for p in model.params.iter_mut() {
        p.value = tensors[&p.name].cast();
        p.grad = None;
    }
    let names: Vec<String> = model.buffers.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let id = model.buffers.id(&name).expect("buffer listed by iter");
        *model.buffers.get_mut(id) = tensors[&name].cast();
    }
    Ok(())
}

pub fn load<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(model, &decode(&bytes)?)
}
