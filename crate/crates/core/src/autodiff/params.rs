//! Named parameters and the `ICLC` checkpoint format.
//!
//! Layout (little endian): `b"ICLC"`, version `u16`, count `u32`, then per
//! parameter: name length `u32`, UTF-8 name, rank `u32`, dims `u64 x rank`,
//! row-major `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AutodiffError, Graph, Result, Tensor, Var};

const MAGIC: &[u8; 4] = b"ICLC";
const VERSION: u16 = 1;

/// Parameters keyed by name; iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Place every parameter on `graph` as a trainable leaf.
    pub fn attach(&self, graph: &mut Graph) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), graph.param(t.clone())))
            .collect()
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| AutodiffError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AutodiffError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |reason: String| AutodiffError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).ok_or_else(|| bad("truncated header".into()))? != MAGIC {
        return Err(bad("missing ICLC magic".into()));
    }
    let version = r.u16().ok_or_else(|| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let truncated = || bad(format!("truncated at parameter {i}"));
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad(format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(store)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
