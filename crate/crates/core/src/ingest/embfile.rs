use std::collections::HashSet;
use std::path::Path;

use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::dense::Dense;
use crate::error::{Error, Result};
use crate::graph::GraphUniverse;

pub const EMB_MAGIC: &[u8; 4] = b"TBGE";
pub const EMB_VERSION: u16 = 1;

/// Keyed rows of frozen text vectors stored in binary32.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingMatrix {
    dim: usize,
    keys: Vec<String>,
    values: Vec<f32>,
    pub source_tag: String,
}

impl TextEmbeddingMatrix {
    pub fn new(keys: Vec<String>, dim: usize, values: Vec<f32>, source_tag: impl Into<String>) -> Result<Self> {
        if values.len() != keys.len() * dim {
            return Err(Error::Shape(format!("{} values for {} rows of dim {dim}", values.len(), keys.len())));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row `{}`", keys[p / dim.max(1)])));
        }
        let mut seen = HashSet::with_capacity(keys.len());
        if let Some(k) = keys.iter().find(|k| !seen.insert(k.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate embedding key `{k}`")));
        }
        Ok(Self { dim, keys, values, source_tag: source_tag.into() })
    }

    /// Rows in universe order, keyed by the universe's node keys.
    pub fn from_dense(universe: &GraphUniverse, m: &Dense, source_tag: impl Into<String>) -> Result<Self> {
        if m.rows() != universe.num_nodes() {
            return Err(Error::Shape(format!("{} rows for {} nodes", m.rows(), universe.num_nodes())));
        }
        let values = m.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(universe.keys().to_vec(), m.cols(), values, source_tag)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `N x dim` matrix in universe node order. Every key must name a
    /// registered node and every node must have a row.
    pub fn aligned(&self, universe: &GraphUniverse) -> Result<Dense> {
        let mut out = Dense::zeros(universe.num_nodes(), self.dim);
        let mut filled = vec![false; universe.num_nodes()];
        for (i, k) in self.keys.iter().enumerate() {
            let id = universe.lookup(k).ok_or_else(|| Error::UnknownNode(k.clone()))?;
            for (dst, &v) in out.row_mut(id.0).iter_mut().zip(self.row(i)) {
                *dst = v as f64;
            }
            filled[id.0] = true;
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(Error::UnknownNode(format!("no embedding row for `{}`", universe.keys()[missing])));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(EMB_MAGIC, EMB_VERSION);
        w.u64(self.keys.len() as u64);
        w.u32(self.dim as u32);
        for k in &self.keys {
            w.str(k);
        }
        for &v in &self.values {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8], source_tag: impl Into<String>) -> Result<Self> {
        let mut r = ByteReader::open(data, EMB_MAGIC, EMB_VERSION)?;
        let count = r.u64()?;
        let dim = r.u32()? as usize;
        let count = r.check_count(count, 4)?;
        let mut keys = Vec::with_capacity(count);
        for _ in 0..count {
            keys.push(r.str()?);
        }
        let total = r.check_count((count * dim) as u64, 4)?;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            let at = r.offset();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::Format { offset: at as u64, message: format!("non-finite value {v}") });
            }
            values.push(v);
        }
        r.finish()?;
        Self::new(keys, dim, values, source_tag)
    }
}

pub fn read_embedding_matrix(path: &Path) -> Result<TextEmbeddingMatrix> {
    let data = std::fs::read(path)?;
    TextEmbeddingMatrix::from_bytes(&data, format!("file:{}", path.display()))
}

pub fn write_embedding_matrix(path: &Path, m: &TextEmbeddingMatrix) -> Result<()> {
    write_atomic(path, &m.to_bytes())
}
