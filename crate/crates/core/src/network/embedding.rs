//! Class text-embedding tables in the `PPTE` binary container.
//!
//! Layout, all integers little-endian: magic `PPTE`, `u32` version (1),
//! `u32` rows, `u32` dim, `rows * dim` `f32` values row-major, one
//! `u16`-length-prefixed UTF-8 name per row, then a `u32`-length-prefixed
//! UTF-8 JSON metadata string.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassTaxonomy, NUM_CLASSES, SUPERCLASS_NAMES};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PPTE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub class_names: Vec<String>,
    pub dim: usize,
    /// `rows * dim`, row-major.
    pub vectors: Vec<f32>,
    /// Provenance metadata (JSON text).
    pub source: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Embedding(format!(
                "payload length mismatch: truncated {what}"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Embedding(format!("{what} is not valid UTF-8")))
    }
}

impl EmbeddingTable {
    pub fn new(
        class_names: Vec<String>,
        dim: usize,
        vectors: Vec<f32>,
        source: String,
    ) -> Result<Self> {
        if vectors.len() != class_names.len() * dim {
            return Err(Error::Embedding(format!(
                "payload length mismatch: {} values for {} rows of width {dim}",
                vectors.len(),
                class_names.len()
            )));
        }
        Ok(Self {
            class_names,
            dim,
            vectors,
            source,
        })
    }

    pub fn rows(&self) -> usize {
        self.class_names.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != EMBEDDING_MAGIC {
            return Err(Error::Embedding("bad magic (expected PPTE)".into()));
        }
        let version = r.u32("version")?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Embedding(format!("unsupported version {version}")));
        }
        let rows = r.u32("row count")? as usize;
        let dim = r.u32("dim")? as usize;
        let payload = r.take(rows * dim * 4, "vector payload")?;
        let vectors = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut class_names = Vec::with_capacity(rows);
        for i in 0..rows {
            let len = r.u16("name length")? as usize;
            class_names.push(r.utf8(len, &format!("name {i}"))?);
        }
        let meta_len = r.u32("metadata length")? as usize;
        let source = r.utf8(meta_len, "metadata")?;
        if r.pos != bytes.len() {
            return Err(Error::Embedding(format!(
                "payload length mismatch: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Self::new(class_names, dim, vectors, source)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.vectors.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out.extend_from_slice(&(self.source.len() as u32).to_le_bytes());
        out.extend_from_slice(self.source.as_bytes());
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Itemized list of problems against `taxonomy`; empty when the table is usable.
    pub fn problems(&self, taxonomy: &ClassTaxonomy) -> Vec<String> {
        let mut out = Vec::new();
        if self.rows() != NUM_CLASSES {
            out.push(format!("row count {} != {NUM_CLASSES}", self.rows()));
        }
        let expected = taxonomy.superclass_names();
        let same_set = {
            let mut a: Vec<String> = self.class_names.iter().map(|s| s.to_lowercase()).collect();
            let mut b: Vec<String> = expected.iter().map(|s| s.to_lowercase()).collect();
            a.sort();
            b.sort();
            a == b
        };
        let in_order = self
            .class_names
            .iter()
            .zip(expected)
            .all(|(a, b)| a.eq_ignore_ascii_case(b));
        if self.rows() == NUM_CLASSES && !in_order {
            if same_set {
                out.push("row order mismatch".into());
            } else {
                out.push(format!(
                    "class names {:?} do not match taxonomy {:?}",
                    self.class_names, expected
                ));
            }
        }
        if self.dim == 0 {
            out.push("dim is zero".into());
        }
        for i in 0..self.rows() {
            let row = self.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                out.push(format!("row {i} has non-finite entries"));
            } else if row.iter().all(|&v| v == 0.0) {
                out.push(format!("row {i} has zero norm"));
            }
        }
        out
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let problems = self.problems(taxonomy);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Embedding(problems.join("; ")))
        }
    }

    /// Rows L2-normalized, as `f64`.
    pub fn normalized_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.vectors.len());
        for i in 0..self.rows() {
            let row = self.row(i);
            let norm = row
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            out.extend(row.iter().map(|&v| f64::from(v) / norm));
        }
        out
    }

    /// Canonical superclass rows set to the first `NUM_CLASSES` unit vectors.
    pub fn orthonormal(dim: usize) -> Result<Self> {
        if dim < NUM_CLASSES {
            return Err(Error::Embedding(format!(
                "orthonormal table needs dim >= {NUM_CLASSES}"
            )));
        }
        let mut vectors = vec![0.0f32; NUM_CLASSES * dim];
        for i in 0..NUM_CLASSES {
            vectors[i * dim + i] = 1.0;
        }
        Self::new(
            SUPERCLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            dim,
            vectors,
            r#"{"encoder":"none","template":"none","kind":"synthetic-orthonormal"}"#.into(),
        )
    }

    /// Random unit-norm rows from a fixed seed.
    pub fn random_unit(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(NUM_CLASSES * dim);
        for _ in 0..NUM_CLASSES {
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            vectors.extend(row.iter().map(|v| (v / norm) as f32));
        }
        Self::new(
            SUPERCLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            dim,
            vectors,
            format!(
                r#"{{"encoder":"none","template":"none","kind":"synthetic-random","seed":{seed}}}"#
            ),
        )
    }
}
