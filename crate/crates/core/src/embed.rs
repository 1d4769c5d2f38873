//! Pretrained word-vector tables and document vectors.
//!
//! A document vector is the mean of the in-vocabulary word vectors, mapped to
//! `doc_dim` components by a fixed seeded Gaussian projection. Equal word and
//! document sizes use the identity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub name: String,
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Array2<T>,
    /// Lines rejected during load.
    pub skipped: usize,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Builds a table from `(token, vector)` pairs; later duplicates win.
    pub fn from_entries<I>(name: impl Into<String>, dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<T>)>,
    {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be positive".into()));
        }
        let mut index = HashMap::new();
        let mut flat = Vec::new();
        for (token, v) in entries {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("non-finite vector for {token:?}")));
            }
            match index.get(&token) {
                Some(&row) => flat[row * dim..(row + 1) * dim].copy_from_slice(&v),
                None => {
                    index.insert(token, index.len());
                    flat.extend_from_slice(&v);
                }
            }
        }
        let vectors = Array2::from_shape_vec((index.len(), dim), flat)
            .expect("row-major buffer matches shape");
        Ok(Self {
            name: name.into(),
            dim,
            index,
            vectors,
            skipped: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<ArrayView1<'_, T>> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    /// Tokens in insertion order.
    pub fn tokens(&self) -> Vec<&str> {
        let mut out = vec![""; self.index.len()];
        for (t, &i) in &self.index {
            out[i] = t.as_str();
        }
        out
    }

    /// Reads `token v1 .. vd` lines. The dimension comes from the first line;
    /// lines with a different component count are skipped with a warning.
    pub fn load(path: &Path, name: impl Into<String>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut entries = Vec::new();
        let mut skipped = 0;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = n as u64 + 1;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| {
                    p.parse::<T>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                        path: path.to_owned(),
                        line: lineno,
                        message: format!("non-numeric component {p:?}"),
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                warn!(
                    "{}:{lineno}: skipping {token:?} with {} components (expected {d})",
                    path.display(),
                    values.len()
                );
                skipped += 1;
                continue;
            }
            entries.push((token.to_owned(), values));
        }
        let Some(dim) = dim.filter(|&d| d > 0) else {
            return Err(Error::EmptyDataset {
                path: path.to_owned(),
            });
        };
        let mut table = Self::from_entries(name, dim, entries)?;
        table.skipped = skipped;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            for (token, row) in self.tokens().iter().zip(self.vectors.rows()) {
                write!(w, "{token}")?;
                for v in row {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocVectorConfig {
    pub word_dim: usize,
    pub doc_dim: usize,
    pub projection_seed: u64,
}

impl DocVectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.doc_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "word_dim and doc_dim must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentVector<T> {
    pub values: Array1<T>,
    /// Share of tokens missing from the table; 1.0 for an empty document.
    pub oov_fraction: f64,
}

/// `doc_dim x word_dim` linear map applied after mean pooling.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection<T> {
    Identity(usize),
    Matrix(Array2<T>),
}

impl<T: Scalar> Projection<T> {
    /// Standard-normal entries scaled by `1/sqrt(word_dim)`, row-major from
    /// the seeded stream; identity when the sizes agree.
    pub fn new(cfg: &DocVectorConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.doc_dim == cfg.word_dim {
            return Ok(Projection::Identity(cfg.word_dim));
        }
        let mut rng = seed::rng(cfg.projection_seed);
        let scale = 1.0 / (cfg.word_dim as f64).sqrt();
        let m = Array2::from_shape_simple_fn((cfg.doc_dim, cfg.word_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * scale)
        });
        Ok(Projection::Matrix(m))
    }

    pub fn apply(&self, pooled: &Array1<T>) -> Array1<T> {
        match self {
            Projection::Identity(_) => pooled.clone(),
            Projection::Matrix(m) => m.dot(pooled),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projection::Identity(d) => *d,
            Projection::Matrix(m) => m.nrows(),
        }
    }
}

/// A table bound to a document-vector configuration with its projection
/// materialized once.
#[derive(Debug, Clone)]
pub struct DocEmbedder<'a, T> {
    table: &'a EmbeddingTable<T>,
    projection: Projection<T>,
}

impl<'a, T: Scalar> DocEmbedder<'a, T> {
    pub fn new(table: &'a EmbeddingTable<T>, cfg: &DocVectorConfig) -> Result<Self> {
        if cfg.word_dim != table.dim() {
            return Err(Error::DimensionMismatch {
                expected: table.dim(),
                got: cfg.word_dim,
            });
        }
        Ok(Self {
            table,
            projection: Projection::new(cfg)?,
        })
    }

    pub fn doc_dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> DocumentVector<T> {
        let mut sum = Array1::<T>::zeros(self.table.dim());
        let mut found = 0usize;
        for t in tokens {
            if let Some(v) = self.table.get(t.as_ref()) {
                sum += &v;
                found += 1;
            }
        }
        if found == 0 {
            return DocumentVector {
                values: Array1::zeros(self.doc_dim()),
                oov_fraction: 1.0,
            };
        }
        sum /= T::from_usize(found).expect("token count fits scalar");
        DocumentVector {
            values: self.projection.apply(&sum),
            oov_fraction: (tokens.len() - found) as f64 / tokens.len() as f64,
        }
    }
}

/// One-off convenience over [`DocEmbedder`]; rebuilds the projection per call.
pub fn embed_document<T: Scalar, S: AsRef<str>>(
    tokens: &[S],
    table: &EmbeddingTable<T>,
    cfg: &DocVectorConfig,
) -> Result<DocumentVector<T>> {
    Ok(DocEmbedder::new(table, cfg)?.embed(tokens))
}
