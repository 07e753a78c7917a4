//! Metadata-to-embedding providers. The builtin hash encoder keeps the
//! pipeline self-contained; precomputed files carry embeddings produced
//! offline by a text encoder; an external command can be wired in for live
//! encoding. All providers are deterministic for fixed input.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::MetadataRecord;
use crate::error::{Error, Result};
use crate::io::{self, FileWriter};

/// Embedding source.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    /// Hashed token-bag with seeded signed random projections,
    /// unit-normalized. Deterministic and dependency-free.
    Builtin { dim: usize, seed: u64 },
    /// Exact per-sample lookup from a precomputed file.
    Precomputed {
        dim: usize,
        vectors: BTreeMap<String, Vec<f64>>,
    },
    /// One-shot external encoder: text lines in, one vector line out per
    /// input line. Disabled unless explicitly configured.
    External { command: String, dim: usize },
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Builtin { dim, .. } => *dim,
            EmbeddingProvider::Precomputed { dim, .. } => *dim,
            EmbeddingProvider::External { dim, .. } => *dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingProvider::Builtin { .. } => "builtin",
            EmbeddingProvider::Precomputed { .. } => "precomputed",
            EmbeddingProvider::External { .. } => "external",
        }
    }

    /// Embed one metadata record. Builtin and external providers encode the
    /// canonical text form; the precomputed provider looks up the sample id.
    pub fn embed_record(&self, record: &MetadataRecord) -> Result<Array1<f64>> {
        match self {
            EmbeddingProvider::Builtin { dim, seed } => {
                Ok(builtin_embed(&metadata_to_text(record), *dim, *seed))
            }
            EmbeddingProvider::Precomputed { dim, vectors } => {
                let v = vectors.get(&record.sample_id).ok_or_else(|| {
                    Error::validation(format!(
                        "no precomputed embedding for sample {:?}",
                        record.sample_id
                    ))
                })?;
                debug_assert_eq!(v.len(), *dim);
                Ok(Array1::from_vec(v.clone()))
            }
            EmbeddingProvider::External { command, dim } => {
                let out = external_embed(command, &[metadata_to_text(record)], *dim)?;
                Ok(Array1::from_vec(out.into_iter().next().expect("one line")))
            }
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        match self {
            EmbeddingProvider::Builtin { dim, seed } => Ok(builtin_embed(text, *dim, *seed)),
            EmbeddingProvider::Precomputed { .. } => Err(Error::config(
                "precomputed provider embeds by sample id, not free text",
            )),
            EmbeddingProvider::External { command, dim } => {
                let out = external_embed(command, &[text.to_string()], *dim)?;
                Ok(Array1::from_vec(out.into_iter().next().expect("one line")))
            }
        }
    }
}

/// Canonical text form: `key: value; key: value` with keys already
/// normalized and sorted by `MetadataRecord::new`.
pub fn metadata_to_text(record: &MetadataRecord) -> String {
    record
        .attributes
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Token-bag embedding: each token contributes a seeded Gaussian direction;
/// the sum is unit-normalized. Empty text maps to the zero vector.
pub fn builtin_embed(text: &str, dim: usize, seed: u64) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(dim);
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let token = token.to_lowercase();
        let token_seed = io::mix_seed(&[seed, io::fnv1a64(token.as_bytes())]);
        let mut rng = ChaCha8Rng::seed_from_u64(token_seed);
        for slot in acc.iter_mut() {
            *slot += crate::data::standard_normal(&mut rng);
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.mapv_into(|v| v / norm)
    } else {
        acc
    }
}

/// Load a precomputed embedding file: header `sample_id,dim=<d>`, one row
/// `sample_id,v1,...,vd` per sample.
pub fn load_precomputed(path: &Path) -> Result<EmbeddingProvider> {
    // Data rows carry dim+1 cells while the header has two, so this format
    // is parsed raw rather than through the fixed-width table reader.
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header_line = text.lines().next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: "empty file, expected `sample_id,dim=<d>` header".into(),
    })?;
    let delimiter = io::detect_delimiter(header_line);
    let header: Vec<&str> = header_line.split(delimiter).map(str::trim).collect();
    if header.len() != 2 || header[0] != "sample_id" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: "embedding header must be `sample_id,dim=<d>`".into(),
        });
    }
    let dim: usize = header[1]
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 2,
            message: format!("bad dim cell {:?}", header[1]),
        })?;
    let mut vectors = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                column: cells.len(),
                message: format!("expected {} cells, found {}", dim + 1, cells.len()),
            });
        }
        let id = cells[0].to_string();
        let mut v = Vec::with_capacity(dim);
        for (c, cell) in cells[1..].iter().enumerate() {
            v.push(io::parse_cell_f64(cell, path, idx + 1, c + 2)?);
        }
        if vectors.insert(id.clone(), v).is_some() {
            return Err(Error::validation(format!(
                "duplicate sample id {id:?} in embedding file"
            )));
        }
    }
    Ok(EmbeddingProvider::Precomputed { dim, vectors })
}

/// Write embeddings in the precomputed-file format.
pub fn write_precomputed(
    path: &Path,
    rows: &[(String, Vec<f64>)],
    dim: usize,
) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.write_line(&format!("sample_id,dim={dim}"))?;
    for (id, v) in rows {
        let cells: Vec<String> = v.iter().map(|x| io::fmt_f64(*x)).collect();
        w.write_line(&format!("{id},{}", cells.join(",")))?;
    }
    w.finish()
}

fn external_embed(command: &str, texts: &[String], dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut child = Command::new(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|source| Error::Io {
            path: command.into(),
            source,
        })?;
    {
        let stdin = child.stdin.as_mut().expect("piped stdin");
        for text in texts {
            writeln!(stdin, "{text}").map_err(|source| Error::Io {
                path: command.into(),
                source,
            })?;
        }
    }
    let output = child.wait_with_output().map_err(|source| Error::Io {
        path: command.into(),
        source,
    })?;
    if !output.status.success() {
        return Err(Error::validation(format!(
            "embedding command {command:?} exited with {:?}",
            output.status.code()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let mut vectors = Vec::new();
    for (i, line) in stdout.lines().enumerate() {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::validation(format!("embedding output line {}: {e}", i + 1)))?;
        if v.len() != dim {
            return Err(Error::validation(format!(
                "embedding output line {} has width {}, expected {dim}",
                i + 1,
                v.len()
            )));
        }
        vectors.push(v);
    }
    if vectors.len() != texts.len() {
        return Err(Error::validation(format!(
            "embedding command returned {} vectors for {} inputs",
            vectors.len(),
            texts.len()
        )));
    }
    Ok(vectors)
}
