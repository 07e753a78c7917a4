//! Delimited-text helpers shared by the data, dependency and evaluation
//! modules. Comma or tab is autodetected from the header line; all floats
//! are written with Rust's shortest round-trip formatting so artifacts are
//! bit-stable across runs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A parsed delimited table: header cells plus one `Vec<String>` per row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub delimiter: char,
}

pub fn detect_delimiter(header_line: &str) -> char {
    if header_line.contains('\t') {
        '\t'
    } else {
        ','
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: "empty file, expected a header row".into(),
    })?;
    let header_line = header_line.map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let delimiter = detect_delimiter(&header_line);
    let header: Vec<String> = header_line
        .split(delimiter)
        .map(|c| c.trim().to_string())
        .collect();

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line
            .split(delimiter)
            .map(|c| c.trim().to_string())
            .collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                column: cells.len(),
                message: format!(
                    "expected {} cells, found {}",
                    header.len(),
                    cells.len()
                ),
            });
        }
        rows.push(cells);
    }
    Ok(Table {
        header,
        rows,
        delimiter,
    })
}

pub fn parse_cell_f64(cell: &str, path: &Path, line: usize, column: usize) -> Result<f64> {
    cell.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: format!("malformed number {cell:?}"),
    })
}

/// Writer that surfaces the destination path in any i/o error.
pub struct FileWriter {
    inner: BufWriter<File>,
    path: std::path::PathBuf,
}

impl FileWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
            }
        }
        let inner = BufWriter::new(File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?);
        Ok(FileWriter {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.inner, "{line}").map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Shortest round-trip decimal form of `v` (stable across runs).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Stable 64-bit FNV-1a hash; used for per-pair/per-sample seed derivation
/// and config fingerprints. Never use `DefaultHasher` for these: its keys
/// are randomized per process.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Mix several u64 values into one seed (FNV over the little-endian bytes).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a64(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delimiter_autodetect() {
        assert_eq!(detect_delimiter("a,b,c"), ',');
        assert_eq!(detect_delimiter("a\tb\tc"), '\t');
    }

    #[test]
    fn fnv_is_stable() {
        // Frozen reference value: FNV-1a of "abc".
        assert_eq!(fnv1a64(b"abc"), 0xe71fa2190541574b);
        assert_eq!(mix_seed(&[1, 2]), mix_seed(&[1, 2]));
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
    }

    #[test]
    fn fmt_roundtrips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(v, fmt_f64(v).parse::<f64>().unwrap());
        }
    }
}
