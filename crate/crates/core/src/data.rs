//! Data ingestion and preparation: abundance matrices, row-wise
//! normalization, feature selection, evaluation masking and synthetic data
//! with a planted dependency structure.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depnet::DependencyMatrix;
use crate::error::{Error, Result};
use crate::io::{self, FileWriter};

/// Samples x features matrix of non-negative counts or relative abundances.
#[derive(Debug, Clone)]
pub struct AbundanceMatrix {
    pub values: Array2<f64>,
    pub sample_ids: Vec<String>,
    pub feature_ids: Vec<String>,
}

impl AbundanceMatrix {
    pub fn new(
        values: Array2<f64>,
        sample_ids: Vec<String>,
        feature_ids: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() != sample_ids.len() {
            return Err(Error::shape(format!(
                "{} rows vs {} sample ids",
                values.nrows(),
                sample_ids.len()
            )));
        }
        if values.ncols() != feature_ids.len() {
            return Err(Error::shape(format!(
                "{} columns vs {} feature ids",
                values.ncols(),
                feature_ids.len()
            )));
        }
        check_unique(&sample_ids, "sample id")?;
        check_unique(&feature_ids, "feature id")?;
        for ((r, c), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite value at row {r} col {c}"
                )));
            }
            if v < 0.0 {
                return Err(Error::validation(format!(
                    "negative value {v} at sample {:?} feature {:?}",
                    sample_ids[r], feature_ids[c]
                )));
            }
        }
        Ok(AbundanceMatrix {
            values,
            sample_ids,
            feature_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::validation(format!("duplicate {what} {id:?}")));
        }
    }
    Ok(())
}

/// Row-normalized, log10-transformed matrix. Zero entries of the source
/// stay exactly zero.
#[derive(Debug, Clone)]
pub struct NormalizedMatrix {
    pub values: Array2<f64>,
    pub sample_ids: Vec<String>,
    pub feature_ids: Vec<String>,
}

impl NormalizedMatrix {
    /// Direct constructor for matrices that are already on the normalized
    /// scale (synthetic benchmarks). Entries must be finite and >= 0.
    pub fn from_values(
        values: Array2<f64>,
        sample_ids: Vec<String>,
        feature_ids: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() != sample_ids.len() || values.ncols() != feature_ids.len() {
            return Err(Error::shape("id lists do not match matrix shape"));
        }
        check_unique(&sample_ids, "sample id")?;
        check_unique(&feature_ids, "feature id")?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(
                "normalized values must be finite and non-negative",
            ));
        }
        Ok(NormalizedMatrix {
            values,
            sample_ids,
            feature_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

/// Binary evaluation mask: 1 = hidden for evaluation, 0 = observed.
#[derive(Debug, Clone)]
pub struct EvalMask {
    pub mask: Array2<u8>,
    pub fraction: f64,
    pub seed: u64,
}

impl EvalMask {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// One sample's metadata attributes, in canonical (sorted, normalized-key)
/// order.
#[derive(Debug, Clone)]
pub struct MetadataRecord {
    pub sample_id: String,
    pub attributes: Vec<(String, String)>,
}

impl MetadataRecord {
    /// Keys are normalized (trimmed, lowercased, spaces -> underscores) and
    /// sorted so the record is independent of insertion order.
    pub fn new(sample_id: impl Into<String>, attributes: Vec<(String, String)>) -> Self {
        let mut attributes: Vec<(String, String)> = attributes
            .into_iter()
            .map(|(k, v)| (normalize_key(&k), v.trim().to_string()))
            .collect();
        attributes.sort_by(|a, b| a.0.cmp(&b.0));
        MetadataRecord {
            sample_id: sample_id.into(),
            attributes,
        }
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().to_lowercase().replace(char::is_whitespace, "_")
}

/// Specification for a synthetic abundance matrix with planted directed
/// dependencies, the oracle for dependency-recovery tests.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    /// (source, target) feature index pairs; target at pseudo-time t depends
    /// on source at t-1.
    pub planted_edges: Vec<(usize, usize)>,
    pub edge_strength: f64,
    pub sparsity: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Parse a delimited abundance file: header `sample_id,<feature...>`, one
/// row per sample. `row_major_samples` is a layout hint; only row-major
/// files are supported and passing `false` is rejected.
pub fn load_abundance(path: &Path, row_major_samples: bool) -> Result<AbundanceMatrix> {
    if !row_major_samples {
        return Err(Error::config(
            "only row-major (one sample per row) layout is supported",
        ));
    }
    let table = io::read_table(path)?;
    if table.header.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: "header must contain sample_id plus at least one feature".into(),
        });
    }
    let feature_ids: Vec<String> = table.header[1..].to_vec();
    let n = table.rows.len();
    let d = feature_ids.len();
    let mut values = Array2::<f64>::zeros((n, d));
    let mut sample_ids = Vec::with_capacity(n);
    for (r, row) in table.rows.iter().enumerate() {
        sample_ids.push(row[0].clone());
        for c in 1..row.len() {
            // +2: line 1 is the header, columns are 1-based.
            values[(r, c - 1)] = io::parse_cell_f64(&row[c], path, r + 2, c + 1)?;
        }
    }
    AbundanceMatrix::new(values, sample_ids, feature_ids)
}

/// Row-normalize to percentages and log10-transform:
/// `M'_ij = 100 * M_ij / sum_k M_ik`, `Y = log10(M' + 1)`.
pub fn normalize(m: &AbundanceMatrix) -> Result<NormalizedMatrix> {
    let mut values = Array2::<f64>::zeros(m.values.raw_dim());
    for (r, row) in m.values.axis_iter(Axis(0)).enumerate() {
        let total: f64 = row.sum();
        if total <= 0.0 {
            return Err(Error::validation(format!(
                "sample {:?} has an all-zero row and cannot be normalized",
                m.sample_ids[r]
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            // log10(0 + 1) == 0 exactly, so the zero pattern is preserved.
            values[(r, c)] = (100.0 * v / total + 1.0).log10();
        }
    }
    Ok(NormalizedMatrix {
        values,
        sample_ids: m.sample_ids.clone(),
        feature_ids: m.feature_ids.clone(),
    })
}

/// Fraction of exactly-zero entries.
pub fn compute_dropout_rate(m: &AbundanceMatrix) -> f64 {
    dropout_rate_of(&m.values)
}

pub fn dropout_rate_of(values: &Array2<f64>) -> f64 {
    let zeros = values.iter().filter(|&&v| v == 0.0).count();
    zeros as f64 / values.len() as f64
}

/// Feature selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureCriterion {
    /// Keep features present (nonzero) in at least `tau` of samples.
    PrevalenceAtLeast(f64),
    /// Keep the `k` features with the largest variance.
    TopKVariance(usize),
}

/// Reduce to the selected features, preserving sample rows and the original
/// relative feature order (ties in the variance ranking break toward the
/// smaller original index).
pub fn select_features(
    m: &AbundanceMatrix,
    criterion: FeatureCriterion,
) -> Result<AbundanceMatrix> {
    let d = m.n_features();
    let keep: Vec<usize> = match criterion {
        FeatureCriterion::PrevalenceAtLeast(tau) => {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::config(format!(
                    "prevalence threshold {tau} outside (0, 1]"
                )));
            }
            let n = m.n_samples() as f64;
            (0..d)
                .filter(|&c| {
                    let nnz = m.values.column(c).iter().filter(|&&v| v != 0.0).count();
                    nnz as f64 / n >= tau
                })
                .collect()
        }
        FeatureCriterion::TopKVariance(k) => {
            if k == 0 || k > d {
                return Err(Error::config(format!(
                    "top-k variance requires 1 <= k <= {d}, got {k}"
                )));
            }
            let mut top = top_variance_indices(&m.values, k);
            top.sort_unstable();
            top
        }
    };
    if keep.is_empty() {
        return Err(Error::validation(
            "feature selection removed every feature",
        ));
    }
    let mut values = Array2::<f64>::zeros((m.n_samples(), keep.len()));
    for (new_c, &c) in keep.iter().enumerate() {
        values.column_mut(new_c).assign(&m.values.column(c));
    }
    let feature_ids = keep.iter().map(|&c| m.feature_ids[c].clone()).collect();
    AbundanceMatrix::new(values, m.sample_ids.clone(), feature_ids)
}

pub(crate) fn column_variance(values: &Array2<f64>, c: usize) -> f64 {
    let col = values.column(c);
    let n = col.len() as f64;
    let mean = col.sum() / n;
    col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Indices of the `k` largest-variance columns, descending variance, ties by
/// ascending index.
pub(crate) fn top_variance_indices(values: &Array2<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.ncols()).collect();
    let vars: Vec<f64> = (0..values.ncols())
        .map(|c| column_variance(values, c))
        .collect();
    order.sort_by(|&a, &b| {
        vars[b]
            .partial_cmp(&vars[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Hide `round(fraction * nnz)` nonzero entries per sample. Returns the
/// masked copy and the mask; deterministic given the seed and independent of
/// sample order (each row uses its own derived stream).
pub fn apply_eval_mask(
    y: &NormalizedMatrix,
    fraction: f64,
    seed: u64,
) -> Result<(NormalizedMatrix, EvalMask)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "mask fraction {fraction} outside (0, 1)"
        )));
    }
    let mut masked = y.values.clone();
    let mut mask = Array2::<u8>::zeros(y.values.raw_dim());
    for r in 0..y.n_samples() {
        let nnz: Vec<usize> = (0..y.n_features())
            .filter(|&c| y.values[(r, c)] != 0.0)
            .collect();
        if nnz.is_empty() {
            return Err(Error::validation(format!(
                "sample {:?} has no nonzero entries to mask",
                y.sample_ids[r]
            )));
        }
        let k = (fraction * nnz.len() as f64).round() as usize;
        if k == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[seed, r as u64]));
        let mut chosen: Vec<usize> = index_sample(&mut rng, nnz.len(), k).into_iter().collect();
        chosen.sort_unstable();
        for idx in chosen {
            let c = nnz[idx];
            masked[(r, c)] = 0.0;
            mask[(r, c)] = 1;
        }
    }
    Ok((
        NormalizedMatrix {
            values: masked,
            sample_ids: y.sample_ids.clone(),
            feature_ids: y.feature_ids.clone(),
        },
        EvalMask {
            mask,
            fraction,
            seed,
        },
    ))
}

/// Generate a pseudo-time series with planted lag-1 linear dependencies.
/// Returns the abundance matrix and the planted dependency matrix
/// (`c_dir[target][source] = 1`).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(AbundanceMatrix, DependencyMatrix)> {
    if spec.n_samples == 0 || spec.n_features == 0 {
        return Err(Error::config("empty synthetic spec"));
    }
    if !(0.0..1.0).contains(&spec.sparsity) {
        return Err(Error::config(format!(
            "sparsity {} outside [0, 1)",
            spec.sparsity
        )));
    }
    let d = spec.n_features;
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); d];
    for &(src, tgt) in &spec.planted_edges {
        if src >= d || tgt >= d {
            return Err(Error::config(format!(
                "planted edge ({src}, {tgt}) outside feature range 0..{d}"
            )));
        }
        if src == tgt {
            return Err(Error::config(format!("self-loop edge on feature {src}")));
        }
        parents[tgt].push(src);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let mut latent = Array2::<f64>::zeros((n, d));
    for t in 0..n {
        for f in 0..d {
            let noise: f64 = standard_normal(&mut rng) * spec.noise_scale;
            let mut v = noise;
            if t > 0 {
                for &p in &parents[f] {
                    v += spec.edge_strength * latent[(t - 1, p)];
                }
            }
            latent[(t, f)] = v;
        }
    }

    // Shift into abundance range; the offset keeps clipping at zero rare so
    // the planted linear structure survives.
    let offset = 8.0 * spec.noise_scale.max(1e-12);
    let mut values = latent.mapv(|v| (10.0 * (v + offset)).max(0.0));

    // Inject sparsity by zeroing the globally smallest entries.
    let target_zeros = (spec.sparsity * (n * d) as f64).floor() as usize;
    let current_zeros = values.iter().filter(|&&v| v == 0.0).count();
    if target_zeros > current_zeros {
        let mut order: Vec<(usize, usize)> = values
            .indexed_iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|(idx, _)| idx)
            .collect();
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(target_zeros - current_zeros) {
            values[idx] = 0.0;
        }
    }

    let sample_ids = (0..n).map(|t| format!("t{t:05}")).collect();
    let feature_ids = (0..d).map(|f| format!("f{f:03}")).collect();
    let matrix = AbundanceMatrix::new(values, sample_ids, feature_ids)?;

    let mut c_dir = Array2::<u8>::zeros((d, d));
    for &(src, tgt) in &spec.planted_edges {
        c_dir[(tgt, src)] = 1;
    }
    let c_mi = Array2::<u8>::zeros((d, d));
    let truth = DependencyMatrix::new(c_dir, c_mi)?;
    Ok((matrix, truth))
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Write an abundance-shaped table (header `sample_id,...`).
pub fn write_matrix(
    path: &Path,
    values: &Array2<f64>,
    sample_ids: &[String],
    feature_ids: &[String],
) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.write_line(&format!("sample_id,{}", feature_ids.join(",")))?;
    for (r, row) in values.axis_iter(Axis(0)).enumerate() {
        let cells: Vec<String> = row.iter().map(|&v| io::fmt_f64(v)).collect();
        w.write_line(&format!("{},{}", sample_ids[r], cells.join(",")))?;
    }
    w.finish()
}

/// Export an evaluation mask in the abundance file shape with 0/1 cells.
pub fn write_mask(
    path: &Path,
    mask: &EvalMask,
    sample_ids: &[String],
    feature_ids: &[String],
) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.write_line(&format!("sample_id,{}", feature_ids.join(",")))?;
    for (r, row) in mask.mask.axis_iter(Axis(0)).enumerate() {
        let cells: Vec<String> = row.iter().map(|&v| v.to_string()).collect();
        w.write_line(&format!("{},{}", sample_ids[r], cells.join(",")))?;
    }
    w.finish()
}

/// Load a metadata file: header `sample_id,<attr...>`, string cells.
pub fn load_metadata(path: &Path) -> Result<Vec<MetadataRecord>> {
    let table = io::read_table(path)?;
    if table.header.is_empty() || table.header[0] != "sample_id" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: "metadata header must start with sample_id".into(),
        });
    }
    let attrs = &table.header[1..];
    let mut records = Vec::with_capacity(table.rows.len());
    let mut seen = HashSet::new();
    for row in &table.rows {
        if !seen.insert(row[0].clone()) {
            return Err(Error::validation(format!(
                "duplicate sample id {:?} in metadata",
                row[0]
            )));
        }
        let pairs: Vec<(String, String)> = attrs
            .iter()
            .cloned()
            .zip(row[1..].iter().cloned())
            .collect();
        records.push(MetadataRecord::new(row[0].clone(), pairs));
    }
    Ok(records)
}
