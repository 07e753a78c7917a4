//! Imputation metrics over held-out masked entries (Pearson correlation,
//! cosine similarity, RMSE, MAE), per-feature correlation exports, and the
//! KNN / mean baselines.

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::data::EvalMask;
use crate::error::{Error, Result};
use crate::io::{self, FileWriter};

/// Pearson correlation; `None` when either input is constant or too short.
pub fn pcc(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pcc length mismatch");
    let n = a.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb))
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rmse length mismatch");
    assert!(!a.is_empty());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mae length mismatch");
    assert!(!a.is_empty());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Metrics for one evaluation fold, computed strictly on masked positions.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub pcc: Option<f64>,
    pub cosine: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
    pub masked_count: usize,
    /// Per-feature Pearson correlation over that feature's masked entries;
    /// `None` for features with fewer than two masked entries.
    pub per_feature_pcc: Vec<Option<f64>>,
}

/// Compare imputed values to the truth on the masked entries only.
pub fn evaluate(
    imputed: &Array2<f64>,
    truth: &Array2<f64>,
    mask: &EvalMask,
) -> Result<MetricsReport> {
    if imputed.raw_dim() != truth.raw_dim() || imputed.raw_dim() != mask.mask.raw_dim() {
        return Err(Error::shape(format!(
            "imputed {:?}, truth {:?} and mask {:?} must agree",
            imputed.shape(),
            truth.shape(),
            mask.mask.shape()
        )));
    }
    let mut pred = Vec::new();
    let mut real = Vec::new();
    let d = truth.ncols();
    let mut per_feature: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); d];
    for ((r, c), &m) in mask.mask.indexed_iter() {
        if m == 1 {
            pred.push(imputed[(r, c)]);
            real.push(truth[(r, c)]);
            per_feature[c].0.push(imputed[(r, c)]);
            per_feature[c].1.push(truth[(r, c)]);
        }
    }
    if pred.is_empty() {
        return Err(Error::validation("evaluation mask hides no entries"));
    }
    let per_feature_pcc = per_feature
        .iter()
        .map(|(p, t)| if p.len() < 2 { None } else { pcc(p, t) })
        .collect();
    Ok(MetricsReport {
        pcc: pcc(&pred, &real),
        cosine: cosine(&pred, &real),
        rmse: rmse(&pred, &real),
        mae: mae(&pred, &real),
        masked_count: pred.len(),
        per_feature_pcc,
    })
}

/// Mean and standard deviation of one metric across folds (ignoring
/// missing fold values).
#[derive(Debug, Clone, Serialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

fn stat_of(values: &[f64]) -> MetricStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
    MetricStat {
        mean,
        std: var.sqrt(),
        folds: n,
    }
}

/// Across-fold aggregate in the `mean +/- std` convention.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub pcc: MetricStat,
    pub cosine: MetricStat,
    pub rmse: MetricStat,
    pub mae: MetricStat,
    pub per_fold_pcc: Vec<Option<f64>>,
    pub masked_total: usize,
}

pub fn aggregate(folds: &[MetricsReport]) -> Result<AggregateReport> {
    if folds.is_empty() {
        return Err(Error::validation("no folds to aggregate"));
    }
    let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
        folds.iter().filter_map(f).collect()
    };
    Ok(AggregateReport {
        pcc: stat_of(&collect(&|r| r.pcc)),
        cosine: stat_of(&collect(&|r| r.cosine)),
        rmse: stat_of(&collect(&|r| Some(r.rmse))),
        mae: stat_of(&collect(&|r| Some(r.mae))),
        per_fold_pcc: folds.iter().map(|r| r.pcc).collect(),
        masked_total: folds.iter().map(|r| r.masked_count).sum(),
    })
}

/// Fill masked entries with the per-feature observed mean (global observed
/// mean when a feature is fully masked).
pub fn mean_impute(y_masked: &Array2<f64>, mask: &Array2<u8>) -> Result<Array2<f64>> {
    if y_masked.raw_dim() != mask.raw_dim() {
        return Err(Error::shape("matrix and mask shapes differ"));
    }
    let (n, d) = (y_masked.nrows(), y_masked.ncols());
    let mut global_sum = 0.0;
    let mut global_count = 0usize;
    let mut means = vec![0.0f64; d];
    for c in 0..d {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..n {
            if mask[(r, c)] == 0 {
                sum += y_masked[(r, c)];
                count += 1;
            }
        }
        global_sum += sum;
        global_count += count;
        means[c] = if count > 0 { sum / count as f64 } else { f64::NAN };
    }
    let global_mean = if global_count > 0 {
        global_sum / global_count as f64
    } else {
        0.0
    };
    let mut out = y_masked.clone();
    for ((r, c), &m) in mask.indexed_iter() {
        if m == 1 {
            out[(r, c)] = if means[c].is_nan() { global_mean } else { means[c] };
        }
    }
    Ok(out)
}

/// KNN imputation: a masked entry becomes the mean of that feature over the
/// k nearest samples (Euclidean distance on mutually observed entries).
/// Neighbors missing that feature are skipped; if none of the k neighbors
/// observes it, the feature's observed mean is used.
pub fn knn_impute(y_masked: &Array2<f64>, mask: &Array2<u8>, k: usize) -> Result<Array2<f64>> {
    let (n, d) = (y_masked.nrows(), y_masked.ncols());
    if y_masked.raw_dim() != mask.raw_dim() {
        return Err(Error::shape("matrix and mask shapes differ"));
    }
    if k == 0 || k >= n {
        return Err(Error::config(format!("k must satisfy 1 <= k < {n}, got {k}")));
    }
    let fallback = mean_impute(y_masked, mask)?;
    let mut out = y_masked.clone();
    for r in 0..n {
        let needs: Vec<usize> = (0..d).filter(|&c| mask[(r, c)] == 1).collect();
        if needs.is_empty() {
            continue;
        }
        // Distances to all other rows over mutually observed features.
        let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for other in 0..n {
            if other == r {
                continue;
            }
            let mut ss = 0.0;
            let mut mutual = 0usize;
            for c in 0..d {
                if mask[(r, c)] == 0 && mask[(other, c)] == 0 {
                    let diff = y_masked[(r, c)] - y_masked[(other, c)];
                    ss += diff * diff;
                    mutual += 1;
                }
            }
            let dist = if mutual == 0 { f64::INFINITY } else { ss.sqrt() };
            dists.push((dist, other));
        }
        dists.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let neighbors: Vec<usize> = dists.iter().take(k).map(|&(_, i)| i).collect();
        for &c in &needs {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &nb in &neighbors {
                if mask[(nb, c)] == 0 {
                    sum += y_masked[(nb, c)];
                    count += 1;
                }
            }
            out[(r, c)] = if count > 0 {
                sum / count as f64
            } else {
                fallback[(r, c)]
            };
        }
    }
    Ok(out)
}

/// JSON report: aggregate metrics plus an arbitrary config snapshot.
pub fn write_report_json<C: Serialize>(
    path: &Path,
    aggregate: &AggregateReport,
    config: &C,
) -> Result<()> {
    #[derive(Serialize)]
    struct Payload<'a, C: Serialize> {
        metrics: &'a AggregateReport,
        config: &'a C,
    }
    let json = serde_json::to_string_pretty(&Payload {
        metrics: aggregate,
        config,
    })
    .map_err(|e| Error::validation(format!("report encode: {e}")))?;
    let mut w = FileWriter::create(path)?;
    w.write_line(&json)?;
    w.finish()
}

/// Heatmap data: one row per feature, one column per named run.
pub fn write_per_feature_pcc_tsv(
    path: &Path,
    feature_ids: &[String],
    columns: &[(String, Vec<Option<f64>>)],
) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    let names: Vec<String> = columns.iter().map(|(n, _)| n.clone()).collect();
    w.write_line(&format!("feature_id\t{}", names.join("\t")))?;
    for (i, fid) in feature_ids.iter().enumerate() {
        let cells: Vec<String> = columns
            .iter()
            .map(|(_, vals)| match vals.get(i).copied().flatten() {
                Some(v) => io::fmt_f64(v),
                None => "NA".to_string(),
            })
            .collect();
        w.write_line(&format!("{fid}\t{}", cells.join("\t")))?;
    }
    w.finish()
}

/// Boxplot data: per-fold scalar PCC per named method.
pub fn write_per_fold_pcc_tsv(
    path: &Path,
    methods: &[(String, Vec<Option<f64>>)],
) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.write_line("method\tfold\tpcc")?;
    for (name, folds) in methods {
        for (i, v) in folds.iter().enumerate() {
            let cell = match v {
                Some(v) => io::fmt_f64(*v),
                None => "NA".to_string(),
            };
            w.write_line(&format!("{name}\t{i}\t{cell}"))?;
        }
    }
    w.finish()
}
