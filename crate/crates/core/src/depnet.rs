//! Dependency structure inference: lagged nested-model F-tests for directed
//! edges, quantile-binned mutual information with permutation significance
//! for symmetric edges, and their union used by the attention mask engine.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::io::{self, FileWriter};

/// Binary dependency matrices. `c_dir[i][j] = 1` means feature j influences
/// feature i; `c_mi` is symmetric; `dep` is their elementwise OR.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix {
    pub c_dir: Array2<u8>,
    pub c_mi: Array2<u8>,
    pub dep: Array2<u8>,
}

impl DependencyMatrix {
    pub fn new(c_dir: Array2<u8>, c_mi: Array2<u8>) -> Result<Self> {
        if c_dir.nrows() != c_dir.ncols() || c_dir.raw_dim() != c_mi.raw_dim() {
            return Err(Error::shape(format!(
                "c_dir {:?} and c_mi {:?} must be square and equal",
                c_dir.shape(),
                c_mi.shape()
            )));
        }
        for ((i, j), &v) in c_mi.indexed_iter() {
            if v > 1 || c_dir[(i, j)] > 1 {
                return Err(Error::validation("dependency matrices must be 0/1"));
            }
            if v != c_mi[(j, i)] {
                return Err(Error::validation(format!(
                    "c_mi not symmetric at ({i}, {j})"
                )));
            }
            if i == j && (v != 0 || c_dir[(i, j)] != 0) {
                return Err(Error::validation("dependency diagonals must be zero"));
            }
        }
        let mut dep = c_dir.clone();
        dep.zip_mut_with(&c_mi, |a, &b| *a |= b);
        Ok(DependencyMatrix { c_dir, c_mi, dep })
    }

    pub fn dim(&self) -> usize {
        self.dep.nrows()
    }
}

/// Combine directed and symmetric structure into one dependency matrix.
pub fn combine_dependencies(c_dir: &Array2<u8>, c_mi: &Array2<u8>) -> Result<DependencyMatrix> {
    DependencyMatrix::new(c_dir.clone(), c_mi.clone())
}

/// Nested-model F-test result for "source j helps predict target i".
#[derive(Debug, Clone)]
pub struct FTestResult {
    pub source: usize,
    pub target: usize,
    pub f_stat: f64,
    pub p_value: f64,
    /// (numerator, denominator) degrees of freedom.
    pub dof: (usize, usize),
    pub degenerate: bool,
}

/// Mutual-information permutation test result for an unordered pair.
#[derive(Debug, Clone)]
pub struct MIResult {
    pub i: usize,
    pub j: usize,
    /// Plug-in MI in nats over the quantile-binned contingency table.
    pub mi: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub bins: usize,
    pub degenerate: bool,
}

/// Ordinary least squares on a small design matrix. Returns the residual
/// sum of squares, or `None` when the normal equations are singular.
fn ols_rss(design: &[Vec<f64>], y: &[f64]) -> Option<f64> {
    let p = design.len();
    let n = y.len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for a in 0..p {
        for b in a..p {
            let s: f64 = (0..n).map(|t| design[a][t] * design[b][t]).sum();
            xtx[a][b] = s;
            xtx[b][a] = s;
        }
        xty[a] = (0..n).map(|t| design[a][t] * y[t]).sum();
    }
    let beta = solve_linear(&mut xtx, &mut xty)?;
    let mut rss = 0.0;
    for t in 0..n {
        let pred: f64 = (0..p).map(|a| beta[a] * design[a][t]).sum();
        let r = y[t] - pred;
        rss += r * r;
    }
    Some(rss)
}

/// Gaussian elimination with partial pivoting; `None` on singularity.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Test whether lagged feature j improves prediction of feature i beyond
/// feature i's own lag: restricted `y_i[t] ~ 1 + x_i[t-lag]` against full
/// `y_i[t] ~ 1 + x_i[t-lag] + x_j[t-lag]`, compared with an F(1, n-lag-3)
/// upper tail.
pub fn directed_dependency_test(
    y: &Array2<f64>,
    target: usize,
    source: usize,
    lag: usize,
) -> Result<FTestResult> {
    if target == source {
        return Err(Error::config("self-dependency test is excluded"));
    }
    let n = y.nrows();
    if lag == 0 {
        return Err(Error::config("lag must be >= 1"));
    }
    if n <= lag + 3 {
        return Err(Error::validation(format!(
            "need n - lag - 3 > 0 samples, got n={n}, lag={lag}"
        )));
    }
    let rows = n - lag;
    let dof_den = n - lag - 3;
    let resp: Vec<f64> = (lag..n).map(|t| y[(t, target)]).collect();
    let own: Vec<f64> = (0..rows).map(|t| y[(t, target)]).collect();
    let other: Vec<f64> = (0..rows).map(|t| y[(t, source)]).collect();

    let degenerate_result = |_: &str| FTestResult {
        source,
        target,
        f_stat: 0.0,
        p_value: 1.0,
        dof: (1, dof_den),
        degenerate: true,
    };

    if variance(&own) == 0.0 || variance(&other) == 0.0 || variance(&resp) == 0.0 {
        return Ok(degenerate_result("zero-variance regressor"));
    }

    let ones = vec![1.0; rows];
    let restricted = ols_rss(&[ones.clone(), own.clone()], &resp);
    let full = ols_rss(&[ones, own, other], &resp);
    let (rss_r, rss_f) = match (restricted, full) {
        (Some(r), Some(f)) => (r, f),
        _ => return Ok(degenerate_result("singular design")),
    };

    let num = (rss_r - rss_f).max(0.0);
    if rss_f <= f64::EPSILON * rss_r.max(1.0) {
        // Full model fits exactly; treat as maximal evidence unless the
        // restricted model also fits exactly.
        let p = if num <= 0.0 { 1.0 } else { 1e-300 };
        return Ok(FTestResult {
            source,
            target,
            f_stat: f64::MAX,
            p_value: p,
            dof: (1, dof_den),
            degenerate: false,
        });
    }
    let f_stat = num / (rss_f / dof_den as f64);
    let dist = FisherSnedecor::new(1.0, dof_den as f64)
        .map_err(|e| Error::validation(format!("f-distribution: {e}")))?;
    let p_value = (1.0 - dist.cdf(f_stat)).clamp(1e-300, 1.0);
    Ok(FTestResult {
        source,
        target,
        f_stat,
        p_value,
        dof: (1, dof_den),
        degenerate: false,
    })
}

/// C_dir[i][j] = 1 iff the directed test of j -> i is significant at
/// `alpha`. Degenerate pairs contribute 0. Pairs are evaluated in parallel;
/// the result is independent of scheduling.
pub fn build_directed_matrix(y: &Array2<f64>, alpha: f64, lag: usize) -> Result<Array2<u8>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} outside (0, 1)")));
    }
    let d = y.ncols();
    let rows: Vec<Vec<u8>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0u8; d];
            for j in 0..d {
                if i == j {
                    continue;
                }
                if let Ok(res) = directed_dependency_test(y, i, j, lag) {
                    if !res.degenerate && res.p_value < alpha {
                        row[j] = 1;
                    }
                }
            }
            row
        })
        .collect();
    let mut c_dir = Array2::<u8>::zeros((d, d));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            c_dir[(i, j)] = v;
        }
    }
    Ok(c_dir)
}

/// Quantile-bin a vector into `bins` groups of near-equal counts. Ties are
/// broken by index, so the assignment is deterministic.
fn quantile_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut assignment = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = rank * bins / n;
    }
    assignment
}

fn is_constant(x: &[f64]) -> bool {
    x.windows(2).all(|w| w[0] == w[1])
}

fn mi_from_bins(bx: &[usize], by: &[usize], bins: usize) -> f64 {
    let n = bx.len();
    let mut joint = vec![0.0f64; bins * bins];
    let mut px = vec![0.0f64; bins];
    let mut py = vec![0.0f64; bins];
    for t in 0..n {
        joint[bx[t] * bins + by[t]] += 1.0;
        px[bx[t]] += 1.0;
        py[by[t]] += 1.0;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let j = joint[a * bins + b];
            if j > 0.0 {
                mi += (j / nf) * ((j * nf) / (px[a] * py[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Plug-in mutual information (nats) over quantile-binned vectors.
/// Constant input yields 0.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if bins < 2 || x.len() < bins {
        return Err(Error::config(format!(
            "need bins >= 2 and len >= bins, got len={} bins={bins}",
            x.len()
        )));
    }
    if is_constant(x) || is_constant(y) {
        return Ok(0.0);
    }
    let bx = quantile_bins(x, bins);
    let by = quantile_bins(y, bins);
    Ok(mi_from_bins(&bx, &by, bins))
}

/// Permutation test for MI: p = (1 + #{permuted MI >= observed}) / (1 +
/// n_perm), shuffling y only. Deterministic given the seed.
pub fn mi_permutation_test(
    x: &[f64],
    y: &[f64],
    bins: usize,
    n_perm: usize,
    seed: u64,
) -> Result<MIResult> {
    mi_permutation_test_indexed(x, y, 0, 1, bins, n_perm, seed)
}

fn mi_permutation_test_indexed(
    x: &[f64],
    y: &[f64],
    i: usize,
    j: usize,
    bins: usize,
    n_perm: usize,
    seed: u64,
) -> Result<MIResult> {
    if n_perm < 100 {
        return Err(Error::config(format!("n_perm {n_perm} must be >= 100")));
    }
    if is_constant(x) || is_constant(y) {
        return Ok(MIResult {
            i,
            j,
            mi: 0.0,
            p_value: 1.0,
            n_permutations: n_perm,
            bins,
            degenerate: true,
        });
    }
    let observed = mutual_information(x, y, bins)?;
    let bx = quantile_bins(x, bins);
    let mut by = quantile_bins(y, bins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        by.shuffle(&mut rng);
        if mi_from_bins(&bx, &by, bins) >= observed {
            exceed += 1;
        }
    }
    Ok(MIResult {
        i,
        j,
        mi: observed,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        n_permutations: n_perm,
        bins,
        degenerate: false,
    })
}

/// Edge rule for the symmetric MI matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MiMode {
    /// Permutation-test p-value below alpha.
    PermutationAlpha(f64),
    /// Raw MI above an absolute threshold (nats).
    Threshold(f64),
}

/// Symmetric zero-diagonal MI matrix, computed once per unordered pair with
/// a per-pair derived seed so any parallel schedule yields identical bits.
pub fn build_mi_matrix(
    y: &Array2<f64>,
    mode: MiMode,
    bins: usize,
    n_perm: usize,
    seed: u64,
) -> Result<Array2<u8>> {
    match mode {
        MiMode::PermutationAlpha(a) if !(a > 0.0 && a < 1.0) => {
            return Err(Error::config(format!("alpha {a} outside (0, 1)")));
        }
        MiMode::Threshold(t) if t < 0.0 => {
            return Err(Error::config(format!("MI threshold {t} must be >= 0")));
        }
        _ => {}
    }
    let d = y.ncols();
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
        .collect();
    let cols: Vec<Vec<f64>> = (0..d).map(|c| y.column(c).to_vec()).collect();
    let flags: Vec<((usize, usize), u8)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let edge = match mode {
                MiMode::PermutationAlpha(alpha) => {
                    let pair_seed = io::mix_seed(&[seed, i as u64, j as u64]);
                    match mi_permutation_test_indexed(
                        &cols[i], &cols[j], i, j, bins, n_perm, pair_seed,
                    ) {
                        Ok(res) => u8::from(!res.degenerate && res.p_value < alpha),
                        Err(_) => 0,
                    }
                }
                MiMode::Threshold(thr) => match mutual_information(&cols[i], &cols[j], bins) {
                    Ok(mi) => u8::from(mi > thr),
                    Err(_) => 0,
                },
            };
            ((i, j), edge)
        })
        .collect();
    let mut c_mi = Array2::<u8>::zeros((d, d));
    for ((i, j), v) in flags {
        c_mi[(i, j)] = v;
        c_mi[(j, i)] = v;
    }
    Ok(c_mi)
}

/// Indices of the k largest-variance columns of `y`, descending variance,
/// ties by ascending index.
pub fn top_variable_features(y: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > y.ncols() {
        return Err(Error::config(format!(
            "k must be in 1..={}, got {k}",
            y.ncols()
        )));
    }
    Ok(crate::data::top_variance_indices(y, k))
}

/// A scored directed edge for network export.
#[derive(Debug, Clone)]
pub struct ScoredEdge {
    pub source: String,
    pub target: String,
    pub statistic: f64,
    pub p_value: f64,
}

/// Write a TSV edge list `source, target, statistic, p_value, neg_log10_p`
/// sorted by neg_log10_p descending (ties by source then target).
pub fn export_network(edges: &[ScoredEdge], path: &Path) -> Result<()> {
    for e in edges {
        if !(e.p_value > 0.0 && e.p_value <= 1.0) {
            return Err(Error::validation(format!(
                "p-value {} for edge {} -> {} outside (0, 1]",
                e.p_value, e.source, e.target
            )));
        }
    }
    let mut sorted: Vec<&ScoredEdge> = edges.iter().collect();
    sorted.sort_by(|a, b| {
        let la = -a.p_value.log10();
        let lb = -b.p_value.log10();
        lb.partial_cmp(&la)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    let mut w = FileWriter::create(path)?;
    w.write_line("source\ttarget\tstatistic\tp_value\tneg_log10_p")?;
    for e in sorted {
        w.write_line(&format!(
            "{}\t{}\t{}\t{}\t{}",
            e.source,
            e.target,
            io::fmt_f64(e.statistic),
            io::fmt_f64(e.p_value),
            io::fmt_f64(-e.p_value.log10())
        ))?;
    }
    w.finish()
}

/// Export a labeled 0/1 matrix with a feature-ID header row and row labels.
pub fn write_binary_matrix(path: &Path, m: &Array2<u8>, feature_ids: &[String]) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    w.write_line(&format!("feature_id,{}", feature_ids.join(",")))?;
    for (r, row) in m.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        w.write_line(&format!("{},{}", feature_ids[r], cells.join(",")))?;
    }
    w.finish()
}

/// Benjamini-Hochberg adjusted p-values (optional multiple-testing control).
pub fn benjamini_hochberg(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        p_values[a]
            .partial_cmp(&p_values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for (rank_from_end, &idx) in order.iter().enumerate().rev() {
        let rank = rank_from_end + 1;
        let candidate = (p_values[idx] * m as f64 / rank as f64).min(1.0);
        running_min = running_min.min(candidate);
        adjusted[idx] = running_min;
    }
    adjusted
}
