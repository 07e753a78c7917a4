//! Autoregressive split sampling with exponential decay and the blockwise
//! dependency-aware attention mask built from it. Mask convention: 0 =
//! attention allowed, 1 = blocked.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::FileWriter;

/// Partition of `total` sample tokens into autoregressive steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArSplit {
    /// Segment sizes, all >= 1.
    pub sizes: Vec<usize>,
    /// Cumulative boundaries: [0, ..., total], strictly increasing.
    pub cumsum: Vec<usize>,
    pub total: usize,
}

impl ArSplit {
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
            return Err(Error::validation(
                "split sizes must be non-empty and positive",
            ));
        }
        let mut cumsum = Vec::with_capacity(sizes.len() + 1);
        cumsum.push(0);
        let mut acc = 0;
        for &sz in &sizes {
            acc += sz;
            cumsum.push(acc);
        }
        Ok(ArSplit {
            sizes,
            cumsum,
            total: acc,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.sizes.len()
    }

    /// Token range of segment `g`.
    pub fn segment(&self, g: usize) -> std::ops::Range<usize> {
        self.cumsum[g]..self.cumsum[g + 1]
    }
}

/// Draw an AR split of `s_total` tokens. The number of steps N is uniform
/// on [1, S] when `alpha` is 1.0, otherwise distributed with probabilities
/// proportional to alpha^(N-1); the boundaries are a uniformly random
/// (N-1)-subset of the interior cut points.
pub fn generate_ar_steps(s_total: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<ArSplit> {
    if s_total == 0 {
        return Err(Error::config("cannot split zero tokens"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("decay alpha {alpha} outside (0, 1]")));
    }
    let n = if (alpha - 1.0).abs() < f64::EPSILON {
        rng.random_range(1..=s_total)
    } else {
        // p_i = b * alpha^i for i in [0, S-1], b = (1 - alpha)/(1 - alpha^S).
        let b = (1.0 - alpha) / (1.0 - alpha.powi(s_total as i32));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = s_total;
        for i in 0..s_total {
            acc += b * alpha.powi(i as i32);
            if u < acc {
                chosen = i + 1;
                break;
            }
        }
        chosen
    };
    let mut cuts: Vec<usize> = index_sample(rng, s_total - 1, n - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut cumsum = Vec::with_capacity(n + 1);
    cumsum.push(0);
    cumsum.extend(cuts);
    cumsum.push(s_total);
    let sizes: Vec<usize> = cumsum.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(ArSplit {
        sizes,
        cumsum,
        total: s_total,
    })
}

/// How the dependency matrix combines with the sample-to-sample block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepMode {
    /// `sTs <- sTs OR Dep`: dependency edges block attention (the literal
    /// pseudocode rule; 1 = blocked).
    OrAsWritten,
    /// `sTs <- sTs AND NOT Dep`: dependency edges open attention.
    AllowDep,
}

/// Blockwise attention mask over [condition | visible | sample] tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    /// seq x seq, 0 = attend allowed, 1 = blocked.
    pub matrix: Array2<u8>,
    /// Condition length.
    pub c: usize,
    /// Visible length: total sample tokens minus the last segment.
    pub v: usize,
    /// Context length: c + v.
    pub ctx: usize,
    /// Sample length.
    pub s: usize,
}

impl AttentionMask {
    pub fn seq_len(&self) -> usize {
        self.ctx + self.s
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.matrix[(row, col)] == 0
    }
}

/// Build the dependency-aware attention mask for `s` sample tokens, `c`
/// condition tokens and the given split. `dep`, when present, must already
/// be permuted into the token order of the sample block.
pub fn build_attention_mask(
    s: usize,
    c: usize,
    split: &ArSplit,
    dep: Option<&Array2<u8>>,
    dep_mode: DepMode,
) -> Result<AttentionMask> {
    if split.total != s {
        return Err(Error::shape(format!(
            "split covers {} tokens, sample length is {s}",
            split.total
        )));
    }
    if c == 0 {
        return Err(Error::config(
            "at least one condition token is required",
        ));
    }
    if let Some(d) = dep {
        if d.nrows() != s || d.ncols() != s {
            return Err(Error::shape(format!(
                "dependency matrix {:?} does not match sample length {s}",
                d.shape()
            )));
        }
    }

    let v = s - split.sizes[split.sizes.len() - 1];
    let ctx = c + v;
    let seq = ctx + s;
    let cs = &split.cumsum;

    let mut m = Array2::<u8>::ones((seq, seq));
    // Condition tokens visible to all.
    m.slice_mut(s![.., 0..c]).fill(0);

    let mut v_to_v = Array2::<u8>::ones((v, v));
    let mut s_to_v = Array2::<u8>::ones((s, v));
    let mut s_to_s = Array2::<u8>::ones((s, s));

    for i in 0..split.n_steps().saturating_sub(1) {
        v_to_v.slice_mut(s![cs[i]..cs[i + 1], 0..cs[i + 1]]).fill(0);
        s_to_v
            .slice_mut(s![cs[i + 1]..cs[i + 2], 0..cs[i + 1]])
            .fill(0);
    }
    for i in 0..split.n_steps() {
        s_to_s
            .slice_mut(s![cs[i]..cs[i + 1], cs[i]..cs[i + 1]])
            .fill(0);
    }

    if let Some(d) = dep {
        match dep_mode {
            DepMode::OrAsWritten => s_to_s.zip_mut_with(d, |m, &dep| *m |= dep),
            DepMode::AllowDep => s_to_s.zip_mut_with(d, |m, &dep| *m &= 1 - dep),
        }
    }

    if v > 0 {
        m.slice_mut(s![c..ctx, c..ctx]).assign(&v_to_v);
        m.slice_mut(s![ctx.., c..ctx]).assign(&s_to_v);
    }
    m.slice_mut(s![ctx.., ctx..]).assign(&s_to_s);

    Ok(AttentionMask {
        matrix: m,
        c,
        v,
        ctx,
        s,
    })
}

/// For each row, the sorted list of columns it may attend to.
pub fn mask_row_reachability(mask: &AttentionMask) -> Vec<Vec<usize>> {
    mask.matrix
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &m)| m == 0)
                .map(|(c, _)| c)
                .collect()
        })
        .collect()
}

/// Export the mask as a 0/1 delimited matrix.
pub fn write_mask_matrix(path: &Path, mask: &AttentionMask) -> Result<()> {
    let mut w = FileWriter::create(path)?;
    for row in mask.matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        w.write_line(&cells.join(","))?;
    }
    w.finish()
}

/// One-line reproducibility log for a split: `sz=[...]; cs=[...]`.
pub fn format_split(split: &ArSplit) -> String {
    let sz: Vec<String> = split.sizes.iter().map(|v| v.to_string()).collect();
    let cs: Vec<String> = split.cumsum.iter().map(|v| v.to_string()).collect();
    format!("sz=[{}]; cs=[{}]", sz.join(", "), cs.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_token_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for alpha in [0.3, 1.0] {
            let split = generate_ar_steps(1, alpha, &mut rng).unwrap();
            assert_eq!(split.sizes, vec![1]);
            assert_eq!(split.cumsum, vec![0, 1]);
        }
    }

    #[test]
    fn split_invariants_hold_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let split = generate_ar_steps(9, 0.8, &mut rng).unwrap();
            assert_eq!(split.sizes.iter().sum::<usize>(), 9);
            assert!(split.sizes.iter().all(|&s| s >= 1));
            assert_eq!(split.cumsum[0], 0);
            assert_eq!(*split.cumsum.last().unwrap(), 9);
            assert!(split.cumsum.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(split.cumsum.len(), split.sizes.len() + 1);
        }
    }

    #[test]
    fn step_count_probabilities_for_s3_alpha_half() {
        // b = 0.5 / (1 - 0.125) = 4/7; p = [4/7, 2/7, 1/7].
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            let split = generate_ar_steps(3, 0.5, &mut rng).unwrap();
            counts[split.n_steps() - 1] += 1;
        }
        let p1 = counts[0] as f64 / draws as f64;
        let p2 = counts[1] as f64 / draws as f64;
        let p3 = counts[2] as f64 / draws as f64;
        assert!((p1 - 4.0 / 7.0).abs() < 0.01, "p1 = {p1}");
        assert!((p2 - 2.0 / 7.0).abs() < 0.01, "p2 = {p2}");
        assert!((p3 - 1.0 / 7.0).abs() < 0.01, "p3 = {p3}");
    }

    #[test]
    fn alpha_one_is_uniform_and_decay_ratio_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = 5;
        let draws = 50_000;
        let mut counts = vec![0usize; s];
        for _ in 0..draws {
            let split = generate_ar_steps(s, 1.0, &mut rng).unwrap();
            counts[split.n_steps() - 1] += 1;
        }
        for &c in &counts {
            let p = c as f64 / draws as f64;
            assert!((p - 0.2).abs() < 0.01, "p = {p}");
        }
        // alpha < 1: successive count ratios approximate alpha.
        let alpha = 0.7;
        let mut counts = vec![0usize; s];
        for _ in 0..draws {
            let split = generate_ar_steps(s, alpha, &mut rng).unwrap();
            counts[split.n_steps() - 1] += 1;
        }
        for k in 0..s - 1 {
            let ratio = counts[k + 1] as f64 / counts[k] as f64;
            assert!((ratio - alpha).abs() < 0.05, "ratio {ratio} at k={k}");
        }
    }

    #[test]
    fn invalid_split_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(generate_ar_steps(0, 0.5, &mut rng).is_err());
        assert!(generate_ar_steps(4, 0.0, &mut rng).is_err());
        assert!(generate_ar_steps(4, 1.5, &mut rng).is_err());
    }

    /// Hand-executed expected mask for s=7, c=2, sz=[2,2,3].
    fn worked_mask() -> Array2<u8> {
        let mut m = Array2::<u8>::ones((13, 13));
        for r in 0..13 {
            m[(r, 0)] = 0;
            m[(r, 1)] = 0;
        }
        // vTv: visible rows 2-3 attend visible cols 2-3; rows 4-5 attend 2-5.
        for r in 2..4 {
            for c in 2..4 {
                m[(r, c)] = 0;
            }
        }
        for r in 4..6 {
            for c in 2..6 {
                m[(r, c)] = 0;
            }
        }
        // sTv: sample rows 8-9 attend visible cols 2-3; rows 10-12 attend 2-5.
        for r in 8..10 {
            for c in 2..4 {
                m[(r, c)] = 0;
            }
        }
        for r in 10..13 {
            for c in 2..6 {
                m[(r, c)] = 0;
            }
        }
        // sTs diagonal blocks: rows/cols 6-7, 8-9, 10-12.
        for r in 6..8 {
            for c in 6..8 {
                m[(r, c)] = 0;
            }
        }
        for r in 8..10 {
            for c in 8..10 {
                m[(r, c)] = 0;
            }
        }
        for r in 10..13 {
            for c in 10..13 {
                m[(r, c)] = 0;
            }
        }
        m
    }

    #[test]
    fn worked_configuration_matches_hand_trace() {
        let split = ArSplit::from_sizes(vec![2, 2, 3]).unwrap();
        let mask = build_attention_mask(7, 2, &split, None, DepMode::OrAsWritten).unwrap();
        assert_eq!(mask.v, 4);
        assert_eq!(mask.ctx, 6);
        assert_eq!(mask.seq_len(), 13);
        assert_eq!(mask.matrix, worked_mask());
    }

    #[test]
    fn degenerate_single_step_split() {
        let split = ArSplit::from_sizes(vec![5]).unwrap();
        let mask = build_attention_mask(5, 2, &split, None, DepMode::OrAsWritten).unwrap();
        assert_eq!(mask.v, 0);
        assert_eq!(mask.ctx, 2);
        // Sample block fully open.
        for r in 2..7 {
            for c in 2..7 {
                assert!(mask.is_allowed(r, c));
            }
        }
    }

    #[test]
    fn zero_dep_is_identity_in_both_modes() {
        let split = ArSplit::from_sizes(vec![2, 3]).unwrap();
        let zero = Array2::<u8>::zeros((5, 5));
        let base = build_attention_mask(5, 2, &split, None, DepMode::OrAsWritten).unwrap();
        for mode in [DepMode::OrAsWritten, DepMode::AllowDep] {
            let with = build_attention_mask(5, 2, &split, Some(&zero), mode).unwrap();
            assert_eq!(with.matrix, base.matrix);
        }
    }

    #[test]
    fn or_mode_blocks_and_allow_mode_opens() {
        let split = ArSplit::from_sizes(vec![2, 2]).unwrap();
        let mut dep = Array2::<u8>::zeros((4, 4));
        dep[(0, 1)] = 1; // within the first diagonal block
        dep[(0, 3)] = 1; // across segments
        let ctx = 2 + 2;

        let or_mask = build_attention_mask(4, 2, &split, Some(&dep), DepMode::OrAsWritten).unwrap();
        assert!(!or_mask.is_allowed(ctx, ctx + 1), "dep edge must block");
        assert!(!or_mask.is_allowed(ctx, ctx + 3));
        assert!(or_mask.is_allowed(ctx, ctx), "diagonal stays open");

        let allow_mask =
            build_attention_mask(4, 2, &split, Some(&dep), DepMode::AllowDep).unwrap();
        assert!(allow_mask.is_allowed(ctx, ctx + 1));
        assert!(allow_mask.is_allowed(ctx, ctx + 3), "dep edge must open");
    }

    #[test]
    fn or_mode_with_all_ones_dep_blocks_everything_off_diagonal_entry() {
        let split = ArSplit::from_sizes(vec![2, 2]).unwrap();
        let mut dep = Array2::<u8>::ones((4, 4));
        for i in 0..4 {
            dep[(i, i)] = 0;
        }
        let mask = build_attention_mask(4, 2, &split, Some(&dep), DepMode::OrAsWritten).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected_open = r == c;
                assert_eq!(mask.is_allowed(4 + r, 4 + c), expected_open);
            }
        }
    }

    #[test]
    fn ar_causality_no_future_segment_reachable() {
        // Default modes never let a sample token attend a later segment.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let s = rng.random_range(2..=10);
            let split = generate_ar_steps(s, 0.8, &mut rng).unwrap();
            let dep = Array2::from_shape_fn((s, s), |(i, j)| {
                u8::from(i != j && rng.random::<f64>() < 0.3)
            });
            for (dep_opt, mode) in [
                (None, DepMode::OrAsWritten),
                (Some(&dep), DepMode::OrAsWritten),
            ] {
                let mask = build_attention_mask(s, 2, &split, dep_opt, mode).unwrap();
                for g in 0..split.n_steps() {
                    for token in split.segment(g) {
                        let row = mask.ctx + token;
                        // Later sample segments blocked.
                        for future in split.cumsum[g + 1]..s {
                            assert!(!mask.is_allowed(row, mask.ctx + future));
                        }
                        // Visible columns from segment g onward blocked.
                        for col in split.cumsum[g]..mask.v {
                            assert!(!mask.is_allowed(row, mask.c + col));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reachability_includes_condition_columns() {
        let split = ArSplit::from_sizes(vec![2, 2, 3]).unwrap();
        let mask = build_attention_mask(7, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let reach = mask_row_reachability(&mask);
        for row in &reach {
            assert!(row.contains(&0) && row.contains(&1));
        }
        // First sample token: condition plus its own diagonal block.
        assert_eq!(reach[6], vec![0, 1, 6, 7]);
    }

    #[test]
    fn mask_requires_condition_tokens_and_matching_shapes() {
        let split = ArSplit::from_sizes(vec![2, 2]).unwrap();
        assert!(build_attention_mask(4, 0, &split, None, DepMode::OrAsWritten).is_err());
        assert!(build_attention_mask(5, 2, &split, None, DepMode::OrAsWritten).is_err());
        let dep = Array2::<u8>::zeros((3, 3));
        assert!(build_attention_mask(4, 2, &split, Some(&dep), DepMode::OrAsWritten).is_err());
    }

    #[test]
    fn split_log_format() {
        let split = ArSplit::from_sizes(vec![2, 2, 3]).unwrap();
        assert_eq!(format_split(&split), "sz=[2, 2, 3]; cs=[0, 2, 4, 7]");
    }
}
