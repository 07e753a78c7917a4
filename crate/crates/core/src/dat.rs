//! Dependency-aware transformer denoiser: masked-attention blocks over
//! [condition | visible | noisy] token sequences, the training loop that
//! mixes autoregressive splits with diffusion timesteps, and the end-to-end
//! imputation entry point.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standard_normal, EvalMask, MetadataRecord, NormalizedMatrix};
use crate::depnet::DependencyMatrix;
use crate::diffusion::{
    ar_diffusion_sample, build_condition, cosine_schedule, draw_step,
    forward_sample, select_timesteps, AssembledSequence, ConditionBundle, ConditionProjector,
    DiffusionSchedule, NoisePredictor, SamplingMode, TrainExample,
};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::{build_attention_mask, generate_ar_steps, AttentionMask, DepMode};
use crate::meta::EmbeddingProvider;
use crate::nn::{cosine_lr, init_normal, sigmoid, Adam, Tape, Var};
use crate::vae::{train_vae, VaeConfig, VaeParams};

/// Sinusoidal timestep embedding with frequencies geometric from 1 down to
/// 1/10000. Requires an even width.
pub fn try_time_embedding(t: usize, h: usize) -> Result<Array1<f64>> {
    if h == 0 || h % 2 != 0 {
        return Err(Error::config(format!(
            "time embedding width {h} must be even and positive"
        )));
    }
    let pairs = h / 2;
    let mut e = Array1::<f64>::zeros(h);
    for k in 0..pairs {
        let exponent = if pairs > 1 {
            k as f64 / (pairs - 1) as f64
        } else {
            0.0
        };
        let freq = 10000f64.powf(-exponent);
        let angle = t as f64 * freq;
        e[2 * k] = angle.sin();
        e[2 * k + 1] = angle.cos();
    }
    Ok(e)
}

/// Panicking wrapper for widths validated at model construction.
pub fn time_embedding(t: usize, h: usize) -> Array1<f64> {
    try_time_embedding(t, h).expect("time embedding width must be even")
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatConfig {
    /// Token width h (must be even for the time embedding).
    pub token_dim: usize,
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Width of the metadata embedding accepted by the condition projector.
    pub meta_dim: usize,
    /// When false the metadata condition token is a learned null token.
    pub metadata_enabled: bool,
}

impl Default for DatConfig {
    fn default() -> Self {
        DatConfig {
            token_dim: 8,
            model_dim: 64,
            blocks: 4,
            heads: 4,
            ff_dim: 256,
            meta_dim: 64,
            metadata_enabled: true,
        }
    }
}

impl DatConfig {
    fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.token_dim % 2 != 0 {
            return Err(Error::config("token_dim must be even and positive"));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config("model_dim must be divisible by heads"));
        }
        if self.blocks == 0 || self.ff_dim == 0 {
            return Err(Error::config("blocks and ff_dim must be positive"));
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

impl BlockParams {
    fn init(m: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            ln1_g: Array2::ones((1, m)),
            ln1_b: Array2::zeros((1, m)),
            wq: init_normal(m, m, m, rng),
            bq: Array2::zeros((1, m)),
            wk: init_normal(m, m, m, rng),
            bk: Array2::zeros((1, m)),
            wv: init_normal(m, m, m, rng),
            bv: Array2::zeros((1, m)),
            wo: init_normal(m, m, m, rng),
            bo: Array2::zeros((1, m)),
            ln2_g: Array2::ones((1, m)),
            ln2_b: Array2::zeros((1, m)),
            ff_w1: init_normal(m, ff, m, rng),
            ff_b1: Array2::zeros((1, ff)),
            ff_w2: init_normal(ff, m, ff, rng),
            ff_b2: Array2::zeros((1, m)),
        }
    }
}

/// The denoiser: token lift, feature/type embeddings, masked-attention
/// blocks, and a zero-initialized noise head.
#[derive(Debug, Clone)]
pub struct DatModel {
    pub cfg: DatConfig,
    /// Number of sample tokens L (one per feature).
    pub n_features: usize,
    pub proj: ConditionProjector,
    /// Learned stand-in for the metadata token in the metadata-off arm.
    pub null_meta: Array2<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array2<f64>,
    pub feat_emb: Array2<f64>,
    /// Rows: condition, visible, sample.
    pub type_emb: Array2<f64>,
    pub cond_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_g: Array2<f64>,
    pub final_b: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

impl DatModel {
    pub fn init(n_features: usize, cfg: &DatConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, m) = (cfg.token_dim, cfg.model_dim);
        Ok(DatModel {
            cfg: cfg.clone(),
            n_features,
            proj: ConditionProjector::new(cfg.meta_dim, h, rng),
            null_meta: init_normal(1, h, h, rng),
            w_in: init_normal(h, m, h, rng),
            b_in: Array2::zeros((1, m)),
            feat_emb: init_normal(n_features, m, m, rng),
            type_emb: init_normal(3, m, m, rng),
            cond_emb: init_normal(2, m, m, rng),
            blocks: (0..cfg.blocks)
                .map(|_| BlockParams::init(m, cfg.ff_dim, rng))
                .collect(),
            final_g: Array2::ones((1, m)),
            final_b: Array2::zeros((1, m)),
            // Zero-initialized head: the untrained model predicts zero noise.
            w_out: Array2::zeros((m, h)),
            b_out: Array2::zeros((1, h)),
        })
    }

    /// Named parameter arrays in a stable order.
    pub fn arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("proj.w_meta".into(), &self.proj.w_meta),
            ("proj.b_meta".into(), &self.proj.b_meta),
            ("proj.w_pool".into(), &self.proj.w_pool),
            ("proj.b_pool".into(), &self.proj.b_pool),
            ("null_meta".into(), &self.null_meta),
            ("emb.w_in".into(), &self.w_in),
            ("emb.b_in".into(), &self.b_in),
            ("emb.feat".into(), &self.feat_emb),
            ("emb.type".into(), &self.type_emb),
            ("emb.cond".into(), &self.cond_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1_g"), &b.ln1_g));
            out.push((format!("block{i}.ln1_b"), &b.ln1_b));
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.bq"), &b.bq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.bk"), &b.bk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.bv"), &b.bv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.bo"), &b.bo));
            out.push((format!("block{i}.ln2_g"), &b.ln2_g));
            out.push((format!("block{i}.ln2_b"), &b.ln2_b));
            out.push((format!("block{i}.ff_w1"), &b.ff_w1));
            out.push((format!("block{i}.ff_b1"), &b.ff_b1));
            out.push((format!("block{i}.ff_w2"), &b.ff_w2));
            out.push((format!("block{i}.ff_b2"), &b.ff_b2));
        }
        out.push(("head.final_g".into(), &self.final_g));
        out.push(("head.final_b".into(), &self.final_b));
        out.push(("head.w_out".into(), &self.w_out));
        out.push(("head.b_out".into(), &self.b_out));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.proj.w_meta,
            &mut self.proj.b_meta,
            &mut self.proj.w_pool,
            &mut self.proj.b_pool,
            &mut self.null_meta,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.feat_emb,
            &mut self.type_emb,
            &mut self.cond_emb,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.push(&mut b.wq);
            out.push(&mut b.bq);
            out.push(&mut b.wk);
            out.push(&mut b.bk);
            out.push(&mut b.wv);
            out.push(&mut b.bv);
            out.push(&mut b.wo);
            out.push(&mut b.bo);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(&mut b.ff_w1);
            out.push(&mut b.ff_b1);
            out.push(&mut b.ff_w2);
            out.push(&mut b.ff_b2);
        }
        out.push(&mut self.final_g);
        out.push(&mut self.final_b);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    /// Conditioning bundle for one (already feature-permuted) latent grid.
    pub fn build_bundle(
        &self,
        m0_perm: &Array2<f64>,
        token_mask_perm: &[u8],
        meta_embedding: &Array1<f64>,
    ) -> Result<ConditionBundle> {
        let mut bundle = build_condition(m0_perm, token_mask_perm, meta_embedding, &self.proj)?;
        if !self.cfg.metadata_enabled {
            bundle.condition_tokens.row_mut(0).assign(&self.null_meta.row(0));
        }
        Ok(bundle)
    }

    /// Positional embedding rows for the [cond | visible | sample] layout.
    fn position_rows(&self, v: usize) -> Array2<f64> {
        let m = self.cfg.model_dim;
        let l = self.n_features;
        let mut pos = Array2::<f64>::zeros((2 + v + l, m));
        for r in 0..2 {
            let row = &self.cond_emb.row(r) + &self.type_emb.row(0);
            pos.row_mut(r).assign(&row);
        }
        for i in 0..v {
            let row = &self.feat_emb.row(i) + &self.type_emb.row(1);
            pos.row_mut(2 + i).assign(&row);
        }
        for i in 0..l {
            let row = &self.feat_emb.row(i) + &self.type_emb.row(2);
            pos.row_mut(2 + v + i).assign(&row);
        }
        pos
    }

    /// Inference forward pass: predictions for the noisy sample tokens.
    /// Attention respects the mask at every block, so blocked positions
    /// carry exactly zero weight.
    pub fn forward(&self, seq: &AssembledSequence, mask: &AttentionMask) -> Result<Array2<f64>> {
        let (c, v, l) = (
            seq.condition.nrows(),
            seq.visible.nrows(),
            seq.noisy.nrows(),
        );
        if c != 2 || l != self.n_features {
            return Err(Error::shape(format!(
                "sequence blocks (c={c}, s={l}) do not match model (c=2, s={})",
                self.n_features
            )));
        }
        if mask.seq_len() != seq.seq_len() || mask.c != c || mask.v != v {
            return Err(Error::shape(format!(
                "mask layout (c={}, v={}, seq={}) does not match sequence (c={c}, v={v}, seq={})",
                mask.c,
                mask.v,
                mask.seq_len(),
                seq.seq_len()
            )));
        }
        let seq_len = seq.seq_len();
        let m = self.cfg.model_dim;
        let mut tokens = Array2::<f64>::zeros((seq_len, self.cfg.token_dim));
        tokens
            .slice_mut(ndarray::s![0..c, ..])
            .assign(&seq.condition);
        if v > 0 {
            tokens
                .slice_mut(ndarray::s![c..c + v, ..])
                .assign(&seq.visible);
        }
        tokens
            .slice_mut(ndarray::s![c + v.., ..])
            .assign(&seq.noisy);

        let mut x = tokens.dot(&self.w_in) + &self.b_in;
        x += &self.position_rows(v);

        let heads = self.cfg.heads;
        let dh = m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let normed = layer_norm_plain(&x, &b.ln1_g, &b.ln1_b);
            let q = normed.dot(&b.wq) + &b.bq;
            let k = normed.dot(&b.wk) + &b.bk;
            let val = normed.dot(&b.wv) + &b.bv;
            let mut attn_cat = Array2::<f64>::zeros((seq_len, m));
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]);
                let kh = k.slice(ndarray::s![.., cols.clone()]);
                let vh = val.slice(ndarray::s![.., cols.clone()]);
                let scores = qh.dot(&kh.t()).mapv(|s| s * scale);
                let p = softmax_masked_plain(&scores, &mask.matrix);
                let out = p.dot(&vh);
                attn_cat.slice_mut(ndarray::s![.., cols]).assign(&out);
            }
            let attn_out = attn_cat.dot(&b.wo) + &b.bo;
            x += &attn_out;

            let normed = layer_norm_plain(&x, &b.ln2_g, &b.ln2_b);
            let hidden = (normed.dot(&b.ff_w1) + &b.ff_b1).mapv(|v| v * sigmoid(v));
            let ff_out = hidden.dot(&b.ff_w2) + &b.ff_b2;
            x += &ff_out;
        }
        let x = layer_norm_plain(&x, &self.final_g, &self.final_b);
        let out = x.dot(&self.w_out) + &self.b_out;
        Ok(out.slice(ndarray::s![c + v.., ..]).to_owned())
    }
}

impl NoisePredictor for DatModel {
    fn predict_eps(&self, seq: &AssembledSequence, mask: &AttentionMask) -> Array2<f64> {
        self.forward(seq, mask).expect("sequence/mask layout")
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm_plain(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = (x.nrows(), x.ncols());
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mu = row.sum() / cols as f64;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..cols {
            out[(r, c)] = (x[(r, c)] - mu) * inv * gain[(0, c)] + bias[(0, c)];
        }
    }
    out
}

fn softmax_masked_plain(scores: &Array2<f64>, blocked: &Array2<u8>) -> Array2<f64> {
    let (rows, cols) = (scores.nrows(), scores.ncols());
    let mut p = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if blocked[(r, c)] == 0 {
                max = max.max(scores[(r, c)]);
            }
        }
        let mut total = 0.0;
        for c in 0..cols {
            if blocked[(r, c)] == 0 {
                let e = (scores[(r, c)] - max).exp();
                p[(r, c)] = e;
                total += e;
            }
        }
        for c in 0..cols {
            p[(r, c)] /= total;
        }
    }
    p
}

/// Tape leaves in `arrays_mut` order plus role handles for the forward.
struct DatLeaves {
    flat: Vec<Var>,
    proj_w_meta: Var,
    proj_b_meta: Var,
    proj_w_pool: Var,
    proj_b_pool: Var,
    null_meta: Var,
    w_in: Var,
    b_in: Var,
    feat_emb: Var,
    type_emb: Var,
    cond_emb: Var,
    blocks: Vec<Vec<Var>>,
    final_g: Var,
    final_b: Var,
    w_out: Var,
    b_out: Var,
}

fn dat_leaves(tape: &mut Tape, model: &DatModel) -> DatLeaves {
    let flat: Vec<Var> = model
        .arrays()
        .into_iter()
        .map(|(_, arr)| tape.leaf(arr.clone()))
        .collect();
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for i in 0..model.blocks.len() {
        let start = 10 + i * 16;
        blocks.push(flat[start..start + 16].to_vec());
    }
    let tail = 10 + model.blocks.len() * 16;
    DatLeaves {
        proj_w_meta: flat[0],
        proj_b_meta: flat[1],
        proj_w_pool: flat[2],
        proj_b_pool: flat[3],
        null_meta: flat[4],
        w_in: flat[5],
        b_in: flat[6],
        feat_emb: flat[7],
        type_emb: flat[8],
        cond_emb: flat[9],
        blocks,
        final_g: flat[tail],
        final_b: flat[tail + 1],
        w_out: flat[tail + 2],
        b_out: flat[tail + 3],
        flat,
    }
}

/// Tape twin of `DatModel::forward` for one training row. Condition tokens
/// are rebuilt on the tape from the bundle's raw inputs so gradients reach
/// the projector and null token.
#[allow(clippy::too_many_arguments)]
fn forward_tape(
    tape: &mut Tape,
    model: &DatModel,
    leaves: &DatLeaves,
    cond: &ConditionBundle,
    visible: &Array2<f64>,
    noisy_with_te: &Array2<f64>,
    mask: &AttentionMask,
    blocked: &Rc<Array2<u8>>,
) -> Var {
    let (h, m) = (model.cfg.token_dim, model.cfg.model_dim);
    let l = model.n_features;
    let v = visible.nrows();

    // Condition tokens.
    let meta_row = if model.cfg.metadata_enabled {
        let meta = tape.leaf(
            Array2::from_shape_vec((1, cond.meta_embedding.len()), cond.meta_embedding.to_vec())
                .expect("meta row"),
        );
        tape.linear(meta, leaves.proj_w_meta, leaves.proj_b_meta)
    } else {
        leaves.null_meta
    };
    let observed = tape.leaf(cond.observed_latent.clone());
    let pooled = tape.mean_rows(observed);
    let pool_row = tape.linear(pooled, leaves.proj_w_pool, leaves.proj_b_pool);

    let mut parts = vec![meta_row, pool_row];
    if v > 0 {
        parts.push(tape.leaf(visible.clone()));
    }
    parts.push(tape.leaf(noisy_with_te.clone()));
    let tokens = tape.concat_rows(&parts);
    let lifted = tape.linear(tokens, leaves.w_in, leaves.b_in);

    // Positional rows mirror `position_rows`.
    let type_cond = tape.slice_rows(leaves.type_emb, 0, 1);
    let type_vis = tape.slice_rows(leaves.type_emb, 1, 2);
    let type_samp = tape.slice_rows(leaves.type_emb, 2, 3);
    let cond_pos = tape.add_row(leaves.cond_emb, type_cond);
    let samp_base = tape.add_row(leaves.feat_emb, type_samp);
    let mut pos_parts = vec![cond_pos];
    if v > 0 {
        let vis_feat = tape.slice_rows(leaves.feat_emb, 0, v);
        pos_parts.push(tape.add_row(vis_feat, type_vis));
    }
    pos_parts.push(samp_base);
    let pos = tape.concat_rows(&pos_parts);
    let mut x = tape.add(lifted, pos);

    let heads = model.cfg.heads;
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for bl in &leaves.blocks {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff_w1, ff_b1, ff_w2, ff_b2] =
            bl[..16].try_into().expect("16 block params");
        let normed = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS);
        let q = tape.linear(normed, wq, bq);
        let k = tape.linear(normed, wk, bk);
        let val = tape.linear(normed, wv, bv);
        let mut head_outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (c0, c1) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(val, c0, c1);
            let kt = tape.transpose(kh);
            let scores_raw = tape.matmul(qh, kt);
            let scores = tape.affine(scores_raw, scale, 0.0);
            let p = tape.softmax_masked(scores, Rc::clone(blocked));
            head_outs.push(tape.matmul(p, vh));
        }
        let cat = tape.concat_cols(&head_outs);
        let attn_out = tape.linear(cat, wo, bo);
        x = tape.add(x, attn_out);

        let normed = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS);
        let pre = tape.linear(normed, ff_w1, ff_b1);
        let hidden = tape.silu(pre);
        let ff_out = tape.linear(hidden, ff_w2, ff_b2);
        x = tape.add(x, ff_out);
    }
    let x = tape.layer_norm(x, leaves.final_g, leaves.final_b, LN_EPS);
    let out = tape.linear(x, leaves.w_out, leaves.b_out);
    let start = 2 + v;
    let _ = (h, mask);
    tape.slice_rows(out, start, start + l)
}

/// AR feature ordering: directed out-degree descending, variance
/// descending, index ascending. Position a of the result holds the original
/// feature index placed at AR slot a.
pub fn ar_ordering(c_dir: &Array2<u8>, y: &Array2<f64>) -> Vec<usize> {
    let d = c_dir.ncols();
    let out_degree: Vec<usize> = (0..d)
        .map(|j| (0..d).map(|i| c_dir[(i, j)] as usize).sum())
        .collect();
    let vars: Vec<f64> = (0..d).map(|c| crate::data::column_variance(y, c)).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        out_degree[b]
            .cmp(&out_degree[a])
            .then(
                vars[b]
                    .partial_cmp(&vars[a])
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.cmp(&b))
    });
    order
}

/// Reindex rows so row a of the result is row `order[a]` of the input.
pub fn permute_rows(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((order.len(), x.ncols()));
    for (a, &f) in order.iter().enumerate() {
        out.row_mut(a).assign(&x.row(f));
    }
    out
}

/// Undo `permute_rows`.
pub fn unpermute_rows(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for (a, &f) in order.iter().enumerate() {
        out.row_mut(f).assign(&x.row(a));
    }
    out
}

/// `dep_perm[a][b] = dep[order[a]][order[b]]`.
pub fn permute_dep(dep: &Array2<u8>, order: &[usize]) -> Array2<u8> {
    let d = order.len();
    Array2::from_shape_fn((d, d), |(a, b)| dep[(order[a], order[b])])
}

/// Training hyperparameters for the denoiser.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatTrainConfig {
    pub model: DatConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Exponential decay factor for AR split draws.
    pub decay_alpha: f64,
    pub dep_mode_or_as_written: bool,
    /// Fraction of a row's nonzero entries hidden per training step for the
    /// conditioning signal.
    pub train_mask_fraction: f64,
    pub timesteps: usize,
    pub vae: VaeConfig,
    pub seed: u64,
    pub config_hash: String,
}

impl Default for DatTrainConfig {
    fn default() -> Self {
        DatTrainConfig {
            model: DatConfig::default(),
            lr: 1e-4,
            batch: 16,
            epochs: 200,
            patience: 20,
            decay_alpha: 0.8,
            dep_mode_or_as_written: true,
            train_mask_fraction: 0.1,
            timesteps: 1000,
            vae: VaeConfig::default(),
            seed: 0,
            config_hash: String::new(),
        }
    }
}

impl DatTrainConfig {
    pub fn dep_mode(&self) -> DepMode {
        if self.dep_mode_or_as_written {
            DepMode::OrAsWritten
        } else {
            DepMode::AllowDep
        }
    }
}

/// Everything needed to reproduce an imputation.
#[derive(Debug, Clone)]
pub struct DatCheckpoint {
    pub model: DatModel,
    pub vae: VaeParams,
    pub order: Vec<usize>,
    pub dep: DependencyMatrix,
    pub timesteps: usize,
    pub decay_alpha: f64,
    pub dep_mode_or_as_written: bool,
    pub seed: u64,
    pub config_hash: String,
    pub feature_ids: Vec<String>,
}

impl DatCheckpoint {
    pub fn dep_mode(&self) -> DepMode {
        if self.dep_mode_or_as_written {
            DepMode::OrAsWritten
        } else {
            DepMode::AllowDep
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Write the per-epoch training log as one JSON object per line.
pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = crate::io::FileWriter::create(path)?;
    for entry in log {
        let json = serde_json::to_string(entry)
            .map_err(|e| Error::validation(format!("log encode: {e}")))?;
        w.write_line(&json)?;
    }
    w.finish()
}

fn embed_all(
    y: &NormalizedMatrix,
    metadata: &[MetadataRecord],
    provider: &EmbeddingProvider,
    enabled: bool,
    meta_dim: usize,
) -> Result<Vec<Array1<f64>>> {
    if !enabled {
        return Ok(vec![Array1::zeros(meta_dim); y.n_samples()]);
    }
    let by_id: std::collections::HashMap<&str, &MetadataRecord> = metadata
        .iter()
        .map(|r| (r.sample_id.as_str(), r))
        .collect();
    let mut out = Vec::with_capacity(y.n_samples());
    for id in &y.sample_ids {
        let record = by_id.get(id.as_str()).ok_or_else(|| {
            Error::validation(format!("no metadata record for sample {id:?}"))
        })?;
        out.push(provider.embed_record(record)?);
    }
    Ok(out)
}

/// Draw a conditioning mask over the row's nonzero entries and return the
/// (permuted) observed latent for the masked row.
fn train_condition_latent(
    vae: &VaeParams,
    row: &[f64],
    order: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<u8>)> {
    let d = row.len();
    let nnz: Vec<usize> = (0..d).filter(|&c| row[c] != 0.0).collect();
    let k = (fraction * nnz.len() as f64).round() as usize;
    let mut token_mask = vec![0u8; d];
    let mut masked_row = row.to_vec();
    if k > 0 && !nnz.is_empty() {
        let chosen = rand::seq::index::sample(rng, nnz.len(), k.min(nnz.len()));
        for idx in chosen {
            let c = nnz[idx];
            token_mask[c] = 1;
            masked_row[c] = 0.0;
        }
    }
    let (mu, _) = vae.encode(&masked_row)?;
    let m0_perm = permute_rows(&mu, order);
    let mask_perm: Vec<u8> = order.iter().map(|&f| token_mask[f]).collect();
    Ok((m0_perm, mask_perm))
}

/// Train the denoiser. The VAE is initialized from `vae_init` when given
/// (the pretraining transfer path), fine-tuned on the training matrix, then
/// frozen; the transformer trains on the epsilon objective with one AR split
/// drawn per batch. Divergence (non-finite or exploding loss) aborts.
pub fn train(
    y: &NormalizedMatrix,
    metadata: &[MetadataRecord],
    dep: &DependencyMatrix,
    provider: &EmbeddingProvider,
    vae_init: Option<&VaeParams>,
    config: &DatTrainConfig,
) -> Result<(DatCheckpoint, Vec<EpochLog>)> {
    let l = y.n_features();
    let n = y.n_samples();
    if dep.dim() != l {
        return Err(Error::shape(format!(
            "dependency matrix dim {} does not match {l} features",
            dep.dim()
        )));
    }
    if n < 4 {
        return Err(Error::validation("need at least four samples to train"));
    }
    let mut model_cfg = config.model.clone();
    model_cfg.meta_dim = provider.dim();
    model_cfg.validate()?;
    if config.vae.token_dim != model_cfg.token_dim {
        return Err(Error::config(format!(
            "vae token_dim {} must match model token_dim {}",
            config.vae.token_dim, model_cfg.token_dim
        )));
    }

    let meta_embs = embed_all(
        y,
        metadata,
        provider,
        model_cfg.metadata_enabled,
        provider.dim(),
    )?;

    // VAE: transfer or fresh, then fine-tune on this matrix and freeze.
    let mut vae_rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[config.seed, 0xdac]));
    let vae_start = match vae_init {
        Some(p) => crate::vae::transfer(p, l, model_cfg.token_dim)?,
        None => VaeParams::init(l, &config.vae, &mut vae_rng),
    };
    let vae = if config.vae.epochs > 0 {
        let (p, _) = train_vae(&y.values, vae_start, &config.vae)?;
        p
    } else {
        vae_start
    };

    let order = ar_ordering(&dep.c_dir, &y.values);
    let dep_perm = permute_dep(&dep.dep, &order);

    // Clean target latents, AR-permuted.
    let mut targets: Vec<Array2<f64>> = Vec::with_capacity(n);
    for r in 0..n {
        let row: Vec<f64> = y.values.row(r).to_vec();
        let (mu, _) = vae.encode(&row)?;
        targets.push(permute_rows(&mu, &order));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut row_order: Vec<usize> = (0..n).collect();
    shuffle_idx(&mut row_order, &mut rng);
    let n_val = (n / 10).clamp(1, n - 1);
    let (val_rows, train_rows) = row_order.split_at(n_val);

    let sched = cosine_schedule(config.timesteps)?;
    let mut model = DatModel::init(l, &model_cfg, &mut rng)?;
    let mut opt = Adam::new(config.lr);
    let steps_per_epoch = train_rows.len().div_ceil(config.batch.max(1));
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let mut global_step = 0usize;

    let mut best: Option<(f64, DatModel)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 0..config.epochs {
        let mut eorder = train_rows.to_vec();
        shuffle_idx(&mut eorder, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in eorder.chunks(config.batch.max(1)) {
            let split = generate_ar_steps(l, config.decay_alpha, &mut rng)?;
            let attn = build_attention_mask(l, 2, &split, Some(&dep_perm), config.dep_mode())?;
            let blocked = Rc::new(attn.matrix.clone());
            let (s_idx, t) = draw_step(&split, &sched, &mut rng);
            let seg = split.segment(s_idx);
            let v = l - split.sizes[split.n_steps() - 1];

            let mut tape = Tape::new();
            let leaves = dat_leaves(&mut tape, &model);
            let mut total: Option<Var> = None;
            for &r in chunk {
                let row: Vec<f64> = y.values.row(r).to_vec();
                let (m0_perm, mask_perm) = train_condition_latent(
                    &vae,
                    &row,
                    &order,
                    config.train_mask_fraction,
                    &mut rng,
                )?;
                let bundle = model.build_bundle(&m0_perm, &mask_perm, &meta_embs[r])?;
                let x0 = &targets[r];
                let eps = Array2::from_shape_fn((l, model_cfg.token_dim), |_| {
                    standard_normal(&mut rng)
                });
                let x_t = forward_sample(x0, t, &eps, &sched)?;
                let te = time_embedding(t, model_cfg.token_dim);
                let noisy = &x_t + &te.view().insert_axis(Axis(0));
                let visible = x0.slice(ndarray::s![0..v, ..]).to_owned();

                let eps_hat =
                    forward_tape(&mut tape, &model, &leaves, &bundle, &visible, &noisy, &attn, &blocked);
                let pred_seg = tape.slice_rows(eps_hat, seg.start, seg.end);
                let target_seg =
                    tape.leaf(eps.slice(ndarray::s![seg.clone(), ..]).to_owned());
                let row_loss = tape.mse(pred_seg, target_seg);
                total = Some(match total {
                    Some(acc) => tape.add(acc, row_loss),
                    None => row_loss,
                });
            }
            let total = total.expect("non-empty chunk");
            let loss = tape.affine(total, 1.0 / chunk.len() as f64, 0.0);
            let loss_val = tape.value(loss)[(0, 0)];
            if !loss_val.is_finite() || loss_val > 1e3 {
                return Err(Error::Divergence(format!(
                    "loss {loss_val} at epoch {epoch}, t={t}, ar step {s_idx}"
                )));
            }
            tape.backward(loss);
            let grads: Vec<Array2<f64>> =
                leaves.flat.iter().map(|v| tape.grad(*v).clone()).collect();
            let lr = cosine_lr(config.lr, global_step, total_steps, 0.1);
            let mut refs = model.arrays_mut();
            opt.step(&mut refs, &grads, lr);
            global_step += 1;
            epoch_loss += loss_val;
            batches += 1;
        }

        let val_loss = validation_loss(
            &model, &vae, y, &meta_embs, &targets, val_rows, &order, &dep_perm, &sched, config,
        )?;
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            lr: cosine_lr(config.lr, global_step.saturating_sub(1), total_steps, 0.1),
            seed: config.seed,
        });
        let improved = best.as_ref().map(|(b, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let best_model = best.map(|(_, m)| m).unwrap_or(model);
    let checkpoint = DatCheckpoint {
        model: best_model,
        vae,
        order,
        dep: dep.clone(),
        timesteps: config.timesteps,
        decay_alpha: config.decay_alpha,
        dep_mode_or_as_written: config.dep_mode_or_as_written,
        seed: config.seed,
        config_hash: config.config_hash.clone(),
        feature_ids: y.feature_ids.clone(),
    };
    Ok((checkpoint, log))
}

/// Validation loss with draws re-derived from the config seed each epoch so
/// the metric is comparable across epochs.
#[allow(clippy::too_many_arguments)]
fn validation_loss(
    model: &DatModel,
    vae: &VaeParams,
    y: &NormalizedMatrix,
    meta_embs: &[Array1<f64>],
    targets: &[Array2<f64>],
    val_rows: &[usize],
    order: &[usize],
    dep_perm: &Array2<u8>,
    sched: &DiffusionSchedule,
    config: &DatTrainConfig,
) -> Result<f64> {
    let l = y.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[config.seed, 0xe7a1]));
    let reps = 4;
    let mut total = 0.0;
    for _ in 0..reps {
        let split = generate_ar_steps(l, config.decay_alpha, &mut rng)?;
        let attn = build_attention_mask(l, 2, &split, Some(dep_perm), config.dep_mode())?;
        let mut examples = Vec::with_capacity(val_rows.len());
        for &r in val_rows {
            let row: Vec<f64> = y.values.row(r).to_vec();
            let (m0_perm, mask_perm) =
                train_condition_latent(vae, &row, order, config.train_mask_fraction, &mut rng)?;
            let bundle = model.build_bundle(&m0_perm, &mask_perm, &meta_embs[r])?;
            examples.push(TrainExample {
                x0: targets[r].clone(),
                cond: bundle,
            });
        }
        let loss = crate::diffusion::ar_diffusion_train_step(
            model, &examples, &split, &attn, sched, &mut rng,
        )?;
        total += loss;
    }
    Ok(total / reps as f64)
}

fn shuffle_idx(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Sampler settings for imputation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub divisor: usize,
    /// Independent draws averaged per sample.
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplingMode::Adaptive,
            divisor: 20,
            n_draws: 1,
            seed: 0,
        }
    }
}

/// Impute the masked entries of `y_masked`: per sample, encode the observed
/// row, condition on it plus metadata, sample latents autoregressively,
/// decode, and composite so observed entries pass through verbatim.
/// Samples run in parallel with per-sample derived seeds; results are
/// independent of scheduling.
pub fn impute(
    y_masked: &NormalizedMatrix,
    mask: &EvalMask,
    metadata: &[MetadataRecord],
    provider: &EmbeddingProvider,
    ckpt: &DatCheckpoint,
    sampler: &SamplerConfig,
) -> Result<Array2<f64>> {
    let l = y_masked.n_features();
    let n = y_masked.n_samples();
    if ckpt.vae.q != l || ckpt.model.n_features != l {
        return Err(Error::shape(format!(
            "checkpoint expects {} features, matrix has {l}",
            ckpt.model.n_features
        )));
    }
    if mask.mask.raw_dim() != y_masked.values.raw_dim() {
        return Err(Error::shape("mask shape does not match matrix"));
    }
    if sampler.n_draws == 0 {
        return Err(Error::config("n_draws must be >= 1"));
    }
    let meta_embs = embed_all(
        y_masked,
        metadata,
        provider,
        ckpt.model.cfg.metadata_enabled,
        provider.dim(),
    )?;
    let sched = cosine_schedule(ckpt.timesteps)?;
    let dep_perm = permute_dep(&ckpt.dep.dep, &ckpt.order);

    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let row: Vec<f64> = y_masked.values.row(r).to_vec();
            let token_mask: Vec<u8> = (0..l).map(|c| mask.mask[(r, c)]).collect();
            let (mu, _) = ckpt.vae.encode(&row)?;
            let m0_perm = permute_rows(&mu, &ckpt.order);
            let mask_perm: Vec<u8> = ckpt.order.iter().map(|&f| token_mask[f]).collect();
            let bundle = ckpt.model.build_bundle(&m0_perm, &mask_perm, &meta_embs[r])?;

            let mut acc = Array1::<f64>::zeros(l);
            for d in 0..sampler.n_draws {
                let mut rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[
                    sampler.seed,
                    r as u64,
                    d as u64,
                ]));
                let split = generate_ar_steps(l, ckpt.decay_alpha, &mut rng)?;
                let attn =
                    build_attention_mask(l, 2, &split, Some(&dep_perm), ckpt.dep_mode())?;
                let plan = select_timesteps(&sched, sampler.mode, sampler.divisor, &split)?;
                let x0_perm = ar_diffusion_sample(
                    &ckpt.model,
                    &bundle,
                    &split,
                    &plan,
                    &attn,
                    &sched,
                    &mut rng,
                )?;
                let x0 = unpermute_rows(&x0_perm, &ckpt.order);
                let decoded = ckpt.vae.decode(&x0)?;
                acc += &decoded;
            }
            acc /= sampler.n_draws as f64;
            let mut out = row;
            for c in 0..l {
                if token_mask[c] == 1 {
                    out[c] = acc[c];
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite imputation in sample {:?}",
                    y_masked.sample_ids[r]
                )));
            }
            Ok(out)
        })
        .collect();

    let mut out = Array2::<f64>::zeros((n, l));
    for (r, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (c, v) in row.into_iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    Ok(out)
}

// Checkpoint serialization: named arrays plus the layout/config metadata.

#[derive(Serialize, Deserialize)]
struct ArrayData {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: DatConfig,
    n_features: usize,
    order: Vec<usize>,
    c_dir: Vec<u8>,
    c_mi: Vec<u8>,
    timesteps: usize,
    decay_alpha: f64,
    dep_mode_or_as_written: bool,
    seed: u64,
    config_hash: String,
    feature_ids: Vec<String>,
    dat_arrays: BTreeMap<String, ArrayData>,
    vae_q: usize,
    vae_h: usize,
    vae_hidden: usize,
    vae_seed: u64,
    vae_arrays: BTreeMap<String, ArrayData>,
}

pub fn save_checkpoint(ckpt: &DatCheckpoint, path: &Path) -> Result<()> {
    let mut dat_arrays = BTreeMap::new();
    for (name, arr) in ckpt.model.arrays() {
        let (rows, cols, data) = crate::vae::array_to_data(arr);
        dat_arrays.insert(name, ArrayData { rows, cols, data });
    }
    let mut vae_arrays = BTreeMap::new();
    for (name, arr) in ckpt.vae.arrays() {
        let (rows, cols, data) = crate::vae::array_to_data(arr);
        vae_arrays.insert(name.to_string(), ArrayData { rows, cols, data });
    }
    let file = CheckpointFile {
        config: ckpt.model.cfg.clone(),
        n_features: ckpt.model.n_features,
        order: ckpt.order.clone(),
        c_dir: ckpt.dep.c_dir.iter().copied().collect(),
        c_mi: ckpt.dep.c_mi.iter().copied().collect(),
        timesteps: ckpt.timesteps,
        decay_alpha: ckpt.decay_alpha,
        dep_mode_or_as_written: ckpt.dep_mode_or_as_written,
        seed: ckpt.seed,
        config_hash: ckpt.config_hash.clone(),
        feature_ids: ckpt.feature_ids.clone(),
        dat_arrays,
        vae_q: ckpt.vae.q,
        vae_h: ckpt.vae.h,
        vae_hidden: ckpt.vae.hidden,
        vae_seed: ckpt.vae.seed,
        vae_arrays,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::validation(format!("checkpoint encode: {e}")))?;
    let mut w = crate::io::FileWriter::create(path)?;
    w.write_line(&json)?;
    w.finish()
}

pub fn load_checkpoint(path: &Path) -> Result<DatCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        message: format!("checkpoint decode: {e}"),
    })?;
    let d = file.n_features;
    let c_dir = Array2::from_shape_vec((d, d), file.c_dir)
        .map_err(|e| Error::validation(format!("c_dir shape: {e}")))?;
    let c_mi = Array2::from_shape_vec((d, d), file.c_mi)
        .map_err(|e| Error::validation(format!("c_mi shape: {e}")))?;
    let dep = DependencyMatrix::new(c_dir, c_mi)?;

    let mut rng = ChaCha8Rng::seed_from_u64(file.seed);
    let mut model = DatModel::init(d, &file.config, &mut rng)?;
    {
        let names: Vec<String> = model.arrays().into_iter().map(|(n, _)| n).collect();
        let mut refs = model.arrays_mut();
        for (i, name) in names.iter().enumerate() {
            let entry = file
                .dat_arrays
                .get(name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing {name}")))?;
            *refs[i] = crate::vae::data_to_array(entry.rows, entry.cols, entry.data.clone())?;
        }
    }

    let vae_cfg = VaeConfig {
        token_dim: file.vae_h,
        hidden: file.vae_hidden,
        seed: file.vae_seed,
        ..VaeConfig::default()
    };
    let mut vae = VaeParams::init(file.vae_q, &vae_cfg, &mut rng);
    {
        let names = VaeParams::param_names();
        let mut refs = vae.arrays_mut();
        for (i, name) in names.iter().enumerate() {
            let entry = file
                .vae_arrays
                .get(*name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing {name}")))?;
            *refs[i] = crate::vae::data_to_array(entry.rows, entry.cols, entry.data.clone())?;
        }
    }
    vae.assert_finite()?;

    Ok(DatCheckpoint {
        model,
        vae,
        order: file.order,
        dep,
        timesteps: file.timesteps,
        decay_alpha: file.decay_alpha,
        dep_mode_or_as_written: file.dep_mode_or_as_written,
        seed: file.seed,
        config_hash: file.config_hash,
        feature_ids: file.feature_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::assemble_sequence;
    use crate::mask::ArSplit;

    fn small_cfg() -> DatConfig {
        DatConfig {
            token_dim: 4,
            model_dim: 16,
            blocks: 2,
            heads: 2,
            ff_dim: 32,
            meta_dim: 6,
            metadata_enabled: true,
        }
    }

    #[test]
    fn time_embedding_properties() {
        let e = try_time_embedding(5, 8).unwrap();
        assert_eq!(e.len(), 8);
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= (8f64).sqrt() + 1e-12);
        assert_eq!(time_embedding(5, 8), time_embedding(5, 8));
        assert!(try_time_embedding(5, 7).is_err());
        assert!(try_time_embedding(5, 0).is_err());

        // Injective over 1..=1000 for h >= 4.
        let embs: Vec<Array1<f64>> = (1..=1000).map(|t| time_embedding(t, 8)).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d: f64 = embs[i]
                    .iter()
                    .zip(embs[j].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d > 1e-12, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    fn toy_setup(
        l: usize,
        seed: u64,
    ) -> (DatModel, ArSplit, AttentionMask, ConditionBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg();
        let mut model = DatModel::init(l, &cfg, &mut rng).unwrap();
        // Non-zero head so outputs respond to inputs.
        model.w_out = init_normal(cfg.model_dim, cfg.token_dim, cfg.model_dim, &mut rng);
        let split = generate_ar_steps(l, 0.8, &mut rng).unwrap();
        let mask = build_attention_mask(l, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let m0 = Array2::from_shape_fn((l, cfg.token_dim), |_| standard_normal(&mut rng));
        let token_mask = vec![0u8; l];
        let meta = Array1::from_shape_fn(cfg.meta_dim, |_| standard_normal(&mut rng));
        let bundle = model.build_bundle(&m0, &token_mask, &meta).unwrap();
        (model, split, mask, bundle)
    }

    fn toy_sequence(
        model: &DatModel,
        split: &ArSplit,
        bundle: &ConditionBundle,
        t: usize,
        seed: u64,
    ) -> AssembledSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = model.n_features;
        let h = model.cfg.token_dim;
        let v = l - split.sizes[split.n_steps() - 1];
        let visible = Array2::from_shape_fn((v, h), |_| standard_normal(&mut rng));
        let noisy = Array2::from_shape_fn((l, h), |_| standard_normal(&mut rng));
        assemble_sequence(bundle, visible, noisy, t)
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DatModel::init(5, &small_cfg(), &mut rng).unwrap();
        let split = generate_ar_steps(5, 1.0, &mut rng).unwrap();
        let mask = build_attention_mask(5, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let m0 = Array2::from_shape_fn((5, 4), |_| standard_normal(&mut rng));
        let meta = Array1::zeros(6);
        let bundle = model.build_bundle(&m0, &[0; 5], &meta).unwrap();
        let seq = toy_sequence(&model, &split, &bundle, 3, 2);
        let out = model.forward(&seq, &mask).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let (model, split, mask, bundle) = toy_setup(6, 3);
        let seq = toy_sequence(&model, &split, &bundle, 7, 4);
        let plain = model.forward(&seq, &mask).unwrap();

        let mut tape = Tape::new();
        let leaves = dat_leaves(&mut tape, &model);
        let blocked = Rc::new(mask.matrix.clone());
        let out = forward_tape(
            &mut tape,
            &model,
            &leaves,
            &bundle,
            &seq.visible,
            &seq.noisy,
            &mask,
            &blocked,
        );
        let tape_out = tape.value(out);
        let max_diff = plain
            .iter()
            .zip(tape_out.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "tape vs plain diff {max_diff}");
    }

    #[test]
    fn gradcheck_single_block_epsilon_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DatConfig {
            token_dim: 4,
            model_dim: 8,
            blocks: 1,
            heads: 2,
            ff_dim: 12,
            meta_dim: 3,
            metadata_enabled: true,
        };
        let l = 4;
        let mut model = DatModel::init(l, &cfg, &mut rng).unwrap();
        model.w_out = init_normal(cfg.model_dim, cfg.token_dim, cfg.model_dim, &mut rng);
        let split = ArSplit::from_sizes(vec![2, 2]).unwrap();
        let mask = build_attention_mask(l, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let m0 = Array2::from_shape_fn((l, 4), |_| standard_normal(&mut rng));
        let meta = Array1::from_shape_fn(3, |_| standard_normal(&mut rng));
        let bundle = model.build_bundle(&m0, &[0, 1, 0, 0], &meta).unwrap();
        let visible = Array2::from_shape_fn((2, 4), |_| standard_normal(&mut rng));
        let noisy = Array2::from_shape_fn((l, 4), |_| standard_normal(&mut rng));
        let eps_target = Array2::from_shape_fn((l, 4), |_| standard_normal(&mut rng));

        let loss_for = |m: &DatModel| -> f64 {
            let mut tape = Tape::new();
            let leaves = dat_leaves(&mut tape, m);
            let blocked = Rc::new(mask.matrix.clone());
            let out = forward_tape(
                &mut tape, m, &leaves, &bundle, &visible, &noisy, &mask, &blocked,
            );
            let tgt = tape.leaf(eps_target.clone());
            let loss = tape.mse(out, tgt);
            tape.value(loss)[(0, 0)]
        };

        let mut tape = Tape::new();
        let leaves = dat_leaves(&mut tape, &model);
        let blocked = Rc::new(mask.matrix.clone());
        let out = forward_tape(
            &mut tape, &model, &leaves, &bundle, &visible, &noisy, &mask, &blocked,
        );
        let tgt = tape.leaf(eps_target.clone());
        let loss = tape.mse(out, tgt);
        tape.backward(loss);

        let names: Vec<String> = model.arrays().into_iter().map(|(n, _)| n).collect();
        let h = 1e-5;
        for (k, name) in names.iter().enumerate() {
            let arr_len = model.arrays()[k].1.len();
            let ncols = model.arrays()[k].1.ncols();
            for probe in 0..arr_len.min(3) {
                let (r, c) = (probe / ncols, probe % ncols);
                let mut plus = model.clone();
                plus.arrays_mut()[k][(r, c)] += h;
                let mut minus = model.clone();
                minus.arrays_mut()[k][(r, c)] -= h;
                let numeric = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
                let analytic = tape.grad(leaves.flat[k])[(r, c)];
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-5);
                assert!(
                    rel < 1e-3,
                    "{name}[{r},{c}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    /// Perturbing a blocked column leaves the corresponding output rows
    /// unchanged: exact for one block with any mask, and at any depth for
    /// the pure AR masks (they are transitively closed).
    #[test]
    fn blocked_columns_are_non_influential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let l = 5;
            let cfg = DatConfig {
                blocks: 1,
                ..small_cfg()
            };
            let mut model = DatModel::init(l, &cfg, &mut rng).unwrap();
            model.w_out = init_normal(cfg.model_dim, cfg.token_dim, cfg.model_dim, &mut rng);
            let split = generate_ar_steps(l, 0.7, &mut rng).unwrap();
            let dep = Array2::from_shape_fn((l, l), |(i, j)| {
                u8::from(i != j && rng.random::<f64>() < 0.4)
            });
            let mask =
                build_attention_mask(l, 2, &split, Some(&dep), DepMode::OrAsWritten).unwrap();
            let m0 = Array2::from_shape_fn((l, cfg.token_dim), |_| standard_normal(&mut rng));
            let meta = Array1::from_shape_fn(cfg.meta_dim, |_| standard_normal(&mut rng));
            let bundle = model.build_bundle(&m0, &vec![0u8; l], &meta).unwrap();
            let seq = toy_sequence(&model, &split, &bundle, 5, 100 + trial);
            let base = model.forward(&seq, &mask).unwrap();

            let ctx = mask.ctx;
            for col in mask.c..mask.seq_len() {
                // Perturb the raw token behind column `col`.
                let mut seq2 = seq.clone();
                if col < ctx {
                    seq2.visible[(col - mask.c, 0)] += 1e-3;
                } else {
                    seq2.noisy[(col - ctx, 0)] += 1e-3;
                }
                let out = model.forward(&seq2, &mask).unwrap();
                for row_tok in 0..l {
                    let row = ctx + row_tok;
                    if !mask.is_allowed(row, col) {
                        let delta: f64 = (0..cfg.token_dim)
                            .map(|c| (out[(row_tok, c)] - base[(row_tok, c)]).abs())
                            .sum();
                        assert!(
                            delta < 1e-9,
                            "trial {trial}: blocked ({row}, {col}) leaked {delta}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fully_blocked_visible_is_invisible_to_samples_at_depth() {
        // sz = [l]: no visible block at all, any depth. Instead test sTv
        // closure: sample rows of segment 0 never see visible tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 6;
        let cfg = small_cfg();
        let mut model = DatModel::init(l, &cfg, &mut rng).unwrap();
        model.w_out = init_normal(cfg.model_dim, cfg.token_dim, cfg.model_dim, &mut rng);
        let split = ArSplit::from_sizes(vec![2, 2, 2]).unwrap();
        let mask = build_attention_mask(l, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let m0 = Array2::from_shape_fn((l, cfg.token_dim), |_| standard_normal(&mut rng));
        let meta = Array1::from_shape_fn(cfg.meta_dim, |_| standard_normal(&mut rng));
        let bundle = model.build_bundle(&m0, &vec![0u8; l], &meta).unwrap();
        let seq = toy_sequence(&model, &split, &bundle, 9, 11);
        let base = model.forward(&seq, &mask).unwrap();

        // Perturb every visible token; segment-0 sample rows (0, 1) must not
        // move even through 2 attention blocks.
        let mut seq2 = seq.clone();
        for r in 0..seq2.visible.nrows() {
            for c in 0..seq2.visible.ncols() {
                seq2.visible[(r, c)] += 0.5;
            }
        }
        let out = model.forward(&seq2, &mask).unwrap();
        for row_tok in 0..2 {
            for c in 0..cfg.token_dim {
                assert_eq!(out[(row_tok, c)], base[(row_tok, c)]);
            }
        }
    }

    #[test]
    fn model_is_feature_permutation_equivariant() {
        // Permuting sample tokens together with the feature embedding, the
        // dependency mask and the visible block permutes the outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = 5;
        let cfg = small_cfg();
        let mut model = DatModel::init(l, &cfg, &mut rng).unwrap();
        model.w_out = init_normal(cfg.model_dim, cfg.token_dim, cfg.model_dim, &mut rng);
        // Single segment: no visible block, so the permutation acts only on
        // the sample block.
        let split = ArSplit::from_sizes(vec![l]).unwrap();
        let dep = Array2::from_shape_fn((l, l), |(i, j)| {
            u8::from(i != j && rng.random::<f64>() < 0.4)
        });
        let mask = build_attention_mask(l, 2, &split, Some(&dep), DepMode::OrAsWritten).unwrap();
        let m0 = Array2::from_shape_fn((l, cfg.token_dim), |_| standard_normal(&mut rng));
        let meta = Array1::from_shape_fn(cfg.meta_dim, |_| standard_normal(&mut rng));
        let bundle = model.build_bundle(&m0, &vec![0u8; l], &meta).unwrap();
        let seq = toy_sequence(&model, &split, &bundle, 4, 13);
        let base = model.forward(&seq, &mask).unwrap();

        let perm: Vec<usize> = vec![2, 0, 4, 1, 3];
        let mut model_p = model.clone();
        model_p.feat_emb = permute_rows(&model.feat_emb, &perm);
        let dep_p = permute_dep(&dep, &perm);
        let mask_p =
            build_attention_mask(l, 2, &split, Some(&dep_p), DepMode::OrAsWritten).unwrap();
        // Observed latent feeds only the pooled condition token, which is
        // permutation-invariant, so the bundle can be reused.
        let mut seq_p = seq.clone();
        seq_p.noisy = permute_rows(&seq.noisy, &perm);
        let out_p = model_p.forward(&seq_p, &mask_p).unwrap();
        let expected = permute_rows(&base, &perm);
        for (a, b) in expected.iter().zip(out_p.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ordering_and_permutation_helpers() {
        let mut c_dir = Array2::<u8>::zeros((3, 3));
        // Feature 2 influences features 0 and 1 (out-degree 2).
        c_dir[(0, 2)] = 1;
        c_dir[(1, 2)] = 1;
        // Feature 0 influences feature 1 (out-degree 1).
        c_dir[(1, 0)] = 1;
        let y = Array2::from_shape_fn((10, 3), |(r, c)| (r * (c + 1)) as f64);
        let order = ar_ordering(&c_dir, &y);
        assert_eq!(order, vec![2, 0, 1]);

        let x = Array2::from_shape_fn((3, 2), |(r, c)| (10 * r + c) as f64);
        let xp = permute_rows(&x, &order);
        assert_eq!(xp[(0, 0)], 20.0);
        assert_eq!(unpermute_rows(&xp, &order), x);

        let dep_p = permute_dep(&c_dir, &order);
        assert_eq!(dep_p[(2, 0)], c_dir[(1, 2)]);
    }

    #[test]
    fn metadata_off_uses_null_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut cfg = small_cfg();
        cfg.metadata_enabled = false;
        let model = DatModel::init(4, &cfg, &mut rng).unwrap();
        let m0 = Array2::from_shape_fn((4, cfg.token_dim), |_| standard_normal(&mut rng));
        let meta = Array1::from_shape_fn(cfg.meta_dim, |_| standard_normal(&mut rng));
        let b1 = model.build_bundle(&m0, &[0; 4], &meta).unwrap();
        let b2 = model
            .build_bundle(&m0, &[0; 4], &Array1::zeros(cfg.meta_dim))
            .unwrap();
        // Metadata token identical regardless of the embedding.
        assert_eq!(b1.condition_tokens.row(0), b2.condition_tokens.row(0));
        assert_eq!(b1.condition_tokens.row(0), model.null_meta.row(0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = small_cfg();
        let model = DatModel::init(4, &cfg, &mut rng).unwrap();
        let vae_cfg = VaeConfig {
            token_dim: 4,
            hidden: 8,
            ..VaeConfig::default()
        };
        let vae = VaeParams::init(4, &vae_cfg, &mut rng);
        let mut c_dir = Array2::<u8>::zeros((4, 4));
        c_dir[(1, 0)] = 1;
        let dep = DependencyMatrix::new(c_dir, Array2::zeros((4, 4))).unwrap();
        let ckpt = DatCheckpoint {
            model,
            vae,
            order: vec![0, 2, 1, 3],
            dep,
            timesteps: 50,
            decay_alpha: 0.8,
            dep_mode_or_as_written: true,
            seed: 11,
            config_hash: "abc123".into(),
            feature_ids: (0..4).map(|i| format!("f{i}")).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dat.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.order, ckpt.order);
        assert_eq!(loaded.dep, ckpt.dep);
        assert_eq!(loaded.config_hash, "abc123");
        assert_eq!(loaded.timesteps, 50);
        for ((n1, a), (n2, b)) in ckpt.model.arrays().iter().zip(loaded.model.arrays()) {
            assert_eq!(*n1, n2);
            assert_eq!(*a, &b.clone());
        }
        for ((_, a), (_, b)) in ckpt.vae.arrays().iter().zip(loaded.vae.arrays()) {
            assert_eq!(*a, b);
        }
    }
}
