//! Variational autoencoder over normalized sample rows. Each feature gets
//! its own affine token embedding; a shared mixing MLP produces the
//! posterior mean/log-variance grids and the decoder reconstructs the row
//! from the token grid. Used directly for the latent space and pretrained
//! across datasets for transfer.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, standard_normal, AbundanceMatrix};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{init_normal, sigmoid, Adam, Tape, Var};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Token width h of the latent grid.
    pub token_dim: usize,
    /// Hidden width of the shared mixing layers.
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            token_dim: 8,
            hidden: 128,
            lr: 1e-3,
            batch: 32,
            epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

/// Encoder/decoder weights. The latent grid has one token per input
/// feature: L = q rows of width h.
#[derive(Debug, Clone)]
pub struct VaeParams {
    pub q: usize,
    pub h: usize,
    pub hidden: usize,
    pub seed: u64,
    pub config_hash: String,
    // Encoder.
    pub embed_w: Array2<f64>,
    pub embed_b: Array2<f64>,
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array2<f64>,
    pub enc_w_mu: Array2<f64>,
    pub enc_b_mu: Array2<f64>,
    pub enc_w_lv: Array2<f64>,
    pub enc_b_lv: Array2<f64>,
    // Decoder.
    pub dec_u: Array2<f64>,
    pub dec_c: Array2<f64>,
    pub dec_w1: Array2<f64>,
    pub dec_b1: Array2<f64>,
    pub dec_w2: Array2<f64>,
    pub dec_b2: Array2<f64>,
}

impl VaeParams {
    pub fn init(q: usize, config: &VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.token_dim;
        let hidden = config.hidden;
        let qh = q * h;
        VaeParams {
            q,
            h,
            hidden,
            seed: config.seed,
            config_hash: String::new(),
            embed_w: init_normal(q, h, 1, rng),
            embed_b: Array2::zeros((q, h)),
            enc_w1: init_normal(qh, hidden, qh, rng),
            enc_b1: Array2::zeros((1, hidden)),
            enc_w_mu: init_normal(hidden, qh, hidden, rng),
            enc_b_mu: Array2::zeros((1, qh)),
            // Small log-variance head so training starts near a
            // deterministic encoder.
            enc_w_lv: init_normal(hidden, qh, hidden, rng).mapv(|v| v * 0.1),
            enc_b_lv: Array2::from_elem((1, qh), -2.0),
            dec_u: init_normal(q, h, h, rng),
            dec_c: Array2::zeros((1, q)),
            dec_w1: init_normal(qh, hidden, qh, rng),
            dec_b1: Array2::zeros((1, hidden)),
            dec_w2: init_normal(hidden, q, hidden, rng),
            dec_b2: Array2::zeros((1, q)),
        }
    }

    /// All learnable arrays in a fixed order (matches `leaves`).
    pub fn param_names() -> [&'static str; 14] {
        [
            "enc.embed_w",
            "enc.embed_b",
            "enc.w1",
            "enc.b1",
            "enc.w_mu",
            "enc.b_mu",
            "enc.w_lv",
            "enc.b_lv",
            "dec.u",
            "dec.c",
            "dec.w1",
            "dec.b1",
            "dec.w2",
            "dec.b2",
        ]
    }

    pub fn arrays(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let n = Self::param_names();
        vec![
            (n[0], &self.embed_w),
            (n[1], &self.embed_b),
            (n[2], &self.enc_w1),
            (n[3], &self.enc_b1),
            (n[4], &self.enc_w_mu),
            (n[5], &self.enc_b_mu),
            (n[6], &self.enc_w_lv),
            (n[7], &self.enc_b_lv),
            (n[8], &self.dec_u),
            (n[9], &self.dec_c),
            (n[10], &self.dec_w1),
            (n[11], &self.dec_b1),
            (n[12], &self.dec_w2),
            (n[13], &self.dec_b2),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w_mu,
            &mut self.enc_b_mu,
            &mut self.enc_w_lv,
            &mut self.enc_b_lv,
            &mut self.dec_u,
            &mut self.dec_c,
            &mut self.dec_w1,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
        ]
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, arr) in self.arrays() {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// Deterministic encoder mean path: x (width q) -> (mu, logvar), each
    /// q x h.
    pub fn encode(&self, x: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.len() != self.q {
            return Err(Error::shape(format!(
                "input width {} does not match encoder width {}",
                x.len(),
                self.q
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite encoder input"));
        }
        let tokens0 = self.feature_tokens(x);
        let flat = flatten_row(&tokens0);
        let hid = (flat.dot(&self.enc_w1) + &self.enc_b1).mapv(|v| v * sigmoid(v));
        let mu_flat = hid.dot(&self.enc_w_mu) + &self.enc_b_mu;
        let lv_flat = hid.dot(&self.enc_w_lv) + &self.enc_b_lv;
        let mu = &tokens0 + &unflatten_row(&mu_flat, self.q, self.h);
        let logvar = unflatten_row(&lv_flat, self.q, self.h);
        Ok((mu, logvar))
    }

    fn feature_tokens(&self, x: &[f64]) -> Array2<f64> {
        let mut tokens = self.embed_b.clone();
        for f in 0..self.q {
            for c in 0..self.h {
                tokens[(f, c)] += self.embed_w[(f, c)] * x[f];
            }
        }
        tokens
    }

    /// Decode a q x h token grid back to a width-q row.
    pub fn decode(&self, z: &Array2<f64>) -> Result<Array1<f64>> {
        if z.nrows() != self.q || z.ncols() != self.h {
            return Err(Error::shape(format!(
                "latent {:?} does not match decoder layout ({}, {})",
                z.shape(),
                self.q,
                self.h
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite latent"));
        }
        let mut readout = Array1::<f64>::zeros(self.q);
        for f in 0..self.q {
            let mut acc = self.dec_c[(0, f)];
            for c in 0..self.h {
                acc += self.dec_u[(f, c)] * z[(f, c)];
            }
            readout[f] = acc;
        }
        let flat = flatten_row(z);
        let hid = (flat.dot(&self.dec_w1) + &self.dec_b1).mapv(|v| v * sigmoid(v));
        let mix = hid.dot(&self.dec_w2) + &self.dec_b2;
        Ok(readout + &mix.row(0))
    }
}

fn flatten_row(a: &Array2<f64>) -> Array2<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    Array2::from_shape_vec((1, flat.len()), flat).expect("flatten")
}

fn unflatten_row(a: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    Array2::from_shape_vec((rows, cols), flat).expect("unflatten")
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &Array2<f64>, logvar: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    mu + &(logvar.mapv(|v| (v / 2.0).exp()) * eps)
}

/// Squared-error reconstruction plus KL against the standard normal:
/// returns (total, recon, kl).
pub fn vae_loss(
    x: &Array1<f64>,
    x_hat: &Array1<f64>,
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
) -> Result<(f64, f64, f64)> {
    if x.len() != x_hat.len() || mu.raw_dim() != logvar.raw_dim() {
        return Err(Error::shape("vae_loss shape mismatch"));
    }
    if x.iter().chain(x_hat.iter()).any(|v| !v.is_finite())
        || mu.iter().chain(logvar.iter()).any(|v| !v.is_finite())
    {
        return Err(Error::validation("non-finite loss input"));
    }
    let recon: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let kl: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum();
    Ok((recon + kl, recon, kl))
}

/// Tape leaves for one training step, in `arrays_mut` order.
struct VaeLeaves {
    vars: Vec<Var>,
}

fn param_leaves(tape: &mut Tape, params: &VaeParams) -> VaeLeaves {
    let vars = params
        .arrays()
        .into_iter()
        .map(|(_, arr)| tape.leaf(arr.clone()))
        .collect();
    VaeLeaves { vars }
}

/// Build the per-sample loss subgraph; returns (total, recon, kl) vars.
fn row_loss_graph(
    tape: &mut Tape,
    leaves: &VaeLeaves,
    x: &[f64],
    eps: &Array2<f64>,
    q: usize,
    h: usize,
) -> (Var, Var, Var) {
    let [embed_w, embed_b, enc_w1, enc_b1, enc_w_mu, enc_b_mu, enc_w_lv, enc_b_lv, dec_u, dec_c, dec_w1, dec_b1, dec_w2, dec_b2] =
        leaves.vars[..14].try_into().expect("14 vae params");
    let x_col = tape.leaf(Array2::from_shape_vec((q, 1), x.to_vec()).expect("x column"));
    let ones_row = tape.leaf(Array2::ones((1, h)));
    let x_bcast = tape.matmul(x_col, ones_row);
    let scaled = tape.mul(embed_w, x_bcast);
    let tokens0 = tape.add(scaled, embed_b);
    let flat = tape.reshape(tokens0, 1, q * h);
    let hid_pre = tape.linear(flat, enc_w1, enc_b1);
    let hid = tape.silu(hid_pre);
    let mu_flat = tape.linear(hid, enc_w_mu, enc_b_mu);
    let mu_mix = tape.reshape(mu_flat, q, h);
    let mu = tape.add(tokens0, mu_mix);
    let lv_flat = tape.linear(hid, enc_w_lv, enc_b_lv);
    let logvar = tape.reshape(lv_flat, q, h);

    let eps_leaf = tape.leaf(eps.clone());
    let half_lv = tape.affine(logvar, 0.5, 0.0);
    let sigma = tape.exp(half_lv);
    let noise = tape.mul(sigma, eps_leaf);
    let z = tape.add(mu, noise);

    // Decoder: per-feature readout plus shared mixing.
    let prod = tape.mul(dec_u, z);
    let ones_col = tape.leaf(Array2::ones((h, 1)));
    let read_col = tape.matmul(prod, ones_col);
    let read_row = tape.transpose(read_col);
    let read = tape.add_row(read_row, dec_c);
    let z_flat = tape.reshape(z, 1, q * h);
    let dhid_pre = tape.linear(z_flat, dec_w1, dec_b1);
    let dhid = tape.silu(dhid_pre);
    let mix = tape.linear(dhid, dec_w2, dec_b2);
    let x_hat = tape.add(read, mix);

    let x_row = tape.leaf(Array2::from_shape_vec((1, q), x.to_vec()).expect("x row"));
    let diff = tape.sub(x_row, x_hat);
    let sq = tape.mul(diff, diff);
    let recon = tape.sum_all(sq);

    // KL: 0.5 * sum(exp(lv) - 1 - lv + mu^2).
    let e_lv = tape.exp(logvar);
    let e_lv_m1 = tape.affine(e_lv, 1.0, -1.0);
    let inner = tape.sub(e_lv_m1, logvar);
    let mu_sq = tape.mul(mu, mu);
    let kl_terms = tape.add(inner, mu_sq);
    let kl_sum = tape.sum_all(kl_terms);
    let kl = tape.affine(kl_sum, 0.5, 0.0);

    let total = tape.add(recon, kl);
    (total, recon, kl)
}

/// One epoch record of VAE training.
#[derive(Debug, Clone, Serialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Train (or fine-tune) the VAE on normalized rows. Early-stops on the
/// validation total loss; returns the best parameters and the epoch log.
pub fn train_vae(
    rows: &Array2<f64>,
    mut params: VaeParams,
    config: &VaeConfig,
) -> Result<(VaeParams, Vec<VaeEpochLog>)> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::validation("need at least two rows to train"));
    }
    let (q, h) = (params.q, params.h);
    if rows.ncols() != q {
        return Err(Error::shape(format!(
            "rows have width {}, encoder expects {q}",
            rows.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[config.seed, 0x7ae]));
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let n_val = (n / 10).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut opt = Adam::new(config.lr);
    let mut best: Option<(f64, VaeParams)> = None;
    let mut log = Vec::new();
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let mut eorder = train_idx.to_vec();
        shuffle(&mut eorder, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in eorder.chunks(config.batch.max(1)) {
            let mut tape = Tape::new();
            let leaves = param_leaves(&mut tape, &params);
            let mut total: Option<Var> = None;
            for &r in chunk {
                let x: Vec<f64> = rows.row(r).to_vec();
                let eps = Array2::from_shape_fn((q, h), |_| standard_normal(&mut rng));
                let (row_total, _, _) = row_loss_graph(&mut tape, &leaves, &x, &eps, q, h);
                total = Some(match total {
                    Some(t) => tape.add(t, row_total),
                    None => row_total,
                });
            }
            let total = total.expect("non-empty chunk");
            let loss = tape.affine(total, 1.0 / chunk.len() as f64, 0.0);
            let loss_val = tape.value(loss)[(0, 0)];
            if !loss_val.is_finite() || loss_val > 1e9 {
                return Err(Error::Divergence(format!(
                    "vae loss {loss_val} at epoch {epoch}"
                )));
            }
            tape.backward(loss);
            let grads: Vec<Array2<f64>> =
                leaves.vars.iter().map(|v| tape.grad(*v).clone()).collect();
            let mut refs = params.arrays_mut();
            opt.step(&mut refs, &grads, config.lr);
            epoch_loss += loss_val;
            batches += 1;
        }
        params.assert_finite()?;
        let val_loss = mean_eval_loss(&params, rows, val_idx, config.seed)?;
        log.push(VaeEpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            lr: config.lr,
            seed: config.seed,
        });
        let improved = best.as_ref().map(|(b, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, best_params) = best.unwrap_or((f64::INFINITY, params));
    Ok((best_params, log))
}

/// Validation loss with a fixed eps stream so epochs are comparable.
fn mean_eval_loss(
    params: &VaeParams,
    rows: &Array2<f64>,
    idx: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[seed, 0x7a1]));
    let mut total = 0.0;
    for &r in idx {
        let x: Vec<f64> = rows.row(r).to_vec();
        let (mu, lv) = params.encode(&x)?;
        let eps = Array2::from_shape_fn((params.q, params.h), |_| standard_normal(&mut rng));
        let z = reparameterize(&mu, &lv, &eps);
        let x_hat = params.decode(&z)?;
        let (t, _, _) = vae_loss(&Array1::from_vec(x), &x_hat, &mu, &lv)?;
        total += t;
    }
    Ok(total / idx.len().max(1) as f64)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Cross-dataset pretraining: normalize each dataset, align features to the
/// shared intersection (first dataset's order), stack rows and train. The
/// fine-tuning target must not appear among the pretraining datasets.
pub fn pretrain(
    datasets: &[(String, AbundanceMatrix)],
    target: Option<(&str, &[String])>,
    config: &VaeConfig,
) -> Result<(VaeParams, Vec<VaeEpochLog>, Vec<String>)> {
    if datasets.is_empty() {
        return Err(Error::validation("pretraining needs at least one dataset"));
    }
    if let Some((target_name, target_samples)) = target {
        for (name, m) in datasets {
            if name == target_name {
                return Err(Error::Leakage(format!(
                    "target dataset {target_name:?} appears in the pretraining list"
                )));
            }
            let overlap = m
                .sample_ids
                .iter()
                .filter(|id| target_samples.contains(id))
                .count();
            if overlap > 0 {
                return Err(Error::Leakage(format!(
                    "pretraining dataset {name:?} shares {overlap} sample ids with the target"
                )));
            }
        }
    }

    let first_features = &datasets[0].1.feature_ids;
    let mut common: Vec<String> = first_features
        .iter()
        .filter(|f| datasets.iter().all(|(_, m)| m.feature_ids.contains(f)))
        .cloned()
        .collect();
    if common.is_empty() {
        let mut missing: Vec<String> = Vec::new();
        for f in first_features {
            if !datasets.iter().all(|(_, m)| m.feature_ids.contains(f)) {
                missing.push(f.clone());
            }
        }
        missing.truncate(10);
        return Err(Error::validation(format!(
            "no shared features across pretraining datasets; first mismatches: {missing:?}"
        )));
    }
    common.sort();
    common.dedup();
    // Keep the first dataset's ordering for the aligned features.
    let ordered: Vec<String> = first_features
        .iter()
        .filter(|f| common.contains(f))
        .cloned()
        .collect();

    let mut stacked_rows: Vec<Array2<f64>> = Vec::new();
    for (_, m) in datasets {
        let y = normalize(m)?;
        let col_of: std::collections::HashMap<&str, usize> = y
            .feature_ids
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        let mut sub = Array2::<f64>::zeros((y.n_samples(), ordered.len()));
        for (new_c, f) in ordered.iter().enumerate() {
            let c = col_of[f.as_str()];
            sub.column_mut(new_c).assign(&y.values.column(c));
        }
        stacked_rows.push(sub);
    }
    let views: Vec<_> = stacked_rows.iter().map(|a| a.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::shape(format!("row stacking: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = VaeParams::init(ordered.len(), config, &mut rng);
    if config.epochs == 0 {
        return Ok((init, Vec::new(), ordered));
    }
    let (params, log) = train_vae(&all, init, config)?;
    Ok((params, log, ordered))
}

/// Transfer pretrained parameters into a model expecting input width `q`;
/// the copy is bit-exact.
pub fn transfer(params: &VaeParams, q: usize, token_dim: usize) -> Result<VaeParams> {
    if params.q != q || params.h != token_dim {
        return Err(Error::shape(format!(
            "checkpoint layout (q={}, h={}) does not match model (q={q}, h={token_dim})",
            params.q, params.h
        )));
    }
    Ok(params.clone())
}

#[derive(Serialize, Deserialize)]
struct ArrayData {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct VaeCheckpointFile {
    q: usize,
    l: usize,
    h: usize,
    hidden: usize,
    seed: u64,
    config_hash: String,
    feature_ids: Vec<String>,
    arrays: BTreeMap<String, ArrayData>,
}

pub(crate) fn array_to_data(a: &Array2<f64>) -> (usize, usize, Vec<f64>) {
    (a.nrows(), a.ncols(), a.iter().copied().collect())
}

pub(crate) fn data_to_array(rows: usize, cols: usize, data: Vec<f64>) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::validation(format!("array shape in checkpoint: {e}")))
}

/// Save a single-file checkpoint with named `enc.*` / `dec.*` arrays, the
/// layout descriptor, config hash and seed.
pub fn save_checkpoint(
    params: &VaeParams,
    feature_ids: &[String],
    path: &Path,
) -> Result<()> {
    let mut arrays = BTreeMap::new();
    for (name, arr) in params.arrays() {
        let (rows, cols, data) = array_to_data(arr);
        arrays.insert(name.to_string(), ArrayData { rows, cols, data });
    }
    let file = VaeCheckpointFile {
        q: params.q,
        l: params.q,
        h: params.h,
        hidden: params.hidden,
        seed: params.seed,
        config_hash: params.config_hash.clone(),
        feature_ids: feature_ids.to_vec(),
        arrays,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::validation(format!("checkpoint encode: {e}")))?;
    let mut w = crate::io::FileWriter::create(path)?;
    w.write_line(&json)?;
    w.finish()
}

pub fn load_checkpoint(path: &Path) -> Result<(VaeParams, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: VaeCheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        message: format!("checkpoint decode: {e}"),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(file.seed);
    let cfg = VaeConfig {
        token_dim: file.h,
        hidden: file.hidden,
        seed: file.seed,
        ..VaeConfig::default()
    };
    let mut params = VaeParams::init(file.q, &cfg, &mut rng);
    params.config_hash = file.config_hash;
    let names = VaeParams::param_names();
    {
        let mut refs = params.arrays_mut();
        for (i, name) in names.iter().enumerate() {
            let entry = file
                .arrays
                .get(*name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing array {name}")))?;
            *refs[i] = data_to_array(entry.rows, entry.cols, entry.data.clone())?;
        }
    }
    params.assert_finite()?;
    Ok((params, file.feature_ids))
}
