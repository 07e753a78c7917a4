//! Diffusion machinery: cosine noise schedule, closed-form forward process,
//! timestep-selection plans (full / fractional / adaptive), conditioning
//! construction, and the autoregressive mixing of diffusion steps with AR
//! token segments for both training and ancestral/skip sampling.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::standard_normal;
use crate::error::{Error, Result};
use crate::io::{self, FileWriter};
use crate::mask::{ArSplit, AttentionMask};

/// Cosine variance schedule: strictly increasing betas in (0, 0.999],
/// strictly decreasing cumulative alpha-bar products in (0, 1].
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    /// T.
    pub timesteps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1` by construction.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    /// Audit dump: CSV `t,beta,alpha_bar`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = FileWriter::create(path)?;
        w.write_line("t,beta,alpha_bar")?;
        for t in 1..=self.timesteps {
            w.write_line(&format!(
                "{t},{},{}",
                io::fmt_f64(self.beta(t)),
                io::fmt_f64(self.alpha_bar(t))
            ))?;
        }
        w.finish()
    }
}

const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;

/// Squared-cosine alpha-bar curve with offset 0.008; betas derived from the
/// curve and clipped to (1e-8, 0.999], alpha-bars recomputed from the
/// clipped betas so the invariants hold exactly.
pub fn cosine_schedule(timesteps: usize) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    let offset = 0.008;
    let f = |t: f64| {
        let angle =
            ((t / timesteps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        angle.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut betas = Vec::with_capacity(timesteps);
    let mut prev_bar = 1.0;
    for t in 1..=timesteps {
        let bar = f(t as f64) / f0;
        let beta = (1.0 - bar / prev_bar).clamp(BETA_MIN, BETA_MAX);
        betas.push(beta);
        prev_bar = bar;
    }
    if timesteps > 1 {
        for w in betas.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::validation(format!(
                    "cosine schedule betas not strictly increasing at T={timesteps}"
                )));
            }
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for &a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    for (i, w) in alpha_bars.windows(2).enumerate() {
        if w[1] >= w[0] || w[1] <= 0.0 {
            return Err(Error::validation(format!(
                "alpha-bar not strictly decreasing at t={}",
                i + 2
            )));
        }
    }
    Ok(DiffusionSchedule {
        timesteps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward jump: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// `t = 0` is the identity boundary.
pub fn forward_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    if t > sched.timesteps {
        return Err(Error::config(format!(
            "timestep {t} outside 0..={}",
            sched.timesteps
        )));
    }
    if x0.raw_dim() != eps.raw_dim() {
        return Err(Error::shape("x0 and eps must have the same shape"));
    }
    let ab = sched.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Algebraic inversion of `forward_sample` given the true noise.
pub fn invert_x0(
    x_t: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Array2<f64> {
    let ab = sched.alpha_bar(t);
    (x_t - &(eps * (1.0 - ab).sqrt())) / ab.sqrt()
}

/// One ancestral reverse step t -> t-1 with posterior variance
/// `beta_t (1 - abar_{t-1}) / (1 - abar_t)`; no noise is added at t = 1.
pub fn reverse_step(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    eps_draw: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    if t == 0 || t > sched.timesteps {
        return Err(Error::config(format!(
            "reverse step timestep {t} outside 1..={}",
            sched.timesteps
        )));
    }
    let beta = sched.beta(t);
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let mean = (x_t - &(eps_hat * (beta / (1.0 - ab_t).sqrt()))) / sched.alpha(t).sqrt();
    if t == 1 {
        return Ok(mean);
    }
    let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
    Ok(mean + eps_draw * var.sqrt())
}

/// Deterministic skip step between plan timesteps (eta = 0): reconstruct
/// x0 from the predicted noise, then re-noise to `t_to` (0 = clean).
pub fn ddim_skip_step(
    x_t: &Array2<f64>,
    t_from: usize,
    t_to: usize,
    eps_hat: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Array2<f64> {
    let x0_hat = invert_x0(x_t, t_from, eps_hat, sched);
    if t_to == 0 {
        return x0_hat;
    }
    let ab = sched.alpha_bar(t_to);
    &x0_hat * ab.sqrt() + eps_hat * (1.0 - ab).sqrt()
}

/// Timestep selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Full,
    Fractional,
    Adaptive,
}

impl SamplingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SamplingMode::Full),
            "fractional" => Ok(SamplingMode::Fractional),
            "adaptive" => Ok(SamplingMode::Adaptive),
            other => Err(Error::config(format!("unknown sampling mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingMode::Full => "full",
            SamplingMode::Fractional => "fractional",
            SamplingMode::Adaptive => "adaptive",
        }
    }
}

/// Divisors called out as standard for fractional sampling; others are
/// permitted but callers should warn.
pub const STANDARD_DIVISORS: [usize; 4] = [2, 3, 4, 20];

/// Ordered timesteps per AR step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    pub mode: SamplingMode,
    pub divisor: usize,
    /// One ascending list per AR step.
    pub steps: Vec<Vec<usize>>,
}

impl TimestepPlan {
    /// Dump: one line per AR step listing its timesteps.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = FileWriter::create(path)?;
        for (g, list) in self.steps.iter().enumerate() {
            let cells: Vec<String> = list.iter().map(|t| t.to_string()).collect();
            w.write_line(&format!("ar_step {g}: {}", cells.join(",")))?;
        }
        w.finish()
    }
}

/// `count` evenly spaced timesteps in [1, T], ending at T.
fn spaced_steps(count: usize, timesteps: usize) -> Vec<usize> {
    (0..count).map(|j| ((j + 1) * timesteps) / count).collect()
}

/// Build the per-AR-step timestep plan. Full uses every timestep;
/// fractional uses `floor(T/n)` evenly spaced steps per AR step; adaptive
/// splits the fractional budget across AR steps proportionally to segment
/// size (minimum one step each, remainder to the last segment).
pub fn select_timesteps(
    sched: &DiffusionSchedule,
    mode: SamplingMode,
    divisor: usize,
    split: &ArSplit,
) -> Result<TimestepPlan> {
    let t_total = sched.timesteps;
    let n_steps = split.n_steps();
    let steps = match mode {
        SamplingMode::Full => vec![spaced_steps(t_total, t_total); n_steps],
        SamplingMode::Fractional => {
            if divisor == 0 || divisor > t_total {
                return Err(Error::config(format!(
                    "fractional divisor {divisor} outside 1..={t_total}"
                )));
            }
            vec![spaced_steps(t_total / divisor, t_total); n_steps]
        }
        SamplingMode::Adaptive => {
            if divisor == 0 || divisor > t_total {
                return Err(Error::config(format!(
                    "adaptive divisor {divisor} outside 1..={t_total}"
                )));
            }
            let budget = t_total / divisor;
            let total_tokens = split.total;
            let mut allocated = 0usize;
            let mut lists = Vec::with_capacity(n_steps);
            for (g, &sz) in split.sizes.iter().enumerate() {
                let share = if g + 1 == n_steps {
                    budget.saturating_sub(allocated).max(1)
                } else {
                    ((budget * sz) / total_tokens).max(1)
                };
                allocated += share;
                lists.push(spaced_steps(share.min(t_total), t_total));
            }
            lists
        }
    };
    Ok(TimestepPlan {
        mode,
        divisor,
        steps,
    })
}

/// Learned projections that fuse the metadata embedding and the pooled
/// observed latent into condition tokens.
#[derive(Debug, Clone)]
pub struct ConditionProjector {
    pub w_meta: Array2<f64>,
    pub b_meta: Array2<f64>,
    pub w_pool: Array2<f64>,
    pub b_pool: Array2<f64>,
}

impl ConditionProjector {
    pub fn new(meta_dim: usize, token_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ConditionProjector {
            w_meta: crate::nn::init_normal(meta_dim, token_dim, meta_dim, rng),
            b_meta: Array2::zeros((1, token_dim)),
            w_pool: crate::nn::init_normal(token_dim, token_dim, token_dim, rng),
            b_pool: Array2::zeros((1, token_dim)),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w_meta.ncols()
    }

    pub fn meta_dim(&self) -> usize {
        self.w_meta.nrows()
    }
}

/// Conditioning signal for one sample: the masked observed latent, the raw
/// metadata embedding, and the fused condition tokens.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// L x h latent with masked token rows zeroed.
    pub observed_latent: Array2<f64>,
    pub meta_embedding: Array1<f64>,
    /// c x h projected condition tokens (c = 2).
    pub condition_tokens: Array2<f64>,
}

impl ConditionBundle {
    pub fn n_condition_tokens(&self) -> usize {
        self.condition_tokens.nrows()
    }
}

/// Apply the observed-entry mask to the latent grid: row l of the result is
/// zero when `token_mask[l] == 1`, else `m0[l, :]`.
pub fn mask_latent(m0: &Array2<f64>, token_mask: &[u8]) -> Result<Array2<f64>> {
    if m0.nrows() != token_mask.len() {
        return Err(Error::shape(format!(
            "latent has {} token rows, mask has {}",
            m0.nrows(),
            token_mask.len()
        )));
    }
    let mut out = m0.clone();
    for (l, &m) in token_mask.iter().enumerate() {
        if m == 1 {
            out.row_mut(l).fill(0.0);
        }
    }
    Ok(out)
}

/// Build the conditioning bundle: masked latent per the observed-entry rule
/// plus two condition tokens (projected metadata embedding; pooled
/// projection of the observed latent).
pub fn build_condition(
    m0: &Array2<f64>,
    token_mask: &[u8],
    meta_embedding: &Array1<f64>,
    proj: &ConditionProjector,
) -> Result<ConditionBundle> {
    if meta_embedding.len() != proj.meta_dim() {
        return Err(Error::shape(format!(
            "metadata embedding width {} does not match projection input {}",
            meta_embedding.len(),
            proj.meta_dim()
        )));
    }
    if m0.ncols() != proj.token_dim() {
        return Err(Error::shape(format!(
            "latent token width {} does not match projection width {}",
            m0.ncols(),
            proj.token_dim()
        )));
    }
    let observed = mask_latent(m0, token_mask)?;
    let meta_row =
        meta_embedding.view().insert_axis(Axis(0)).dot(&proj.w_meta) + &proj.b_meta;
    let pooled = (observed.sum_axis(Axis(0)) / observed.nrows() as f64).insert_axis(Axis(0));
    let pool_row = pooled.dot(&proj.w_pool) + &proj.b_pool;
    let mut condition_tokens = Array2::<f64>::zeros((2, proj.token_dim()));
    condition_tokens.row_mut(0).assign(&meta_row.row(0));
    condition_tokens.row_mut(1).assign(&pool_row.row(0));
    Ok(ConditionBundle {
        observed_latent: observed,
        meta_embedding: meta_embedding.clone(),
        condition_tokens,
    })
}

/// Token sequence handed to a denoiser: condition, visible-clean and noisy
/// sample blocks, all at token width h, time embedding already added to the
/// noisy block.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub condition: Array2<f64>,
    pub visible: Array2<f64>,
    pub noisy: Array2<f64>,
    pub t: usize,
}

impl AssembledSequence {
    pub fn seq_len(&self) -> usize {
        self.condition.nrows() + self.visible.nrows() + self.noisy.nrows()
    }
}

/// Assemble the [condition | visible | noisy] sequence for one sample.
/// `visible_rows` must already contain the clean tokens of earlier AR
/// segments (zeros elsewhere); the sinusoidal time embedding is broadcast
/// onto the noisy block here.
pub fn assemble_sequence(
    cond: &ConditionBundle,
    visible_rows: Array2<f64>,
    noisy: Array2<f64>,
    t: usize,
) -> AssembledSequence {
    let h = noisy.ncols();
    let te = crate::dat::time_embedding(t.max(1), h);
    let noisy = noisy + &te.insert_axis(Axis(0));
    AssembledSequence {
        condition: cond.condition_tokens.clone(),
        visible: visible_rows,
        noisy,
        t,
    }
}

/// A denoiser that predicts the injected noise for the sample-block rows.
pub trait NoisePredictor {
    fn predict_eps(&self, seq: &AssembledSequence, mask: &AttentionMask) -> Array2<f64>;
}

/// One training example: the clean target latent (AR token order) and its
/// conditioning bundle.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Array2<f64>,
    pub cond: ConditionBundle,
}

/// Draw (AR step index, timestep) for one training batch.
pub fn draw_step(
    split: &ArSplit,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let s_idx = rng.random_range(0..split.n_steps());
    let t = rng.random_range(1..=sched.timesteps);
    (s_idx, t)
}

/// Noise every sample token at timestep `t` and return the assembled
/// sequence plus the injected noise. Earlier segments' clean tokens fill the
/// visible block; later visible slots stay zero (the mask makes them
/// non-influential).
pub fn assemble_training_step(
    example: &TrainExample,
    split: &ArSplit,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(AssembledSequence, Array2<f64>)> {
    let (l, h) = (example.x0.nrows(), example.x0.ncols());
    if split.total != l {
        return Err(Error::shape(format!(
            "split covers {} tokens, latent has {l}",
            split.total
        )));
    }
    let eps = Array2::from_shape_fn((l, h), |_| standard_normal(rng));
    let x_t = forward_sample(&example.x0, t, &eps, sched)?;
    let v = l - split.sizes[split.n_steps() - 1];
    let mut visible = Array2::<f64>::zeros((v, h));
    if v > 0 {
        visible.assign(&example.x0.slice(ndarray::s![0..v, ..]));
    }
    let seq = assemble_sequence(&example.cond, visible, x_t, t);
    Ok((seq, eps))
}

/// One loss evaluation of the AR-diffusion objective: draw an AR step and a
/// timestep, noise the sample tokens, and return the mean squared error
/// between predicted and injected noise over the drawn segment's tokens.
pub fn ar_diffusion_train_step<M: NoisePredictor>(
    model: &M,
    batch: &[TrainExample],
    split: &ArSplit,
    mask: &AttentionMask,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation("empty training batch"));
    }
    let (s_idx, t) = draw_step(split, sched, rng);
    let seg = split.segment(s_idx);
    let mut total = 0.0;
    for example in batch {
        let (seq, eps) = assemble_training_step(example, split, t, sched, rng)?;
        let eps_hat = model.predict_eps(&seq, mask);
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for r in seg.clone() {
            for c in 0..eps.ncols() {
                let d = eps_hat[(r, c)] - eps[(r, c)];
                sum_sq += d * d;
                count += 1;
            }
        }
        total += sum_sq / count as f64;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at ar step {s_idx}, t={t}"
        )));
    }
    Ok(loss)
}

/// Autoregressive sampling: segments are denoised in order, each initialized
/// from standard normal noise and conditioned on condition tokens plus the
/// clean tokens finalized by earlier segments. Full mode runs ancestral
/// steps; fractional/adaptive modes skip deterministically between plan
/// steps. Per-segment rng streams are derived from one base draw so later
/// segments never perturb earlier ones.
pub fn ar_diffusion_sample<M: NoisePredictor>(
    model: &M,
    cond: &ConditionBundle,
    split: &ArSplit,
    plan: &TimestepPlan,
    mask: &AttentionMask,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if plan.steps.len() != split.n_steps() {
        return Err(Error::shape(format!(
            "plan has {} AR steps, split has {}",
            plan.steps.len(),
            split.n_steps()
        )));
    }
    let l = split.total;
    let h = cond.condition_tokens.ncols();
    let v = l - split.sizes[split.n_steps() - 1];
    let base_seed: u64 = rng.random();
    let mut x0_final = Array2::<f64>::zeros((l, h));

    for g in 0..split.n_steps() {
        let seg = split.segment(g);
        let seg_len = seg.len();
        let mut seg_rng = ChaCha8Rng::seed_from_u64(io::mix_seed(&[base_seed, g as u64]));
        let mut x_cur = Array2::from_shape_fn((seg_len, h), |_| standard_normal(&mut seg_rng));
        let steps = &plan.steps[g];

        for idx in (0..steps.len()).rev() {
            let t = steps[idx];
            // Sample block: current segment's state; other rows are
            // non-influential under the mask.
            let mut noisy = Array2::<f64>::zeros((l, h));
            noisy.slice_mut(ndarray::s![seg.clone(), ..]).assign(&x_cur);
            let mut visible = Array2::<f64>::zeros((v, h));
            if v > 0 {
                let filled = seg.start.min(v);
                if filled > 0 {
                    visible
                        .slice_mut(ndarray::s![0..filled, ..])
                        .assign(&x0_final.slice(ndarray::s![0..filled, ..]));
                }
            }
            let seq = assemble_sequence(cond, visible, noisy, t);
            let eps_hat_full = model.predict_eps(&seq, mask);
            let eps_hat = eps_hat_full.slice(ndarray::s![seg.clone(), ..]).to_owned();

            match plan.mode {
                SamplingMode::Full => {
                    let eps_draw =
                        Array2::from_shape_fn((seg_len, h), |_| standard_normal(&mut seg_rng));
                    x_cur = reverse_step(&x_cur, t, &eps_hat, &eps_draw, sched)?;
                }
                SamplingMode::Fractional | SamplingMode::Adaptive => {
                    let t_to = if idx > 0 { steps[idx - 1] } else { 0 };
                    x_cur = ddim_skip_step(&x_cur, t, t_to, &eps_hat, sched);
                }
            }
        }
        x0_final
            .slice_mut(ndarray::s![seg.clone(), ..])
            .assign(&x_cur);
    }
    Ok(x0_final)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_attention_mask, DepMode};

    #[test]
    fn schedule_boundary_identities() {
        let sched = cosine_schedule(1000).unwrap();
        assert_eq!(sched.alpha_bar(0), 1.0);
        assert!(sched.alpha_bar(1000) < 1e-3);
        for t in 2..=1000 {
            assert!(sched.beta(t) > sched.beta(t - 1));
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            assert!(sched.snr(t) < sched.snr(t - 1));
        }
        for t in 1..=1000 {
            let b = sched.beta(t);
            assert!(b > 0.0 && b <= 0.999);
            let ab = sched.alpha_bar(t);
            assert!(ab > 0.0 && ab < 1.0);
        }
        assert!(cosine_schedule(0).is_err());
    }

    #[test]
    fn forward_boundaries() {
        let sched = cosine_schedule(100).unwrap();
        let x0 = Array2::from_elem((2, 3), 1.5);
        let eps = Array2::from_elem((2, 3), 0.7);
        let identity = forward_sample(&x0, 0, &eps, &sched).unwrap();
        assert_eq!(identity, x0);
        let zero_eps = Array2::zeros((2, 3));
        let xt = forward_sample(&x0, 10, &zero_eps, &sched).unwrap();
        let expect = &x0 * sched.alpha_bar(10).sqrt();
        assert!((xt[(0, 0)] - expect[(0, 0)]).abs() < 1e-15);
        assert!(forward_sample(&x0, 101, &eps, &sched).is_err());
    }

    #[test]
    fn x0_inversion_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = cosine_schedule(200).unwrap();
        for t in [1, 50, 123, 200] {
            let x0 = Array2::from_shape_fn((3, 4), |_| standard_normal(&mut rng));
            let eps = Array2::from_shape_fn((3, 4), |_| standard_normal(&mut rng));
            let xt = forward_sample(&x0, t, &eps, &sched).unwrap();
            let back = invert_x0(&xt, t, &eps, &sched);
            for (a, b) in x0.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn iterated_single_steps_match_closed_form_moments() {
        // Chaining the one-step transition t times vs the closed-form jump.
        let sched = cosine_schedule(50).unwrap();
        let t_target = 30;
        let x0 = 2.0;
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let mut x = x0;
            for t in 1..=t_target {
                let beta = sched.beta(t);
                x = (1.0 - beta).sqrt() * x + beta.sqrt() * standard_normal(&mut rng);
            }
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let ab = sched.alpha_bar(t_target);
        let expect_mean = ab.sqrt() * x0;
        let expect_var = 1.0 - ab;
        assert!(
            (mean - expect_mean).abs() / expect_mean.abs() < 0.02,
            "mean {mean} vs {expect_mean}"
        );
        assert!(
            (var - expect_var).abs() / expect_var < 0.02,
            "var {var} vs {expect_var}"
        );
    }

    #[test]
    fn plan_counts_and_subset_invariants() {
        let sched = cosine_schedule(1000).unwrap();
        let split = ArSplit::from_sizes(vec![2, 2, 3]).unwrap();
        let full = select_timesteps(&sched, SamplingMode::Full, 1, &split).unwrap();
        assert_eq!(full.steps[0].len(), 1000);
        assert_eq!(full.steps[0][0], 1);
        assert_eq!(*full.steps[0].last().unwrap(), 1000);

        let frac = select_timesteps(&sched, SamplingMode::Fractional, 2, &split).unwrap();
        assert_eq!(frac.steps[0].len(), 500);
        let full_set: std::collections::HashSet<usize> = full.steps[0].iter().copied().collect();
        assert!(frac.steps[0].iter().all(|t| full_set.contains(t)));
        assert!(frac.steps[0].windows(2).all(|w| w[0] < w[1]));

        // n = 1 reduces fractional to full.
        let frac1 = select_timesteps(&sched, SamplingMode::Fractional, 1, &split).unwrap();
        assert_eq!(frac1.steps[0], full.steps[0]);

        let adaptive = select_timesteps(&sched, SamplingMode::Adaptive, 4, &split).unwrap();
        let budgets: Vec<usize> = adaptive.steps.iter().map(|l| l.len()).collect();
        assert_eq!(budgets, vec![71, 71, 108]);

        assert!(select_timesteps(&sched, SamplingMode::Fractional, 1001, &split).is_err());
    }

    #[test]
    fn condition_masking_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = ConditionProjector::new(4, 3, &mut rng);
        let m0 = Array2::from_shape_fn((5, 3), |_| standard_normal(&mut rng));
        let meta = Array1::from_shape_fn(4, |_| standard_normal(&mut rng));

        let all_masked = build_condition(&m0, &[1, 1, 1, 1, 1], &meta, &proj).unwrap();
        assert!(all_masked.observed_latent.iter().all(|&v| v == 0.0));

        let none_masked = build_condition(&m0, &[0, 0, 0, 0, 0], &meta, &proj).unwrap();
        assert_eq!(none_masked.observed_latent, m0);
        assert_eq!(none_masked.n_condition_tokens(), 2);

        // Masking is idempotent.
        let once = mask_latent(&m0, &[1, 0, 1, 0, 0]).unwrap();
        let twice = mask_latent(&once, &[1, 0, 1, 0, 0]).unwrap();
        assert_eq!(once, twice);

        let bad_meta = Array1::zeros(7);
        assert!(build_condition(&m0, &[0; 5], &bad_meta, &proj).is_err());
    }

    /// Recovers the injected noise exactly from x_t and the known x0.
    struct OracleEps {
        x0: Array2<f64>,
        sched: DiffusionSchedule,
    }

    impl NoisePredictor for OracleEps {
        fn predict_eps(&self, seq: &AssembledSequence, _mask: &AttentionMask) -> Array2<f64> {
            let h = self.x0.ncols();
            let te = crate::dat::time_embedding(seq.t.max(1), h);
            let x_t = &seq.noisy - &te.insert_axis(Axis(0));
            let ab = self.sched.alpha_bar(seq.t);
            (&x_t - &(&self.x0 * ab.sqrt())) / (1.0 - ab).sqrt()
        }
    }

    struct ZeroEps;

    impl NoisePredictor for ZeroEps {
        fn predict_eps(&self, seq: &AssembledSequence, _mask: &AttentionMask) -> Array2<f64> {
            Array2::zeros(seq.noisy.raw_dim())
        }
    }

    fn toy_batch(l: usize, h: usize, seed: u64) -> (Vec<TrainExample>, ConditionBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = ConditionProjector::new(2, h, &mut rng);
        let x0 = Array2::from_shape_fn((l, h), |_| standard_normal(&mut rng));
        let meta = Array1::zeros(2);
        let cond = build_condition(&x0, &vec![0u8; l], &meta, &proj).unwrap();
        (
            vec![TrainExample {
                x0: x0.clone(),
                cond: cond.clone(),
            }],
            cond,
        )
    }

    #[test]
    fn train_step_oracle_and_zero_losses() {
        let sched = cosine_schedule(100).unwrap();
        let split = ArSplit::from_sizes(vec![3, 3]).unwrap();
        let mask = build_attention_mask(6, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let (batch, _) = toy_batch(6, 4, 9);

        let oracle = OracleEps {
            x0: batch[0].x0.clone(),
            sched: sched.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss =
            ar_diffusion_train_step(&oracle, &batch, &split, &mask, &sched, &mut rng).unwrap();
        assert!(loss < 1e-20, "oracle loss {loss}");

        // Zero predictor: loss about mean(eps^2) ~ 1 over many draws.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = 0.0;
        let reps = 300;
        for _ in 0..reps {
            acc +=
                ar_diffusion_train_step(&ZeroEps, &batch, &split, &mask, &sched, &mut rng).unwrap();
        }
        let mean = acc / reps as f64;
        assert!((mean - 1.0).abs() < 0.1, "zero-model loss {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = cosine_schedule(60).unwrap();
        let split = ArSplit::from_sizes(vec![2, 2]).unwrap();
        let mask = build_attention_mask(4, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let plan = select_timesteps(&sched, SamplingMode::Fractional, 4, &split).unwrap();
        let (batch, cond) = toy_batch(4, 4, 11);
        let oracle = OracleEps {
            x0: batch[0].x0.clone(),
            sched: sched.clone(),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = ar_diffusion_sample(&oracle, &cond, &split, &plan, &mask, &sched, &mut rng)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = ar_diffusion_sample(&oracle, &cond, &split, &plan, &mask, &sched, &mut rng)
            .unwrap();
        assert_eq!(a, b);
    }

    /// Posterior-mean denoiser for scalar Gaussian data x0 ~ N(mu, s2).
    struct GaussianPosterior {
        mu: f64,
        s2: f64,
        sched: DiffusionSchedule,
    }

    impl NoisePredictor for GaussianPosterior {
        fn predict_eps(&self, seq: &AssembledSequence, _mask: &AttentionMask) -> Array2<f64> {
            let h = seq.noisy.ncols();
            let te = crate::dat::time_embedding(seq.t.max(1), h);
            let ab = self.sched.alpha_bar(seq.t);
            let denom = ab * self.s2 + (1.0 - ab);
            Array2::from_shape_fn((1, h), |(_, c)| {
                let x_t = seq.noisy[(0, c)] - te[c];
                let e_x0 = (self.s2 * ab.sqrt() * x_t + (1.0 - ab) * self.mu) / denom;
                (x_t - ab.sqrt() * e_x0) / (1.0 - ab).sqrt()
            })
        }
    }

    #[test]
    fn full_reverse_with_posterior_oracle_matches_data_mean() {
        let sched = cosine_schedule(100).unwrap();
        let split = ArSplit::from_sizes(vec![1]).unwrap();
        let mask = build_attention_mask(1, 1, &split, None, DepMode::OrAsWritten).unwrap();
        let plan = select_timesteps(&sched, SamplingMode::Full, 1, &split).unwrap();
        let (mu, s2) = (1.8, 0.25);
        let oracle = GaussianPosterior {
            mu,
            s2,
            sched: sched.clone(),
        };
        let cond = ConditionBundle {
            observed_latent: Array2::zeros((1, 2)),
            meta_embedding: Array1::zeros(1),
            condition_tokens: Array2::zeros((1, 2)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let runs = 10_000;
        let mut sum = 0.0;
        for _ in 0..runs {
            let x0 = ar_diffusion_sample(&oracle, &cond, &split, &plan, &mask, &sched, &mut rng)
                .unwrap();
            sum += x0[(0, 0)];
        }
        let mean = sum / runs as f64;
        assert!((mean - mu).abs() / mu < 0.05, "terminal mean {mean} vs {mu}");
    }

    #[test]
    fn later_segment_predictions_never_change_earlier_output() {
        struct SegmentShift {
            inner_x0: Array2<f64>,
            sched: DiffusionSchedule,
            shift_from_row: usize,
            shift: f64,
        }
        impl NoisePredictor for SegmentShift {
            fn predict_eps(&self, seq: &AssembledSequence, _mask: &AttentionMask) -> Array2<f64> {
                let h = self.inner_x0.ncols();
                let te = crate::dat::time_embedding(seq.t.max(1), h);
                let x_t = &seq.noisy - &te.insert_axis(Axis(0));
                let ab = self.sched.alpha_bar(seq.t);
                let mut eps = (&x_t - &(&self.inner_x0 * ab.sqrt())) / (1.0 - ab).sqrt();
                for r in self.shift_from_row..eps.nrows() {
                    for c in 0..eps.ncols() {
                        eps[(r, c)] += self.shift;
                    }
                }
                eps
            }
        }
        let sched = cosine_schedule(40).unwrap();
        let split = ArSplit::from_sizes(vec![2, 2]).unwrap();
        let mask = build_attention_mask(4, 2, &split, None, DepMode::OrAsWritten).unwrap();
        let plan = select_timesteps(&sched, SamplingMode::Fractional, 4, &split).unwrap();
        let (batch, cond) = toy_batch(4, 4, 21);
        let base = SegmentShift {
            inner_x0: batch[0].x0.clone(),
            sched: sched.clone(),
            shift_from_row: 2,
            shift: 0.0,
        };
        let shifted = SegmentShift {
            inner_x0: batch[0].x0.clone(),
            sched: sched.clone(),
            shift_from_row: 2,
            shift: 3.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = ar_diffusion_sample(&base, &cond, &split, &plan, &mask, &sched, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b =
            ar_diffusion_sample(&shifted, &cond, &split, &plan, &mask, &sched, &mut rng).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert_eq!(a[(r, c)], b[(r, c)], "segment 1 changed at ({r}, {c})");
            }
        }
        assert_ne!(a.row(2).to_owned(), b.row(2).to_owned());
    }
}
