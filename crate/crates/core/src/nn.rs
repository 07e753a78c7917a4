//! Minimal reverse-mode autodiff over `ndarray` f64 matrices, plus the Adam
//! optimizer. Small models only: every node stores its full value and the
//! backward pass walks the tape in reverse. f64 throughout so analytic
//! gradients can be checked against central finite differences at tight
//! tolerances.

use std::rc::Rc;

use ndarray::{concatenate, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::data::standard_normal;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>, &[Array2<f64>], &mut [Array2<f64>])>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    parents: Vec<Vec<usize>>,
    backwards: Vec<Option<BackwardFn>>,
    grads: Vec<Array2<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<usize>, f: Option<BackwardFn>) -> Var {
        self.values.push(value);
        self.parents.push(parents);
        self.backwards.push(f);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.grads[v.0]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].dot(&self.values[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Some(Box::new(move |g, vals, grads| {
                grads[ai] = &grads[ai] + &g.dot(&vals[bi].t());
                grads[bi] = &grads[bi] + &vals[ai].t().dot(g);
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.values[a.0].t().to_owned();
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, _, grads| {
                grads[ai] = &grads[ai] + &g.t();
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] + &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Some(Box::new(move |g, _, grads| {
                grads[ai] = &grads[ai] + g;
                grads[bi] = &grads[bi] + g;
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] - &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Some(Box::new(move |g, _, grads| {
                grads[ai] = &grads[ai] + g;
                grads[bi] = &grads[bi] - g;
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] * &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Some(Box::new(move |g, vals, grads| {
                grads[ai] = &grads[ai] + &(g * &vals[bi]);
                grads[bi] = &grads[bi] + &(g * &vals[ai]);
            })),
        )
    }

    /// Elementwise `k*a + c`.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let value = self.values[a.0].mapv(|v| k * v + c);
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, _, grads| {
                grads[ai] = &grads[ai] + &g.mapv(|v| k * v);
            })),
        )
    }

    /// Broadcast-add a 1 x n row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.values[row.0].nrows(), 1, "add_row expects a 1 x n row");
        let value = &self.values[a.0] + &self.values[row.0];
        let (ai, ri) = (a.0, row.0);
        self.push(
            value,
            vec![ai, ri],
            Some(Box::new(move |g, _, grads| {
                grads[ai] = &grads[ai] + g;
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                grads[ri] = &grads[ri] + &summed;
            })),
        )
    }

    /// Smooth ramp activation: x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x * sigmoid(x));
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, vals, grads| {
                let d = vals[ai].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                grads[ai] = &grads[ai] + &(g * &d);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::exp);
        let ai = a.0;
        let cached = value.clone();
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, _, grads| {
                grads[ai] = &grads[ai] + &(g * &cached);
            })),
        )
    }

    /// Row-wise layer normalization with learned gain and bias (1 x n each).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = &self.values[a.0];
        let (m, n) = (x.nrows(), x.ncols());
        let mut xhat = Array2::<f64>::zeros((m, n));
        let mut inv_sigma = Vec::with_capacity(m);
        for r in 0..m {
            let row = x.row(r);
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma.push(inv);
            for c in 0..n {
                xhat[(r, c)] = (x[(r, c)] - mu) * inv;
            }
        }
        let g_row = &self.values[gain.0];
        let b_row = &self.values[bias.0];
        let value = &xhat * g_row + b_row;
        let (ai, gi, bi) = (a.0, gain.0, bias.0);
        let xhat_c = xhat;
        self.push(
            value,
            vec![ai, gi, bi],
            Some(Box::new(move |g, vals, grads| {
                let gain_v = &vals[gi];
                let (m, n) = (g.nrows(), g.ncols());
                let nf = n as f64;
                let mut da = Array2::<f64>::zeros((m, n));
                for r in 0..m {
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    for c in 0..n {
                        let gy = g[(r, c)] * gain_v[(0, c)];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat_c[(r, c)];
                    }
                    mean_gy /= nf;
                    mean_gy_xhat /= nf;
                    for c in 0..n {
                        let gy = g[(r, c)] * gain_v[(0, c)];
                        da[(r, c)] =
                            inv_sigma[r] * (gy - mean_gy - xhat_c[(r, c)] * mean_gy_xhat);
                    }
                }
                grads[ai] = &grads[ai] + &da;
                let dgain = (g * &xhat_c).sum_axis(Axis(0)).insert_axis(Axis(0));
                grads[gi] = &grads[gi] + &dgain;
                let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                grads[bi] = &grads[bi] + &dbias;
            })),
        )
    }

    /// Row-wise softmax restricted to unblocked positions (mask entry 0).
    /// Blocked positions get probability exactly 0 and receive no gradient,
    /// so blocked tokens are provably non-influential.
    pub fn softmax_masked(&mut self, scores: Var, blocked: Rc<Array2<u8>>) -> Var {
        let x = &self.values[scores.0];
        let (m, n) = (x.nrows(), x.ncols());
        assert_eq!(blocked.nrows(), m);
        assert_eq!(blocked.ncols(), n);
        let mut p = Array2::<f64>::zeros((m, n));
        for r in 0..m {
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                if blocked[(r, c)] == 0 {
                    max = max.max(x[(r, c)]);
                }
            }
            assert!(
                max.is_finite(),
                "attention row {r} has no unblocked column"
            );
            let mut total = 0.0;
            for c in 0..n {
                if blocked[(r, c)] == 0 {
                    let e = (x[(r, c)] - max).exp();
                    p[(r, c)] = e;
                    total += e;
                }
            }
            for c in 0..n {
                p[(r, c)] /= total;
            }
        }
        let si = scores.0;
        let p_c = p.clone();
        self.push(
            p,
            vec![si],
            Some(Box::new(move |g, _, grads| {
                let (m, n) = (g.nrows(), g.ncols());
                let mut ds = Array2::<f64>::zeros((m, n));
                for r in 0..m {
                    let dot: f64 = (0..n).map(|c| g[(r, c)] * p_c[(r, c)]).sum();
                    for c in 0..n {
                        ds[(r, c)] = p_c[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                grads[si] = &grads[si] + &ds;
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let value = concatenate(Axis(0), &views).expect("column widths must match");
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ids_c = ids.clone();
        self.push(
            value,
            ids,
            Some(Box::new(move |g, vals, grads| {
                let mut start = 0;
                for &pid in &ids_c {
                    let rows = vals[pid].nrows();
                    let slice = g.slice(ndarray::s![start..start + rows, ..]).to_owned();
                    grads[pid] = &grads[pid] + &slice;
                    start += rows;
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let value = concatenate(Axis(1), &views).expect("row heights must match");
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ids_c = ids.clone();
        self.push(
            value,
            ids,
            Some(Box::new(move |g, vals, grads| {
                let mut start = 0;
                for &pid in &ids_c {
                    let cols = vals[pid].ncols();
                    let slice = g.slice(ndarray::s![.., start..start + cols]).to_owned();
                    grads[pid] = &grads[pid] + &slice;
                    start += cols;
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.values[a.0]
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, vals, grads| {
                let mut padded = Array2::<f64>::zeros(vals[ai].raw_dim());
                padded.slice_mut(ndarray::s![start..end, ..]).assign(g);
                grads[ai] = &grads[ai] + &padded;
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.values[a.0]
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, vals, grads| {
                let mut padded = Array2::<f64>::zeros(vals[ai].raw_dim());
                padded.slice_mut(ndarray::s![.., start..end]).assign(g);
                grads[ai] = &grads[ai] + &padded;
            })),
        )
    }

    /// Reshape (logical row-major order) to `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let orig = self.values[a.0].raw_dim();
        let flat: Vec<f64> = self.values[a.0].iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("element count must match");
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, _, grads| {
                let flat: Vec<f64> = g.iter().copied().collect();
                let back = Array2::from_shape_vec(orig, flat).expect("element count must match");
                grads[ai] = &grads[ai] + &back;
            })),
        )
    }

    /// Column means: m x n -> 1 x n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.values[a.0].nrows() as f64;
        let value = (self.values[a.0].sum_axis(Axis(0)) / m).insert_axis(Axis(0));
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Some(Box::new(move |g, vals, grads| {
                let rows = vals[ai].nrows();
                let spread = g.mapv(|v| v / rows as f64);
                let mut da = Array2::<f64>::zeros(vals[ai].raw_dim());
                for r in 0..rows {
                    da.row_mut(r).assign(&spread.row(0));
                }
                grads[ai] = &grads[ai] + &da;
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let ai = a.0;
        self.push(
            Array2::from_elem((1, 1), s),
            vec![ai],
            Some(Box::new(move |g, vals, grads| {
                let gv = g[(0, 0)];
                grads[ai] = &grads[ai] + &Array2::from_elem(vals[ai].raw_dim(), gv);
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / len, 0.0)
    }

    /// x @ w + b with b a 1 x n row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let prod = self.matmul(x, w);
        self.add_row(prod, b)
    }

    /// Mean squared error between two same-shape vars, as a 1 x 1 var.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let d = self.sub(pred, target);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse pass from a 1 x 1 loss node. Gradients of earlier `backward`
    /// calls are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.values[loss.0].len(), 1, "loss must be scalar");
        let n = self.values.len();
        self.grads = self
            .values
            .iter()
            .map(|v| Array2::zeros(v.raw_dim()))
            .collect();
        self.grads[loss.0][(0, 0)] = 1.0;
        let mut reached = vec![false; n];
        reached[loss.0] = true;
        for i in (0..n).rev() {
            if !reached[i] {
                continue;
            }
            for &p in &self.parents[i] {
                reached[p] = true;
            }
            if let Some(f) = self.backwards[i].take() {
                let g = self.grads[i].clone();
                f(&g, &self.values, &mut self.grads);
                self.backwards[i] = Some(f);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian init scaled by 1/sqrt(fan_in).
pub fn init_normal(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| standard_normal(rng) * scale)
}

/// Adam with bias correction. One state slot per parameter, matched by
/// position.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        }
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Cosine learning-rate decay from `base` to `base * floor_frac`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize, floor_frac: f64) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let progress = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (floor_frac + (1.0 - floor_frac) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Central finite-difference gradient of `f` with respect to `x`.
    fn numeric_grad(
        f: &dyn Fn(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::<f64>::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[(r, c)] += h;
            let mut minus = x.clone();
            minus[(r, c)] -= h;
            g[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| standard_normal(rng))
    }

    #[test]
    fn composite_network_gradients_match_finite_differences() {
        // linear -> silu -> layer_norm -> linear -> mse: checks matmul,
        // add_row, silu, layer_norm, sub, mul, mean_all in one pass.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_mat(4, 5, &mut rng);
        let w1 = rand_mat(5, 6, &mut rng);
        let b1 = rand_mat(1, 6, &mut rng);
        let gain = rand_mat(1, 6, &mut rng).mapv(|v| 1.0 + 0.1 * v);
        let bias = rand_mat(1, 6, &mut rng);
        let w2 = rand_mat(6, 3, &mut rng);
        let target = rand_mat(4, 3, &mut rng);

        let run = |x0: &Array2<f64>,
                   w1: &Array2<f64>,
                   b1: &Array2<f64>,
                   gain: &Array2<f64>,
                   bias: &Array2<f64>,
                   w2: &Array2<f64>|
         -> (Tape, Var, [Var; 6]) {
            let mut t = Tape::new();
            let xv = t.leaf(x0.clone());
            let w1v = t.leaf(w1.clone());
            let b1v = t.leaf(b1.clone());
            let gv = t.leaf(gain.clone());
            let bv = t.leaf(bias.clone());
            let w2v = t.leaf(w2.clone());
            let tv = t.leaf(target.clone());
            let h = t.linear(xv, w1v, b1v);
            let h = t.silu(h);
            let h = t.layer_norm(h, gv, bv, 1e-5);
            let pred = t.matmul(h, w2v);
            let loss = t.mse(pred, tv);
            (t, loss, [xv, w1v, b1v, gv, bv, w2v])
        };

        let (mut tape, loss, vars) = run(&x0, &w1, &b1, &gain, &bias, &w2);
        tape.backward(loss);

        let inputs: [&Array2<f64>; 6] = [&x0, &w1, &b1, &gain, &bias, &w2];
        for (k, var) in vars.iter().enumerate() {
            let f = |probe: &Array2<f64>| -> f64 {
                let mut args: Vec<Array2<f64>> = inputs.iter().map(|m| (*m).clone()).collect();
                args[k] = probe.clone();
                let (t, l, _) = run(&args[0], &args[1], &args[2], &args[3], &args[4], &args[5]);
                t.value(l)[(0, 0)]
            };
            let num = numeric_grad(&f, inputs[k], 1e-5);
            let err = max_rel_err(tape.grad(*var), &num);
            assert!(err < 1e-6, "param {k}: rel err {err}");
        }
    }

    #[test]
    fn masked_softmax_gradients_and_zero_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores = rand_mat(3, 4, &mut rng);
        let mut blocked = Array2::<u8>::zeros((3, 4));
        blocked[(0, 2)] = 1;
        blocked[(1, 0)] = 1;
        blocked[(1, 3)] = 1;
        let blocked = Rc::new(blocked);
        let post = rand_mat(3, 4, &mut rng);

        let run = |s: &Array2<f64>| -> (Tape, Var, Var) {
            let mut t = Tape::new();
            let sv = t.leaf(s.clone());
            let p = t.softmax_masked(sv, Rc::clone(&blocked));
            let pv = t.leaf(post.clone());
            let prod = t.mul(p, pv);
            let loss = t.mean_all(prod);
            (t, loss, sv)
        };
        let (mut tape, loss, sv) = run(&scores);
        // Blocked entries carry exactly zero probability.
        {
            let p_node = Var(sv.0 + 1);
            let p = tape.value(p_node);
            assert_eq!(p[(0, 2)], 0.0);
            assert_eq!(p[(1, 0)], 0.0);
            for r in 0..3 {
                let row_sum: f64 = p.row(r).sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
        }
        tape.backward(loss);
        let f = |probe: &Array2<f64>| -> f64 {
            let (t, l, _) = run(probe);
            t.value(l)[(0, 0)]
        };
        let num = numeric_grad(&f, &scores, 1e-6);
        let err = max_rel_err(tape.grad(sv), &num);
        assert!(err < 1e-6, "rel err {err}");
        // No gradient flows into blocked score positions.
        assert_eq!(tape.grad(sv)[(0, 2)], 0.0);
        assert_eq!(tape.grad(sv)[(1, 0)], 0.0);
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(3, 4, &mut rng);
        let b = rand_mat(2, 4, &mut rng);
        let w = rand_mat(8, 2, &mut rng);

        let run = |a_in: &Array2<f64>, b_in: &Array2<f64>| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let av = t.leaf(a_in.clone());
            let bv = t.leaf(b_in.clone());
            let cat = t.concat_rows(&[av, bv]);
            let sliced = t.slice_rows(cat, 1, 5);
            let left = t.slice_cols(sliced, 0, 2);
            let right = t.slice_cols(sliced, 2, 4);
            let joined = t.concat_cols(&[left, right]);
            let flat = t.reshape(joined, 2, 8);
            let wv = t.leaf(w.clone());
            let prod = t.matmul(flat, wv);
            let pooled = t.mean_rows(prod);
            let e = t.exp(pooled);
            let loss = t.sum_all(e);
            (t, loss, av, bv)
        };
        let (mut tape, loss, av, bv) = run(&a, &b);
        tape.backward(loss);
        let fa = |probe: &Array2<f64>| {
            let (t, l, _, _) = run(probe, &b);
            t.value(l)[(0, 0)]
        };
        let fb = |probe: &Array2<f64>| {
            let (t, l, _, _) = run(&a, probe);
            t.value(l)[(0, 0)]
        };
        let num_a = numeric_grad(&fa, &a, 1e-6);
        let num_b = numeric_grad(&fb, &b, 1e-6);
        assert!(max_rel_err(tape.grad(av), &num_a) < 1e-6);
        assert!(max_rel_err(tape.grad(bv), &num_b) < 1e-6);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = rand_mat(3, 3, &mut rng);
        let mut param = Array2::<f64>::zeros((3, 3));
        let mut opt = Adam::new(0.05);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..300 {
            let mut t = Tape::new();
            let p = t.leaf(param.clone());
            let tv = t.leaf(target.clone());
            let loss = t.mse(p, tv);
            t.backward(loss);
            last = t.value(loss)[(0, 0)];
            first.get_or_insert(last);
            let g = t.grad(p).clone();
            opt.step(&mut [&mut param], &[g], 0.05);
        }
        assert!(last < 0.01 * first.unwrap());
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert!((cosine_lr(1.0, 0, 100, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 99, 100, 0.1) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(1.0, 50, 100, 0.1) < 1.0);
    }
}
