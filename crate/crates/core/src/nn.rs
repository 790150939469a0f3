//! Minimal dense/recurrent network toolkit with hand-written backward passes.
//!
//! Tensors are row-major `Array2<f64>` with one sample per row. Every module
//! has a gradient twin of the same type; [`Params`] walks both in the same
//! order so optimizers can treat them as flat vectors.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
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

/// Visits parameter buffers in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut i = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[i..i + s.len()]);
            i += s.len();
        });
        assert_eq!(i, flat.len(), "flat parameter length");
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |s| s.fill(0.0));
    }

    fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |s| acc += s.iter().map(|v| v * v).sum::<f64>());
        acc
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= k));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

fn slice_of(a: &Mat) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_of_mut(a: &mut Mat) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`.
    pub w: Mat,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform init in ±1/√fan_in.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let k = 1.0 / (inputs as f64).sqrt();
        let w = Mat::from_shape_fn((inputs, outputs), |_| rng.random_range(-k..k));
        let b = Array1::from_shape_fn(outputs, |_| rng.random_range(-k..k));
        Self { w, b }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { w: Mat::zeros((inputs, outputs)), b: Array1::zeros(outputs) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Mat {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.w));
        f(self.b.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.w));
        f(self.b.as_slice_mut().expect("contiguous"));
    }
}

/// Fully connected stack with LeakyReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

impl Mlp {
    /// `sizes = [in, hidden…, out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2);
        Self { layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Linear::zeros_like).collect() }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs()];
        s.extend(self.layers.iter().map(Linear::outputs));
        s
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Mat {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward(x);
        if last > 0 {
            h.mapv_inplace(leaky_relu);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(&h.view());
            if i < last {
                h.mapv_inplace(leaky_relu);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> (Mat, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h.view());
            inputs.push(h);
            h = if i < last { z.mapv(leaky_relu) } else { z.clone() };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Mat, grad: &mut Mlp) -> Mat {
        let last = self.layers.len() - 1;
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                Zip::from(&mut d).and(&cache.pre[i]).for_each(|g, &z| *g *= leaky_relu_grad(z));
            }
            d = self.layers[i].backward(&cache.inputs[i].view(), &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// One GRU layer with gates ordered `[r, z, n]`:
/// `r = σ(x W_ir + b_ir + h W_hr + b_hr)`, `z` likewise,
/// `n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub wi: Mat,
    pub bi: Array1<f64>,
    pub wh: Mat,
    pub bh: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct GruLayerCache {
    x: Mat,
    h: Mat,
    r: Mat,
    z: Mat,
    n: Mat,
    ghn: Mat,
}

impl GruLayer {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut u = |shape: (usize, usize)| Mat::from_shape_fn(shape, |_| rng.random_range(-k..k));
        let wi = u((inputs, 3 * hidden));
        let wh = u((hidden, 3 * hidden));
        let bi = u((1, 3 * hidden)).row(0).to_owned();
        let bh = u((1, 3 * hidden)).row(0).to_owned();
        Self { wi, bi, wh, bh }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wi: Mat::zeros(self.wi.raw_dim()),
            bi: Array1::zeros(self.bi.len()),
            wh: Mat::zeros(self.wh.raw_dim()),
            bh: Array1::zeros(self.bh.len()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    fn gates(&self, x: &ArrayView2<f64>, h: &Mat) -> (Mat, Mat, Mat, Mat, Mat) {
        let hs = self.hidden();
        let mut gi = x.dot(&self.wi);
        gi += &self.bi;
        let mut gh = h.dot(&self.wh);
        gh += &self.bh;
        let r = (&gi.slice(s![.., 0..hs]) + &gh.slice(s![.., 0..hs])).mapv(sigmoid);
        let z = (&gi.slice(s![.., hs..2 * hs]) + &gh.slice(s![.., hs..2 * hs])).mapv(sigmoid);
        let ghn = gh.slice(s![.., 2 * hs..]).to_owned();
        let n = (&gi.slice(s![.., 2 * hs..]) + &(&r * &ghn)).mapv(f64::tanh);
        let h_next = &n + &(&z * &(h - &n));
        (h_next, r, z, n, ghn)
    }

    pub fn step(&self, x: &ArrayView2<f64>, h: &Mat) -> Mat {
        self.gates(x, h).0
    }

    pub fn step_cached(&self, x: &ArrayView2<f64>, h: &Mat) -> (Mat, GruLayerCache) {
        let (h_next, r, z, n, ghn) = self.gates(x, h);
        (h_next, GruLayerCache { x: x.to_owned(), h: h.clone(), r, z, n, ghn })
    }

    /// Returns `(∂L/∂x, ∂L/∂h)` given `∂L/∂h'`.
    pub fn backward(&self, c: &GruLayerCache, dh_next: &Mat, grad: &mut GruLayer) -> (Mat, Mat) {
        let hs = self.hidden();
        let rows = dh_next.nrows();
        let dn = dh_next * &c.z.mapv(|z| 1.0 - z);
        let dz = dh_next * &(&c.h - &c.n);
        let mut dh = dh_next * &c.z;
        let dn_pre = &dn * &c.n.mapv(|n| 1.0 - n * n);
        let dz_pre = &dz * &c.z.mapv(|z| z * (1.0 - z));
        let dr_pre = &(&dn_pre * &c.ghn) * &c.r.mapv(|r| r * (1.0 - r));

        let mut dgi = Mat::zeros((rows, 3 * hs));
        dgi.slice_mut(s![.., 0..hs]).assign(&dr_pre);
        dgi.slice_mut(s![.., hs..2 * hs]).assign(&dz_pre);
        dgi.slice_mut(s![.., 2 * hs..]).assign(&dn_pre);
        let mut dgh = dgi.clone();
        dgh.slice_mut(s![.., 2 * hs..]).assign(&(&dn_pre * &c.r));

        grad.wi += &c.x.t().dot(&dgi);
        grad.bi += &dgi.sum_axis(Axis(0));
        grad.wh += &c.h.t().dot(&dgh);
        grad.bh += &dgh.sum_axis(Axis(0));
        let dx = dgi.dot(&self.wi.t());
        dh += &dgh.dot(&self.wh.t());
        (dx, dh)
    }
}

impl Params for GruLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.wi));
        f(self.bi.as_slice().expect("contiguous"));
        f(slice_of(&self.wh));
        f(self.bh.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.wi));
        f(self.bi.as_slice_mut().expect("contiguous"));
        f(slice_of_mut(&mut self.wh));
        f(self.bh.as_slice_mut().expect("contiguous"));
    }
}

/// Stacked GRU; the output is the top layer's hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

pub type Hidden = Vec<Mat>;

impl Gru {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth).map(|i| GruLayer::new(if i == 0 { inputs } else { hidden }, hidden, rng)).collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(GruLayer::zeros_like).collect() }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn zero_hidden(&self, batch: usize) -> Hidden {
        vec![Mat::zeros((batch, self.hidden_size())); self.layers.len()]
    }

    pub fn step(&self, x: &ArrayView2<f64>, h: &Hidden) -> Hidden {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut input = x.to_owned();
        for (layer, hl) in self.layers.iter().zip(h) {
            let next = layer.step(&input.view(), hl);
            input = next.clone();
            out.push(next);
        }
        out
    }

    pub fn step_cached(&self, x: &ArrayView2<f64>, h: &Hidden) -> (Hidden, Vec<GruLayerCache>) {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x.to_owned();
        for (layer, hl) in self.layers.iter().zip(h) {
            let (next, c) = layer.step_cached(&input.view(), hl);
            input = next.clone();
            out.push(next);
            caches.push(c);
        }
        (out, caches)
    }

    /// `d_out` is the gradient on the top output, `dh_next` the gradients
    /// flowing back from the next time step (one per layer).
    pub fn backward_step(&self, caches: &[GruLayerCache], d_out: &Mat, dh_next: &Hidden, grad: &mut Gru) -> (Mat, Hidden) {
        let depth = self.layers.len();
        let mut dh_prev = vec![Mat::zeros((0, 0)); depth];
        let mut d_from_above = d_out.clone();
        for l in (0..depth).rev() {
            let dh = &d_from_above + &dh_next[l];
            let (dx, dh_l) = self.layers[l].backward(&caches[l], &dh, &mut grad.layers[l]);
            dh_prev[l] = dh_l;
            d_from_above = dx;
        }
        (d_from_above, dh_prev)
    }
}

impl Params for Gru {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "optimizer/parameter size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
        }
        let (lr, eps) = (self.lr, self.eps);
        let (m, v) = (&self.m, &self.v);
        let mut i = 0;
        params.visit_mut(&mut |s| {
            for p in s.iter_mut() {
                *p -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                i += 1;
            }
        });
    }
}

/// Scales `grads` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

pub fn hcat(parts: &[ArrayView2<f64>]) -> Mat {
    concatenate(Axis(1), parts).expect("matching row counts")
}

/// Rows of `x` each split into `groups` equal blocks, stacked vertically.
pub fn split_rows(x: &ArrayView2<f64>, groups: usize) -> Mat {
    let (rows, cols) = x.dim();
    assert_eq!(cols % groups, 0);
    x.to_owned()
        .into_shape_with_order((rows * groups, cols / groups))
        .expect("standard layout")
}

/// Inverse of [`split_rows`].
pub fn merge_rows(x: &Mat, groups: usize) -> Mat {
    let (rows, cols) = x.dim();
    assert_eq!(rows % groups, 0);
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((rows / groups, cols * groups))
        .expect("standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `loss` against the analytic gradient on every parameter.
    fn check<P: Params + Clone>(model: &P, grad: &P, loss: impl Fn(&P) -> f64) {
        let flat = model.flatten();
        let g = grad.flatten();
        let eps = 1e-6;
        for i in (0..flat.len()).step_by((flat.len() / 40).max(1)) {
            let mut p = model.clone();
            let mut plus = flat.clone();
            plus[i] += eps;
            p.assign(&plus);
            let lp = loss(&p);
            let mut minus = flat.clone();
            minus[i] -= eps;
            p.assign(&minus);
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / denom < 1e-5 || (fd - g[i]).abs() < 1e-8, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[5, 7, 6, 3], &mut rng);
        let x = rand_mat(4, 5, &mut rng);
        let target = rand_mat(4, 3, &mut rng);
        let loss = |m: &Mlp| (&m.forward(&x.view()) - &target).mapv(|v| v * v).sum() * 0.5;
        let (y, cache) = mlp.forward_cached(&x.view());
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&cache, &(&y - &target), &mut grad);
        check(&mlp, &grad, loss);
        // input gradient
        let eps = 1e-6;
        let mut xp = x.clone();
        xp[[1, 2]] += eps;
        let mut xm = x.clone();
        xm[[1, 2]] -= eps;
        let f = |x: &Mat| (&mlp.forward(&x.view()) - &target).mapv(|v| v * v).sum() * 0.5;
        let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
        assert!((fd - dx[[1, 2]]).abs() < 1e-6);
    }

    #[test]
    fn gru_bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = Gru::new(4, 5, 2, &mut rng);
        let xs: Vec<Mat> = (0..6).map(|_| rand_mat(3, 4, &mut rng)).collect();
        let target = rand_mat(3, 5, &mut rng);
        let run = |g: &Gru| {
            let mut h = g.zero_hidden(3);
            let mut loss = 0.0;
            for x in &xs {
                h = g.step(&x.view(), &h);
                loss += (&h[1] - &target).mapv(|v| v * v).sum() * 0.5;
            }
            loss
        };
        let mut h = gru.zero_hidden(3);
        let mut caches = Vec::new();
        let mut outs = Vec::new();
        for x in &xs {
            let (next, c) = gru.step_cached(&x.view(), &h);
            outs.push(next[1].clone());
            caches.push(c);
            h = next;
        }
        let mut grad = gru.zeros_like();
        let mut dh = gru.zero_hidden(3);
        for t in (0..xs.len()).rev() {
            let d_out = &outs[t] - &target;
            let (_, dprev) = gru.backward_step(&caches[t], &d_out, &dh, &mut grad);
            dh = dprev;
        }
        check(&gru, &grad, run);
    }

    #[test]
    fn gru_matches_reference_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = GruLayer::new(2, 3, &mut rng);
        let x = rand_mat(1, 2, &mut rng);
        let h = rand_mat(1, 3, &mut rng);
        let out = layer.step(&x.view(), &h);
        // scalar re-derivation, gate by gate
        for j in 0..3 {
            let pre = |gate: usize, with_h: bool| {
                let col = gate * 3 + j;
                let mut a = layer.bi[col];
                for k in 0..2 {
                    a += x[[0, k]] * layer.wi[[k, col]];
                }
                let mut b = layer.bh[col];
                for k in 0..3 {
                    b += h[[0, k]] * layer.wh[[k, col]];
                }
                if with_h {
                    (a, b)
                } else {
                    (a + b, 0.0)
                }
            };
            let r = sigmoid(pre(0, false).0);
            let z = sigmoid(pre(1, false).0);
            let (a, b) = pre(2, true);
            let n = (a + r * b).tanh();
            let expected = (1.0 - z) * n + z * h[[0, j]];
            assert!((out[[0, j]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(2, 2, &mut rng);
        let before = lin.flatten();
        let mut grad = lin.zeros_like();
        grad.visit_mut(&mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 3.0 } else { -0.5 }));
        let mut adam = Adam::new(0.01, lin.num_params());
        adam.step(&mut lin, &grad);
        for (a, b) in before.iter().zip(lin.flatten()) {
            assert!(((a - b).abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn flatten_round_trip_and_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&[3, 4, 2], &mut rng);
        let mut other = mlp.zeros_like();
        other.assign(&mlp.flatten());
        assert_eq!(other, mlp);
        let norm = clip_grad_norm(&mut other, 0.5);
        assert!(norm > 0.5);
        assert!((other.sq_norm().sqrt() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_and_merge_rows_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(3, 8, &mut rng);
        let s = split_rows(&x.view(), 4);
        assert_eq!(s.dim(), (12, 2));
        assert_eq!(s.row(5).to_vec(), x.slice(s![1, 2..4]).to_vec());
        assert_eq!(merge_rows(&s, 4), x);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.3) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);
    }
}
