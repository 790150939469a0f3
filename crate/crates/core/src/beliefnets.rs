//! Teacher and student networks.
//!
//! The student's belief vector has 120 slots: 0..96 mirror the teacher's
//! per-foot terrain latents and receive the gated skip, 96..120 stand in for
//! the privileged latent.

use ndarray::{s, Array1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{hcat, merge_rows, sigmoid, split_rows, Gru, GruLayerCache, Hidden, Mat, Mlp, MlpCache, Params};
use crate::perception::{EXTERO_DIM, POINTS_PER_FOOT, PROPRIO_DIM};
use crate::quadsim::{ACTION_DIM, NUM_LEGS, PRIVILEGED_DIM};

pub const FOOT_LATENT_DIM: usize = 24;
pub const EXTERO_LATENT_DIM: usize = FOOT_LATENT_DIM * NUM_LEGS;
pub const PRIV_LATENT_DIM: usize = 24;
pub const BELIEF_DIM: usize = EXTERO_LATENT_DIM + PRIV_LATENT_DIM;
pub const HEAD_INPUT_DIM: usize = PROPRIO_DIM + BELIEF_DIM;
pub const CRITIC_INPUT_DIM: usize = PROPRIO_DIM + EXTERO_DIM + PRIVILEGED_DIM;
pub const RNN_HIDDEN: usize = 50;
pub const RNN_LAYERS: usize = 2;
pub const RECON_DIM: usize = EXTERO_DIM + PRIVILEGED_DIM;

const EXTERO_ENCODER: [usize; 4] = [POINTS_PER_FOOT, 80, 60, FOOT_LATENT_DIM];
const PRIV_ENCODER: [usize; 4] = [PRIVILEGED_DIM, 64, 32, PRIV_LATENT_DIM];
const HEAD: [usize; 5] = [HEAD_INPUT_DIM, 256, 160, 128, ACTION_DIM];
const CRITIC: [usize; 5] = [CRITIC_INPUT_DIM, 256, 160, 128, 1];
const CORE_INPUT_DIM: usize = PROPRIO_DIM + EXTERO_LATENT_DIM;

pub fn initial_log_std() -> f64 {
    0.3f64.ln()
}

/// Anything that maps clean teacher observations to an action mean.
pub trait TeacherPolicy {
    fn action_mean(&self, proprio: &ArrayView2<f64>, extero: &ArrayView2<f64>, privileged: &ArrayView2<f64>) -> Mat;
}

fn encode_feet(g_e: &Mlp, extero: &ArrayView2<f64>) -> Mat {
    merge_rows(&g_e.forward(&split_rows(extero, NUM_LEGS).view()), NUM_LEGS)
}

fn encode_feet_cached(g_e: &Mlp, extero: &ArrayView2<f64>) -> (Mat, MlpCache) {
    let (y, c) = g_e.forward_cached(&split_rows(extero, NUM_LEGS).view());
    (merge_rows(&y, NUM_LEGS), c)
}

fn backward_feet(g_e: &Mlp, cache: &MlpCache, d_latent: &Mat, grad: &mut Mlp) {
    g_e.backward(cache, &split_rows(&d_latent.view(), NUM_LEGS), grad);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherNet {
    pub g_e: Mlp,
    pub g_p: Mlp,
    pub head: Mlp,
    pub log_std: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub mean: Mat,
    pub l_e: Mat,
    pub l_p: Mat,
}

pub struct TeacherCache {
    g_e: MlpCache,
    g_p: MlpCache,
    head: MlpCache,
}

impl TeacherNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            g_e: Mlp::new(&EXTERO_ENCODER, rng),
            g_p: Mlp::new(&PRIV_ENCODER, rng),
            head: Mlp::new(&HEAD, rng),
            log_std: Array1::from_elem(ACTION_DIM, initial_log_std()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            g_e: self.g_e.zeros_like(),
            g_p: self.g_p.zeros_like(),
            head: self.head.zeros_like(),
            log_std: Array1::zeros(ACTION_DIM),
        }
    }

    pub fn forward(&self, proprio: &ArrayView2<f64>, extero: &ArrayView2<f64>, privileged: &ArrayView2<f64>) -> TeacherOutput {
        let l_e = encode_feet(&self.g_e, extero);
        let l_p = self.g_p.forward(privileged);
        let mean = self.head.forward(&hcat(&[proprio.view(), l_e.view(), l_p.view()]).view());
        TeacherOutput { mean, l_e, l_p }
    }

    pub fn forward_cached(
        &self,
        proprio: &ArrayView2<f64>,
        extero: &ArrayView2<f64>,
        privileged: &ArrayView2<f64>,
    ) -> (TeacherOutput, TeacherCache) {
        let (l_e, g_e) = encode_feet_cached(&self.g_e, extero);
        let (l_p, g_p) = self.g_p.forward_cached(privileged);
        let (mean, head) = self.head.forward_cached(&hcat(&[proprio.view(), l_e.view(), l_p.view()]).view());
        (TeacherOutput { mean, l_e, l_p }, TeacherCache { g_e, g_p, head })
    }

    /// Backpropagates `∂L/∂mean`; the log-std gradient is the caller's business.
    pub fn backward(&self, cache: &TeacherCache, d_mean: &Mat, grad: &mut TeacherNet) {
        let d_in = self.head.backward(&cache.head, d_mean, &mut grad.head);
        let d_le = d_in.slice(s![.., PROPRIO_DIM..PROPRIO_DIM + EXTERO_LATENT_DIM]).to_owned();
        let d_lp = d_in.slice(s![.., PROPRIO_DIM + EXTERO_LATENT_DIM..]).to_owned();
        backward_feet(&self.g_e, &cache.g_e, &d_le, &mut grad.g_e);
        self.g_p.backward(&cache.g_p, &d_lp, &mut grad.g_p);
    }
}

impl TeacherPolicy for TeacherNet {
    fn action_mean(&self, proprio: &ArrayView2<f64>, extero: &ArrayView2<f64>, privileged: &ArrayView2<f64>) -> Mat {
        self.forward(proprio, extero, privileged).mean
    }
}

impl Params for TeacherNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.g_e.visit(f);
        self.g_p.visit(f);
        self.head.visit(f);
        f(self.log_std.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.g_e.visit_mut(f);
        self.g_p.visit_mut(f);
        self.head.visit_mut(f);
        f(self.log_std.as_slice_mut().expect("contiguous"));
    }
}

/// Value network over `[proprio, extero_clean, privileged]`.
pub fn new_critic<R: Rng + ?Sized>(rng: &mut R) -> Mlp {
    Mlp::new(&CRITIC, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    #[default]
    Gru,
    Feedforward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentArch {
    pub gated: bool,
    pub core: CoreKind,
}

impl Default for StudentArch {
    fn default() -> Self {
        Self { gated: true, core: CoreKind::Gru }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Core {
    Gru(Gru),
    Feedforward(Mlp),
}

impl Core {
    fn zeros_like(&self) -> Self {
        match self {
            Core::Gru(g) => Core::Gru(g.zeros_like()),
            Core::Feedforward(m) => Core::Feedforward(m.zeros_like()),
        }
    }
}

enum CoreCache {
    Gru(Vec<GruLayerCache>),
    Feedforward(MlpCache),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentNet {
    pub arch: StudentArch,
    pub g_e: Mlp,
    pub core: Core,
    pub g_a: Mlp,
    pub g_b: Mlp,
    pub head: Mlp,
    pub g_ra: Mlp,
    pub g_de: Mlp,
    pub g_dp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BeliefStep {
    pub belief: Mat,
    pub pre_belief: Mat,
    /// All zeros for the non-gated variant.
    pub alpha: Mat,
    pub l_e: Mat,
    pub hidden: Hidden,
}

/// `gb + pad(l_e ⊙ alpha)` with the skip in slots `0..96`.
pub fn gated_belief(gb: &Mat, l_e: &Mat, alpha: &Mat) -> Mat {
    let mut b = gb.clone();
    let mut head = b.slice_mut(s![.., ..EXTERO_LATENT_DIM]);
    head += &(l_e * alpha);
    b
}

/// One time step of training inputs and targets for a batch of streams.
#[derive(Clone, Debug)]
pub struct StepData {
    pub proprio: Mat,
    pub extero_noisy: Mat,
    pub teacher_action: Mat,
    pub extero_target: Mat,
    pub priv_target: Mat,
    /// 0 where a stream starts a new episode at this step, 1 otherwise.
    pub keep: Array1<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmentLoss {
    /// Sum over steps of the per-step behaviour-cloning MSE.
    pub bc: f64,
    /// Sum over steps of the per-step reconstruction MSE.
    pub re: f64,
    pub steps: usize,
}

pub fn combined_loss(l_bc: f64, l_re: f64) -> f64 {
    l_bc + 0.5 * l_re
}

struct StepCache {
    g_e: MlpCache,
    l_e: Mat,
    core: CoreCache,
    g_a: Option<(MlpCache, Mat)>,
    g_b: MlpCache,
    head: MlpCache,
    g_ra: Option<(MlpCache, Mat)>,
    g_de: MlpCache,
    g_dp: MlpCache,
}

fn mask_rows(h: &Hidden, keep: &Array1<f64>) -> Hidden {
    let k = keep.view().insert_axis(Axis(1));
    h.iter().map(|m| m * &k).collect()
}

impl StudentNet {
    pub fn new<R: Rng + ?Sized>(arch: StudentArch, rng: &mut R) -> Self {
        let core = match arch.core {
            CoreKind::Gru => Core::Gru(Gru::new(CORE_INPUT_DIM, RNN_HIDDEN, RNN_LAYERS, rng)),
            CoreKind::Feedforward => Core::Feedforward(Mlp::new(&[CORE_INPUT_DIM, 64, RNN_HIDDEN], rng)),
        };
        let gate_sizes = [RNN_HIDDEN, 64, 64, EXTERO_LATENT_DIM];
        Self {
            arch,
            g_e: Mlp::new(&EXTERO_ENCODER, rng),
            core,
            g_a: Mlp::new(&gate_sizes, rng),
            g_b: Mlp::new(&[RNN_HIDDEN, 64, 64, BELIEF_DIM], rng),
            head: Mlp::new(&HEAD, rng),
            g_ra: Mlp::new(&gate_sizes, rng),
            g_de: Mlp::new(&[BELIEF_DIM, 64, 64, EXTERO_DIM], rng),
            g_dp: Mlp::new(&[BELIEF_DIM, 64, 64, PRIVILEGED_DIM], rng),
        }
    }

    /// Fresh student that reuses the teacher's terrain encoder and policy head.
    pub fn from_teacher<R: Rng + ?Sized>(teacher: &TeacherNet, arch: StudentArch, rng: &mut R) -> Self {
        let mut s = Self::new(arch, rng);
        s.g_e = teacher.g_e.clone();
        s.head = teacher.head.clone();
        s
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            g_e: self.g_e.zeros_like(),
            core: self.core.zeros_like(),
            g_a: self.g_a.zeros_like(),
            g_b: self.g_b.zeros_like(),
            head: self.head.zeros_like(),
            g_ra: self.g_ra.zeros_like(),
            g_de: self.g_de.zeros_like(),
            g_dp: self.g_dp.zeros_like(),
        }
    }

    pub fn zero_hidden(&self, batch: usize) -> Hidden {
        match &self.core {
            Core::Gru(g) => g.zero_hidden(batch),
            Core::Feedforward(_) => Vec::new(),
        }
    }

    pub fn belief_encode(&self, proprio: &ArrayView2<f64>, extero_noisy: &ArrayView2<f64>, hidden: &Hidden) -> BeliefStep {
        let l_e = encode_feet(&self.g_e, extero_noisy);
        let x = hcat(&[proprio.view(), l_e.view()]);
        let (pre_belief, hidden) = match &self.core {
            Core::Gru(g) => {
                let h = g.step(&x.view(), hidden);
                (h.last().expect("layers").clone(), h)
            }
            Core::Feedforward(m) => (m.forward(&x.view()), Vec::new()),
        };
        let gb = self.g_b.forward(&pre_belief.view());
        let alpha = if self.arch.gated {
            self.g_a.forward(&pre_belief.view()).mapv(sigmoid)
        } else {
            Mat::zeros((gb.nrows(), EXTERO_LATENT_DIM))
        };
        let belief = gated_belief(&gb, &l_e, &alpha);
        BeliefStep { belief, pre_belief, alpha, l_e, hidden }
    }

    pub fn student_action(&self, proprio: &ArrayView2<f64>, belief: &Mat) -> Mat {
        self.head.forward(&hcat(&[proprio.view(), belief.view()]).view())
    }

    /// Returns `(ô_e, ŝ_p)`.
    pub fn belief_decode(&self, pre_belief: &Mat, belief: &Mat, l_e: &Mat) -> (Mat, Mat) {
        let dec_in = if self.arch.gated {
            let alpha_r = self.g_ra.forward(&pre_belief.view()).mapv(sigmoid);
            gated_belief(belief, l_e, &alpha_r)
        } else {
            belief.clone()
        };
        (self.g_de.forward(&dec_in.view()), self.g_dp.forward(&belief.view()))
    }

    /// Policy step: action mean and the new belief/hidden state.
    pub fn act(&self, proprio: &ArrayView2<f64>, extero_noisy: &ArrayView2<f64>, hidden: &Hidden) -> (Mat, BeliefStep) {
        let step = self.belief_encode(proprio, extero_noisy, hidden);
        (self.student_action(proprio, &step.belief), step)
    }

    /// Runs a sequence step by step from `hidden`; returns beliefs per step.
    pub fn encode_sequence(&self, proprio: &[Mat], extero_noisy: &[Mat], hidden: &Hidden) -> (Vec<Mat>, Hidden) {
        let mut h = hidden.clone();
        let mut out = Vec::with_capacity(proprio.len());
        for (p, e) in proprio.iter().zip(extero_noisy) {
            let step = self.belief_encode(&p.view(), &e.view(), &h);
            h = step.hidden;
            out.push(step.belief);
        }
        (out, h)
    }

    fn step_cached(&self, proprio: &ArrayView2<f64>, extero: &ArrayView2<f64>, hidden: &Hidden) -> (Mat, Mat, Mat, Hidden, StepCache) {
        let (l_e, g_e) = encode_feet_cached(&self.g_e, extero);
        let x = hcat(&[proprio.view(), l_e.view()]);
        let (pre, hidden, core) = match &self.core {
            Core::Gru(g) => {
                let (h, c) = g.step_cached(&x.view(), hidden);
                (h.last().expect("layers").clone(), h, CoreCache::Gru(c))
            }
            Core::Feedforward(m) => {
                let (y, c) = m.forward_cached(&x.view());
                (y, Vec::new(), CoreCache::Feedforward(c))
            }
        };
        let (gb, g_b) = self.g_b.forward_cached(&pre.view());
        let (belief, g_a) = if self.arch.gated {
            let (a, c) = self.g_a.forward_cached(&pre.view());
            let alpha = a.mapv(sigmoid);
            (gated_belief(&gb, &l_e, &alpha), Some((c, alpha)))
        } else {
            (gb, None)
        };
        let (action, head) = self.head.forward_cached(&hcat(&[proprio.view(), belief.view()]).view());
        let (dec_in, g_ra) = if self.arch.gated {
            let (a, c) = self.g_ra.forward_cached(&pre.view());
            let alpha_r = a.mapv(sigmoid);
            (gated_belief(&belief, &l_e, &alpha_r), Some((c, alpha_r)))
        } else {
            (belief.clone(), None)
        };
        let (extero_hat, g_de) = self.g_de.forward_cached(&dec_in.view());
        let (priv_hat, g_dp) = self.g_dp.forward_cached(&belief.view());
        let cache = StepCache { g_e, l_e, core, g_a, g_b, head, g_ra, g_de, g_dp };
        (action, extero_hat, priv_hat, hidden, cache)
    }

    fn backward_step(
        &self,
        c: &StepCache,
        d_action: &Mat,
        d_extero_hat: &Mat,
        d_priv_hat: &Mat,
        dh_next: &Hidden,
        grad: &mut StudentNet,
    ) -> Hidden {
        let d_head_in = self.head.backward(&c.head, d_action, &mut grad.head);
        let mut d_b = d_head_in.slice(s![.., PROPRIO_DIM..]).to_owned();
        let d_dec_in = self.g_de.backward(&c.g_de, d_extero_hat, &mut grad.g_de);
        d_b += &d_dec_in;
        d_b += &self.g_dp.backward(&c.g_dp, d_priv_hat, &mut grad.g_dp);

        let rows = d_b.nrows();
        let mut d_le = Mat::zeros((rows, EXTERO_LATENT_DIM));
        let mut d_pre = Mat::zeros((rows, RNN_HIDDEN));
        if let Some((cache, alpha_r)) = &c.g_ra {
            let d_skip = d_dec_in.slice(s![.., ..EXTERO_LATENT_DIM]);
            d_le += &(&d_skip * alpha_r);
            let d_a = &(&d_skip * &c.l_e) * &alpha_r.mapv(|a| a * (1.0 - a));
            d_pre += &self.g_ra.backward(cache, &d_a, &mut grad.g_ra);
        }
        if let Some((cache, alpha)) = &c.g_a {
            let d_skip = d_b.slice(s![.., ..EXTERO_LATENT_DIM]);
            d_le += &(&d_skip * alpha);
            let d_a = &(&d_skip * &c.l_e) * &alpha.mapv(|a| a * (1.0 - a));
            d_pre += &self.g_a.backward(cache, &d_a, &mut grad.g_a);
        }
        d_pre += &self.g_b.backward(&c.g_b, &d_b, &mut grad.g_b);

        let (dx, dh_prev) = match (&self.core, &c.core, &mut grad.core) {
            (Core::Gru(g), CoreCache::Gru(cache), Core::Gru(gg)) => g.backward_step(cache, &d_pre, dh_next, gg),
            (Core::Feedforward(m), CoreCache::Feedforward(cache), Core::Feedforward(gm)) => {
                (m.backward(cache, &d_pre, gm), Vec::new())
            }
            _ => unreachable!("gradient buffer shape matches the network"),
        };
        d_le += &dx.slice(s![.., PROPRIO_DIM..]);
        backward_feet(&self.g_e, &c.g_e, &d_le, &mut grad.g_e);
        dh_prev
    }

    /// Forward over a truncated segment from `hidden`, then backprop inside it.
    ///
    /// Gradients of `scale · Σ_t (ℓ_bc,t + recon_weight · ℓ_re,t)` are
    /// accumulated into `grad`; nothing flows into `hidden`. Returns the
    /// unscaled loss sums and the hidden state after the segment.
    pub fn segment_loss_and_grad(
        &self,
        steps: &[StepData],
        hidden: &Hidden,
        scale: f64,
        recon_weight: f64,
        grad: &mut StudentNet,
    ) -> (SegmentLoss, Hidden) {
        let mut h = hidden.clone();
        let mut caches = Vec::with_capacity(steps.len());
        let mut residuals = Vec::with_capacity(steps.len());
        let mut masked = Vec::with_capacity(steps.len());
        let mut loss = SegmentLoss { steps: steps.len(), ..SegmentLoss::default() };
        for d in steps {
            let h_in = mask_rows(&h, &d.keep);
            let (action, e_hat, p_hat, h_next, cache) = self.step_cached(&d.proprio.view(), &d.extero_noisy.view(), &h_in);
            let ra = &action - &d.teacher_action;
            let re = &e_hat - &d.extero_target;
            let rp = &p_hat - &d.priv_target;
            let rows = ra.nrows() as f64;
            loss.bc += ra.mapv(|v| v * v).sum() / (rows * ACTION_DIM as f64);
            loss.re += (re.mapv(|v| v * v).sum() + rp.mapv(|v| v * v).sum()) / (rows * RECON_DIM as f64);
            caches.push(cache);
            residuals.push((ra, re, rp));
            masked.push(d.keep.clone());
            h = h_next;
        }
        let mut dh = self.zero_hidden(steps.first().map_or(0, |d| d.proprio.nrows()));
        for t in (0..steps.len()).rev() {
            let (ra, re, rp) = &residuals[t];
            let rows = ra.nrows() as f64;
            let kb = 2.0 * scale / (rows * ACTION_DIM as f64);
            let kr = recon_weight * 2.0 * scale / (rows * RECON_DIM as f64);
            let dh_prev = self.backward_step(&caches[t], &(ra * kb), &(re * kr), &(rp * kr), &dh, grad);
            dh = mask_rows(&dh_prev, &masked[t]);
        }
        (loss, h)
    }
}

impl Params for Core {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Core::Gru(g) => g.visit(f),
            Core::Feedforward(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            Core::Gru(g) => g.visit_mut(f),
            Core::Feedforward(m) => m.visit_mut(f),
        }
    }
}

impl Params for StudentNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.g_e.visit(f);
        self.core.visit(f);
        self.g_a.visit(f);
        self.g_b.visit(f);
        self.head.visit(f);
        self.g_ra.visit(f);
        self.g_de.visit(f);
        self.g_dp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.g_e.visit_mut(f);
        self.core.visit_mut(f);
        self.g_a.visit_mut(f);
        self.g_b.visit_mut(f);
        self.head.visit_mut(f);
        self.g_ra.visit_mut(f);
        self.g_de.visit_mut(f);
        self.g_dp.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn step_data(batch: usize, rng: &mut ChaCha8Rng) -> StepData {
        StepData {
            proprio: rand_mat(batch, PROPRIO_DIM, rng),
            extero_noisy: rand_mat(batch, EXTERO_DIM, rng),
            teacher_action: rand_mat(batch, ACTION_DIM, rng),
            extero_target: rand_mat(batch, EXTERO_DIM, rng),
            priv_target: rand_mat(batch, PRIVILEGED_DIM, rng),
            keep: Array1::ones(batch),
        }
    }

    fn seq_loss(net: &StudentNet, steps: &[StepData]) -> f64 {
        let mut g = net.zeros_like();
        let (l, _) = net.segment_loss_and_grad(steps, &net.zero_hidden(steps[0].proprio.nrows()), 1.0, 0.5, &mut g);
        combined_loss(l.bc, l.re)
    }

    #[test]
    fn teacher_output_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = TeacherNet::new(&mut rng);
        let out = t.forward(&rand_mat(2, PROPRIO_DIM, &mut rng).view(), &rand_mat(2, EXTERO_DIM, &mut rng).view(), &rand_mat(2, PRIVILEGED_DIM, &mut rng).view());
        assert_eq!(out.mean.dim(), (2, 16));
        assert_eq!(out.l_e.dim(), (2, 96));
        assert_eq!(out.l_p.dim(), (2, 24));
        assert_eq!(t.head.sizes(), vec![253, 256, 160, 128, 16]);
        assert_eq!(t.g_e.sizes(), vec![52, 80, 60, 24]);
        assert_eq!(t.g_p.sizes(), vec![50, 64, 32, 24]);
        assert!(t.log_std.iter().all(|&v| (v - 0.3f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn identical_feet_give_identical_latents_and_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TeacherNet::new(&mut rng);
        let block = rand_mat(1, POINTS_PER_FOOT, &mut rng);
        let extero = hcat(&[block.view(), block.view(), block.view(), block.view()]);
        let p = rand_mat(1, PROPRIO_DIM, &mut rng);
        let q = rand_mat(1, PRIVILEGED_DIM, &mut rng);
        let out = t.forward(&p.view(), &extero.view(), &q.view());
        for foot in 1..4 {
            for j in 0..FOOT_LATENT_DIM {
                assert_eq!(out.l_e[[0, j]], out.l_e[[0, foot * FOOT_LATENT_DIM + j]]);
            }
        }
        let again = t.forward(&p.view(), &extero.view(), &q.view());
        assert_eq!(out.mean, again.mean);
    }

    #[test]
    fn teacher_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = TeacherNet::new(&mut rng);
        let (p, e, q) = (rand_mat(3, PROPRIO_DIM, &mut rng), rand_mat(3, EXTERO_DIM, &mut rng), rand_mat(3, PRIVILEGED_DIM, &mut rng));
        let loss = |n: &TeacherNet| n.forward(&p.view(), &e.view(), &q.view()).mean.mapv(|v| v * v).sum() * 0.5;
        let (out, cache) = t.forward_cached(&p.view(), &e.view(), &q.view());
        let mut g = t.zeros_like();
        t.backward(&cache, &out.mean, &mut g);
        let flat = t.flatten();
        let gf = g.flatten();
        let mut probe = ChaCha8Rng::seed_from_u64(3);
        let n_trunk = flat.len() - ACTION_DIM;
        for _ in 0..10 {
            let i = probe.random_range(0..n_trunk);
            let mut n = t.clone();
            let mut v = flat.clone();
            v[i] += 1e-6;
            n.assign(&v);
            let lp = loss(&n);
            v[i] -= 2e-6;
            n.assign(&v);
            let lm = loss(&n);
            let fd = (lp - lm) / 2e-6;
            assert!((fd - gf[i]).abs() <= 1e-4 * fd.abs().max(gf[i].abs()) + 1e-8, "{i}: {fd} vs {}", gf[i]);
        }
    }

    #[test]
    fn closed_gate_leaves_only_belief_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = StudentNet::new(StudentArch::default(), &mut rng);
        s.g_a.layers.last_mut().unwrap().b.fill(-1e3);
        s.g_ra.layers.last_mut().unwrap().b.fill(-1e3);
        let p = rand_mat(2, PROPRIO_DIM, &mut rng);
        let e = rand_mat(2, EXTERO_DIM, &mut rng);
        let step = s.belief_encode(&p.view(), &e.view(), &s.zero_hidden(2));
        let gb = s.g_b.forward(&step.pre_belief.view());
        assert!((&step.belief - &gb).iter().all(|v| v.abs() < 1e-12));
        // decoder output depends on b only
        let (oe, _) = s.belief_decode(&step.pre_belief, &step.belief, &step.l_e);
        let (oe2, _) = s.belief_decode(&step.pre_belief, &step.belief, &rand_mat(2, 96, &mut rng));
        assert!((&oe - &oe2).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn alpha_in_open_unit_interval_and_decode_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = StudentNet::new(StudentArch::default(), &mut rng);
        let step = s.belief_encode(&rand_mat(8, PROPRIO_DIM, &mut rng).view(), &rand_mat(8, EXTERO_DIM, &mut rng).view(), &s.zero_hidden(8));
        assert_eq!(step.alpha.dim(), (8, 96));
        assert_eq!(step.belief.dim(), (8, 120));
        assert!(step.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        let (oe, sp) = s.belief_decode(&step.pre_belief, &step.belief, &step.l_e);
        assert_eq!((oe.ncols(), sp.ncols()), (208, 50));
    }

    #[test]
    fn history_changes_belief() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = StudentNet::new(StudentArch::default(), &mut rng);
        let p = rand_mat(1, PROPRIO_DIM, &mut rng);
        let e = rand_mat(1, EXTERO_DIM, &mut rng);
        let fresh = s.belief_encode(&p.view(), &e.view(), &s.zero_hidden(1));
        let mut h = s.zero_hidden(1);
        for _ in 0..5 {
            h = s.belief_encode(&rand_mat(1, PROPRIO_DIM, &mut rng).view(), &rand_mat(1, EXTERO_DIM, &mut rng).view(), &h).hidden;
        }
        let after = s.belief_encode(&p.view(), &e.view(), &h);
        assert!((&fresh.belief - &after.belief).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn recon_loss_on_zero_targets_is_output_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = StudentNet::new(StudentArch::default(), &mut rng);
        let mut d = step_data(3, &mut rng);
        d.extero_target.fill(0.0);
        d.priv_target.fill(0.0);
        let mut g = s.zeros_like();
        let (l, _) = s.segment_loss_and_grad(std::slice::from_ref(&d), &s.zero_hidden(3), 1.0, 0.5, &mut g);
        let step = s.belief_encode(&d.proprio.view(), &d.extero_noisy.view(), &s.zero_hidden(3));
        let (oe, sp) = s.belief_decode(&step.pre_belief, &step.belief, &step.l_e);
        let ms = (oe.mapv(|v| v * v).sum() + sp.mapv(|v| v * v).sum()) / (3.0 * 258.0);
        assert!((l.re - ms).abs() < 1e-12);
    }

    #[test]
    fn student_copies_teacher_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = TeacherNet::new(&mut rng);
        let s = StudentNet::from_teacher(&t, StudentArch::default(), &mut rng);
        let (p, e, q) = (rand_mat(2, PROPRIO_DIM, &mut rng), rand_mat(2, EXTERO_DIM, &mut rng), rand_mat(2, PRIVILEGED_DIM, &mut rng));
        let out = t.forward(&p.view(), &e.view(), &q.view());
        let b = hcat(&[out.l_e.view(), out.l_p.view()]);
        assert_eq!(s.student_action(&p.view(), &b), out.mean);
        assert_eq!(s.belief_encode(&p.view(), &e.view(), &s.zero_hidden(2)).l_e, out.l_e);
    }

    #[test]
    fn batch_and_stream_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = StudentNet::new(StudentArch::default(), &mut rng);
        let ps: Vec<Mat> = (0..6).map(|_| rand_mat(3, PROPRIO_DIM, &mut rng)).collect();
        let es: Vec<Mat> = (0..6).map(|_| rand_mat(3, EXTERO_DIM, &mut rng)).collect();
        let (batched, _) = s.encode_sequence(&ps, &es, &s.zero_hidden(3));
        for row in 0..3 {
            let p1: Vec<Mat> = ps.iter().map(|m| m.slice(s![row..row + 1, ..]).to_owned()).collect();
            let e1: Vec<Mat> = es.iter().map(|m| m.slice(s![row..row + 1, ..]).to_owned()).collect();
            let (single, _) = s.encode_sequence(&p1, &e1, &s.zero_hidden(1));
            for t in 0..6 {
                let diff = (&batched[t].slice(s![row..row + 1, ..]) - &single[t]).mapv(f64::abs);
                assert!(diff.iter().all(|&v| v < 1e-6));
            }
        }
    }

    fn gradient_probe(arch: StudentArch, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = StudentNet::new(arch, &mut rng);
        let mut steps: Vec<StepData> = (0..4).map(|_| step_data(2, &mut rng)).collect();
        steps[2].keep[1] = 0.0;
        let mut g = s.zeros_like();
        s.segment_loss_and_grad(&steps, &s.zero_hidden(2), 1.0, 0.5, &mut g);
        let flat = s.flatten();
        let gf = g.flatten();
        // probe parameters with non-negligible gradient across the whole vector
        let mut probe = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut checked = 0;
        while checked < 10 {
            let i = probe.random_range(0..flat.len());
            if gf[i].abs() < 1e-6 {
                continue;
            }
            let mut n = s.clone();
            let mut v = flat.clone();
            v[i] += 1e-5;
            n.assign(&v);
            let lp = seq_loss(&n, &steps);
            v[i] -= 2e-5;
            n.assign(&v);
            let lm = seq_loss(&n, &steps);
            let fd = (lp - lm) / 2e-5;
            let rel = (fd - gf[i]).abs() / fd.abs().max(gf[i].abs());
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {} rel {rel}", gf[i]);
            checked += 1;
        }
    }

    #[test]
    fn student_gradient_check_gated_gru() {
        gradient_probe(StudentArch::default(), 10);
    }

    #[test]
    fn student_gradient_check_plain_gru() {
        gradient_probe(StudentArch { gated: false, core: CoreKind::Gru }, 11);
    }

    #[test]
    fn student_gradient_check_feedforward() {
        gradient_probe(StudentArch { gated: true, core: CoreKind::Feedforward }, 12);
    }

    #[test]
    fn truncated_segments_sum_to_full_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = StudentNet::new(StudentArch::default(), &mut rng);
        let steps: Vec<StepData> = (0..25).map(|_| step_data(2, &mut rng)).collect();
        let mut g = s.zeros_like();
        let (full, h_full) = s.segment_loss_and_grad(&steps, &s.zero_hidden(2), 1.0, 0.5, &mut g);
        let mut h = s.zero_hidden(2);
        let (mut bc, mut re) = (0.0, 0.0);
        for chunk in steps.chunks(10) {
            let (l, next) = s.segment_loss_and_grad(chunk, &h, 1.0, 0.5, &mut g);
            bc += l.bc;
            re += l.re;
            h = next;
        }
        assert!((full.bc - bc).abs() < 1e-6 && (full.re - re).abs() < 1e-6);
        assert!(h.iter().zip(&h_full).all(|(a, b)| (a - b).iter().all(|v| v.abs() < 1e-6)));
    }

    #[test]
    fn loss_weighting() {
        assert_eq!(combined_loss(2.0, 4.0), 4.0);
    }

    proptest! {
        #[test]
        fn raising_one_gate_entry_moves_one_slot(j in 0usize..96, bump in 0.01f64..0.5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gb = rand_mat(1, BELIEF_DIM, &mut rng);
            let le = rand_mat(1, EXTERO_LATENT_DIM, &mut rng);
            let alpha = Mat::from_shape_fn((1, 96), |_| rng.random_range(0.01..0.49));
            let mut raised = alpha.clone();
            raised[[0, j]] += bump;
            let d = &gated_belief(&gb, &le, &raised) - &gated_belief(&gb, &le, &alpha);
            for k in 0..BELIEF_DIM {
                if k == j {
                    prop_assert!((d[[0, k]] - bump * le[[0, j]]).abs() < 1e-12);
                } else {
                    prop_assert_eq!(d[[0, k]], 0.0);
                }
            }
        }
    }
}
