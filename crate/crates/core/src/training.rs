//! Teacher PPO, student distillation, and the environment wrapper both use.

use ndarray::{s, Array1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::beliefnets::{new_critic, StepData, StudentArch, StudentNet, TeacherNet, TeacherPolicy};
use crate::curriculum::{student_schedule, CurriculumState, ParticleConfig, ParticleRef, TerrainMode};
use crate::error::{Error, Result};
use crate::expconfig::stream_rng;
use crate::nn::{clip_grad_norm, hcat, Adam, Hidden, Mat, Mlp, Params};
use crate::perception::{
    apply_noise, assemble, proprioception, regime_switch_step, sample_heights, Command, NoiseChannel, NoiseParams,
    ObservationBundle, RegimeTable, RunningNorm, EXTERO_DIM, PROPRIO_DIM,
};
use crate::quadsim::{self, privileged_state, randomize_episode, Action, RandomizationConfig, RobotModel, SimConfig, SimState, ACTION_DIM, PRIVILEGED_DIM};
use crate::rewards::{self, RewardBreakdown, TERM_NAMES};
use crate::terrain::{generate, TerrainPatch, HALF_EXTENT};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandConfig {
    pub vx_max: f64,
    pub vy_max: f64,
    pub wz_max: f64,
    pub zero_probability: f64,
}

impl Default for CommandConfig {
    fn default() -> Self {
        Self { vx_max: 1.0, vy_max: 1.0, wz_max: 1.2, zero_probability: 0.1 }
    }
}

/// Uniform command in the configured box, or all zeros with `zero_probability`.
/// Every draw happens regardless of the outcome.
pub fn sample_command<R: Rng + ?Sized>(rng: &mut R, cfg: &CommandConfig) -> Command {
    let u: f64 = rng.random();
    let vx = cfg.vx_max * rng.random_range(-1.0..=1.0);
    let vy = cfg.vy_max * rng.random_range(-1.0..=1.0);
    let wz = cfg.wz_max * rng.random_range(-1.0..=1.0);
    if u < cfg.zero_probability {
        Command::default()
    } else {
        Command::new(vx, vy, wz)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub episode_length: usize,
    pub resample_command_mid_episode: bool,
    pub command_resample_interval: usize,
    /// Re-draw the mapping regime halfway through each episode.
    pub regime_switch: bool,
    /// Episodes end (without failure) once the base is this close to the patch border.
    pub boundary_margin: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_length: 500,
            resample_command_mid_episode: false,
            command_resample_interval: 250,
            regime_switch: true,
            boundary_margin: 0.6,
        }
    }
}

/// Everything an environment needs besides its own state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct World {
    pub robot: RobotModel,
    pub sim: SimConfig,
    pub randomization: RandomizationConfig,
    pub noise: RegimeTable,
    pub env: EnvConfig,
    pub commands: CommandConfig,
    pub curriculum: ParticleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub terminal: bool,
    pub truncated: bool,
    /// Set on the last step of an episode.
    pub traversed: Option<bool>,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Env {
    pub patch: TerrainPatch,
    pub state: SimState,
    pub command: Command,
    pub noise: NoiseChannel,
    /// Fixed noise parameters instead of regime sampling.
    pub forced_noise: Option<NoiseParams>,
    pub c_sk: f64,
    pub step: usize,
    pub start: [f64; 2],
    pub particle: Option<ParticleRef>,
    pub rng: ChaCha8Rng,
    pub obs: ObservationBundle,
    /// Skip the noisy channel when nobody reads it.
    pub noisy: bool,
}

impl Env {
    pub fn new(world: &World, rng: ChaCha8Rng, noisy: bool) -> Self {
        let patch = TerrainPatch::flat();
        let state = SimState::nominal(&world.robot, &world.sim, &patch, 0.0, 0.0, 0.0);
        let obs = ObservationBundle { proprio: vec![], extero_clean: vec![], extero_noisy: vec![], privileged: vec![] };
        let mut env = Self {
            patch,
            state,
            command: Command::default(),
            noise: NoiseChannel::fixed(NoiseParams::zero()),
            forced_noise: None,
            c_sk: 0.0,
            step: 0,
            start: [0.0; 2],
            particle: None,
            rng,
            obs,
            noisy,
        };
        env.obs = env.observe(world, None);
        env
    }

    /// Starts a new episode on `patch` at `(x, y, yaw)`.
    pub fn reset_at(&mut self, world: &World, patch: TerrainPatch, particle: Option<ParticleRef>, pose: [f64; 3], c_k: f64, c_sk: f64) {
        let nominal = SimState::nominal(&world.robot, &world.sim, &patch, pose[0], pose[1], pose[2]);
        self.state = randomize_episode(&nominal, &world.robot, &world.sim, &world.randomization, &patch, c_k, &mut self.rng);
        self.patch = patch;
        self.particle = particle;
        self.command = sample_command(&mut self.rng, &world.commands);
        self.c_sk = c_sk;
        self.resample_noise(world);
        self.step = 0;
        self.start = [self.state.base_position.x, self.state.base_position.y];
        self.obs = self.observe(world, None);
    }

    pub fn reset(&mut self, world: &World, patch: TerrainPatch, particle: Option<ParticleRef>, c_k: f64, c_sk: f64) {
        self.reset_at(world, patch, particle, [0.0; 3], c_k, c_sk);
    }

    fn resample_noise(&mut self, world: &World) {
        match self.forced_noise.clone() {
            Some(params) => {
                self.noise = NoiseChannel::fixed(params);
                self.noise.redraw_episodic(&mut self.rng);
            }
            None => self.noise.resample(&mut self.rng, self.c_sk, &world.noise),
        }
    }

    fn observe(&mut self, world: &World, clean: Option<Vec<f64>>) -> ObservationBundle {
        let clean = clean.unwrap_or_else(|| sample_heights(&self.patch, &self.state));
        let noisy = if self.noisy {
            apply_noise(&self.patch, &self.state, &self.noise.params, &self.noise.episodic, self.c_sk, &mut self.rng)
        } else {
            clean.clone()
        };
        assemble(proprioception(&self.state, self.command, &world.sim), clean, noisy, privileged_state(&self.state).to_vec())
            .expect("observation dimensions are fixed by construction")
    }

    pub fn displacement(&self) -> f64 {
        (self.state.base_position.x - self.start[0]).hypot(self.state.base_position.y - self.start[1])
    }

    /// Distance that counts as traversing this episode's terrain.
    pub fn traverse_threshold(&self, world: &World) -> f64 {
        let speed = self.command.vx.hypot(self.command.vy);
        let duration = world.env.episode_length as f64 * world.sim.control_dt;
        world.curriculum.traverse_distance.min(0.5 * speed * duration)
    }

    pub fn step(&mut self, world: &World, action: &[f64], c_k: f64) -> StepOutcome {
        let (next, info) = quadsim::step(&self.state, &Action::from_slice(action), &self.patch, &world.robot, &world.sim);
        self.state = next;
        self.step += 1;
        let clean = sample_heights(&self.patch, &self.state);
        let reward = rewards::compute(&self.state, self.command, &clean, &world.robot, &world.sim, c_k);
        if world.env.resample_command_mid_episode && self.step % world.env.command_resample_interval.max(1) == 0 {
            self.command = sample_command(&mut self.rng, &world.commands);
        }
        if world.env.regime_switch && self.step == regime_switch_step(world.env.episode_length) {
            self.resample_noise(world);
        }
        self.obs = self.observe(world, Some(clean));
        let terminal = info.terminated();
        let limit = HALF_EXTENT - world.env.boundary_margin;
        let p = self.state.base_position;
        let outside = p.x.abs() > limit || p.y.abs() > limit;
        let truncated = !terminal && (self.step >= world.env.episode_length || outside);
        let traversed = (terminal || truncated).then(|| !terminal && self.displacement() >= self.traverse_threshold(world));
        StepOutcome { reward, terminal, truncated, traversed }
    }
}

/// Input whitening shared by teacher, critic and student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    pub proprio: RunningNorm,
    pub extero: RunningNorm,
    pub privileged: RunningNorm,
}

/// Normalized observation rows for a batch of environments.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    pub proprio: Mat,
    pub extero_clean: Mat,
    pub extero_noisy: Mat,
    pub privileged: Mat,
}

impl ObsBatch {
    pub fn teacher_input(&self) -> Mat {
        hcat(&[self.proprio.view(), self.extero_clean.view(), self.privileged.view()])
    }
}

fn rows_to_mat(rows: &[Vec<f64>], norm: &RunningNorm) -> Mat {
    let dim = norm.dim();
    let mut m = Mat::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        let mut v = m.row_mut(i);
        let slot = v.as_slice_mut().expect("row-major");
        slot.copy_from_slice(r);
        norm.normalize_in_place(slot);
    }
    m
}

impl ObsNorm {
    pub fn new() -> Self {
        Self { proprio: RunningNorm::new(PROPRIO_DIM), extero: RunningNorm::new(EXTERO_DIM), privileged: RunningNorm::new(PRIVILEGED_DIM) }
    }

    pub fn identity() -> Self {
        Self {
            proprio: RunningNorm::identity(PROPRIO_DIM),
            extero: RunningNorm::identity(EXTERO_DIM),
            privileged: RunningNorm::identity(PRIVILEGED_DIM),
        }
    }

    pub fn freeze(&mut self) {
        self.proprio.frozen = true;
        self.extero.frozen = true;
        self.privileged.frozen = true;
    }

    pub fn update(&mut self, obs: &[&ObservationBundle]) {
        let p: Vec<&[f64]> = obs.iter().map(|o| o.proprio.as_slice()).collect();
        let e: Vec<&[f64]> = obs.iter().map(|o| o.extero_clean.as_slice()).collect();
        let q: Vec<&[f64]> = obs.iter().map(|o| o.privileged.as_slice()).collect();
        self.proprio.update_batch(&p);
        self.extero.update_batch(&e);
        self.privileged.update_batch(&q);
    }

    pub fn batch(&self, obs: &[&ObservationBundle]) -> ObsBatch {
        let collect = |f: fn(&ObservationBundle) -> &Vec<f64>| obs.iter().map(|o| f(o).clone()).collect::<Vec<_>>();
        ObsBatch {
            proprio: rows_to_mat(&collect(|o| &o.proprio), &self.proprio),
            extero_clean: rows_to_mat(&collect(|o| &o.extero_clean), &self.extero),
            extero_noisy: rows_to_mat(&collect(|o| &o.extero_noisy), &self.extero),
            privileged: rows_to_mat(&collect(|o| &o.privileged), &self.privileged),
        }
    }
}

impl Default for ObsNorm {
    fn default() -> Self {
        Self::new()
    }
}

/// Generalized advantage estimation over one stream.
///
/// `next_values[t]` is `V(s_{t+1})` (the bootstrap for truncated episodes);
/// `terminals[t]` zeroes it; `ends[t]` cuts the trace after step `t`.
/// Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminals: &[bool],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if terminals[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * bootstrap - values[t];
        if ends[t] {
            running = 0.0;
        }
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// `min(ratio·A, clip(ratio, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LOG_2PI + 1.0)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub discount: f64,
    pub epochs: usize,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    /// Minibatch size at `reference_envs` environments; scaled with the env count.
    pub minibatch_size: usize,
    pub reference_envs: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_values: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            lr_decay: 0.9999,
            discount: 0.996,
            epochs: 2,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.005,
            minibatch_size: 8300,
            reference_envs: 1000,
            value_coef: 1.0,
            max_grad_norm: 1.0,
            normalize_values: true,
        }
    }
}

impl PpoConfig {
    pub fn minibatch_for(&self, num_envs: usize) -> usize {
        ((self.minibatch_size * num_envs) as f64 / self.reference_envs as f64).round().max(1.0) as usize
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_decay.powf(step as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub num_envs: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub terrain: TerrainMode,
    pub initial_c_k: f64,
    pub c_k_rate: f64,
    pub checkpoint_interval: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            num_envs: 1000,
            horizon: 250,
            iterations: 1000,
            terrain: TerrainMode::Adaptive,
            initial_c_k: 0.3,
            c_k_rate: 0.98,
            checkpoint_interval: 50,
        }
    }
}

/// One metrics CSV row. Fields that do not apply to a phase stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub l_bc: Option<f64>,
    pub l_re: Option<f64>,
    pub loss: Option<f64>,
    pub learning_rate: f64,
    pub reward_total: f64,
    pub r_lv: f64,
    pub r_av: f64,
    pub r_lvo: f64,
    pub r_b: f64,
    pub r_fc: f64,
    pub r_co: f64,
    pub r_j: f64,
    pub r_jc: f64,
    pub r_s: f64,
    pub r_tau: f64,
    pub r_slip: f64,
    pub c_k: f64,
    pub c_sk: f64,
    pub episodes: usize,
    pub mean_episode_length: Option<f64>,
    pub failure_rate: f64,
    pub terrain_difficulty: f64,
}

impl MetricsRow {
    fn set_rewards(&mut self, sums: &[f64; 12], steps: usize) {
        let n = steps.max(1) as f64;
        let t: Vec<f64> = sums.iter().map(|s| s / n).collect();
        self.r_lv = t[0];
        self.r_av = t[1];
        self.r_lvo = t[2];
        self.r_b = t[3];
        self.r_fc = t[4];
        self.r_co = t[5];
        self.r_j = t[6];
        self.r_jc = t[7];
        self.r_s = t[8];
        self.r_tau = t[9];
        self.r_slip = t[10];
        self.reward_total = t[11];
    }

    pub fn reward_term(&self, name: &str) -> Option<f64> {
        let idx = TERM_NAMES.iter().position(|n| *n == name)?;
        Some([self.r_lv, self.r_av, self.r_lvo, self.r_b, self.r_fc, self.r_co, self.r_j, self.r_jc, self.r_s, self.r_tau, self.r_slip][idx])
    }
}

/// Append-only metrics CSV.
pub struct MetricsWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { inner: csv::Writer::from_writer(out) }
    }

    /// Continues an existing file without repeating the header.
    pub fn appending(out: W) -> Self {
        Self { inner: csv::WriterBuilder::new().has_headers(false).from_writer(out) }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Running per-phase episode statistics.
#[derive(Default)]
struct EpisodeStats {
    reward_sums: [f64; 12],
    steps: usize,
    episodes: usize,
    failures: usize,
    length_sum: usize,
}

impl EpisodeStats {
    fn record(&mut self, env: &Env, o: &StepOutcome) {
        for (s, v) in self.reward_sums.iter_mut().zip(o.reward.terms()) {
            *s += v;
        }
        self.reward_sums[11] += o.reward.total;
        self.steps += 1;
        if o.done() {
            self.episodes += 1;
            self.failures += o.terminal as usize;
            self.length_sum += env.step;
        }
    }

    fn fill(&self, row: &mut MetricsRow) {
        row.set_rewards(&self.reward_sums, self.steps);
        row.episodes = self.episodes;
        row.mean_episode_length = (self.episodes > 0).then(|| self.length_sum as f64 / self.episodes as f64);
        row.failure_rate = if self.episodes > 0 { self.failures as f64 / self.episodes as f64 } else { 0.0 };
    }
}

fn choose_terrain(world: &World, mode: TerrainMode, curriculum: &CurriculumState, rng: &mut ChaCha8Rng) -> (TerrainPatch, Option<ParticleRef>) {
    match mode {
        TerrainMode::Flat => (TerrainPatch::flat(), None),
        TerrainMode::Adaptive if world.curriculum.kinds.is_empty() => (TerrainPatch::flat(), None),
        TerrainMode::Adaptive => {
            let (spec, particle) = curriculum.terrain.sample(rng);
            let patch = generate(&spec).expect("particles stay inside parameter ranges");
            (patch, Some(particle))
        }
    }
}

fn finish_episode(env: &mut Env, o: &StepOutcome, world: &World, mode: TerrainMode, curriculum: &mut CurriculumState, c_k: f64, c_sk: f64) {
    if let (Some(p), Some(t)) = (env.particle, o.traversed) {
        curriculum.terrain.record(p, t);
    }
    let (patch, particle) = choose_terrain(world, mode, curriculum, &mut env.rng);
    env.reset(world, patch, particle, c_k, c_sk);
}

fn check_finite(iteration: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, reason: format!("{what} is {v}") })
    }
}

fn mean_difficulty(c: &CurriculumState, mode: TerrainMode) -> f64 {
    if mode == TerrainMode::Flat || c.terrain.sets.is_empty() {
        return 0.0;
    }
    c.terrain.sets.iter().map(|s| s.mean_difficulty()).sum::<f64>() / c.terrain.sets.len() as f64
}

/// Complete, resumable PPO training state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherTrainer {
    pub world: World,
    pub cfg: TeacherConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    pub iteration: usize,
    pub gradient_steps: u64,
    pub teacher: TeacherNet,
    pub critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub norm: ObsNorm,
    pub returns: RunningNorm,
    pub curriculum: CurriculumState,
    pub envs: Vec<Env>,
    rng: ChaCha8Rng,
}

struct Rollout {
    proprio: Mat,
    extero: Mat,
    privileged: Mat,
    actions: Mat,
    log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

impl TeacherTrainer {
    pub fn new(world: World, cfg: TeacherConfig, ppo: PpoConfig, seed: u64) -> Result<Self> {
        let mut init = stream_rng(seed, 1);
        let teacher = TeacherNet::new(&mut init);
        let critic = new_critic(&mut init);
        let mut rng = stream_rng(seed, 0);
        let curriculum = CurriculumState::new(cfg.initial_c_k, cfg.c_k_rate, &world.curriculum, &mut rng)?;
        let mut envs: Vec<Env> = (0..cfg.num_envs).map(|i| Env::new(&world, stream_rng(seed, 1000 + i as u64), false)).collect();
        let mut curriculum = curriculum;
        for env in &mut envs {
            let (patch, particle) = choose_terrain(&world, cfg.terrain, &curriculum, &mut env.rng);
            env.reset(&world, patch, particle, curriculum.c_k, 0.0);
        }
        curriculum.c_sk = 0.0;
        Ok(Self {
            actor_opt: Adam::new(ppo.learning_rate, teacher.num_params()),
            critic_opt: Adam::new(ppo.learning_rate, critic.num_params()),
            world,
            cfg,
            ppo,
            seed,
            iteration: 0,
            gradient_steps: 0,
            teacher,
            critic,
            norm: ObsNorm::new(),
            returns: RunningNorm::new(1),
            curriculum,
            envs,
            rng,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.ppo.learning_rate_at(self.gradient_steps)
    }

    fn value_scale(&self) -> (f64, f64) {
        if self.ppo.normalize_values && self.returns.count > 1.0 {
            (self.returns.mean[0], (self.returns.variance()[0] + 1e-8).sqrt())
        } else {
            (0.0, 1.0)
        }
    }

    fn values(&self, norm: &ObsNorm, obs: &[&ObservationBundle], scale: (f64, f64)) -> Vec<f64> {
        if obs.is_empty() {
            return Vec::new();
        }
        let b = norm.batch(obs);
        self.critic.forward(&b.teacher_input().view()).column(0).iter().map(|v| v * scale.1 + scale.0).collect()
    }

    fn collect(&mut self, stats: &mut EpisodeStats) -> Rollout {
        let n = self.envs.len();
        let horizon = self.cfg.horizon;
        let frozen = self.norm.clone();
        let scale = self.value_scale();
        let c_k = self.curriculum.c_k;
        let std: Vec<f64> = self.teacher.log_std.iter().map(|l| l.exp()).collect();
        let log_std = self.teacher.log_std.to_vec();

        let total = n * horizon;
        let mut proprio = Mat::zeros((total, PROPRIO_DIM));
        let mut extero = Mat::zeros((total, EXTERO_DIM));
        let mut privileged = Mat::zeros((total, PRIVILEGED_DIM));
        let mut actions = Mat::zeros((total, ACTION_DIM));
        let mut log_probs = vec![0.0; total];
        // time-major [t][env]
        let mut rewards = vec![0.0; total];
        let mut values = vec![0.0; total];
        let mut next_values = vec![0.0; total];
        let mut terminals = vec![false; total];
        let mut ends = vec![false; total];

        for t in 0..horizon {
            let obs: Vec<&ObservationBundle> = self.envs.iter().map(|e| &e.obs).collect();
            let batch = frozen.batch(&obs);
            self.norm.update(&obs);
            let mean = self.teacher.forward(&batch.proprio.view(), &batch.extero_clean.view(), &batch.privileged.view()).mean;
            let v = self.critic.forward(&batch.teacher_input().view());
            let rows = t * n..(t + 1) * n;
            proprio.slice_mut(s![rows.clone(), ..]).assign(&batch.proprio);
            extero.slice_mut(s![rows.clone(), ..]).assign(&batch.extero_clean);
            privileged.slice_mut(s![rows.clone(), ..]).assign(&batch.privileged);
            let mut finals: Vec<(usize, ObservationBundle)> = Vec::new();
            for i in 0..n {
                let k = t * n + i;
                values[k] = v[[i, 0]] * scale.1 + scale.0;
                let m = mean.row(i);
                let a: Vec<f64> = (0..ACTION_DIM).map(|j| m[j] + std[j] * self.rng.sample::<f64, _>(StandardNormal)).collect();
                log_probs[k] = gaussian_log_prob(&a, m.as_slice().expect("row"), &log_std);
                actions.row_mut(k).assign(&Array1::from(a.clone()));
                let env = &mut self.envs[i];
                let o = env.step(&self.world, &a, c_k);
                stats.record(env, &o);
                rewards[k] = o.reward.total;
                terminals[k] = o.terminal;
                ends[k] = o.done();
                if o.truncated {
                    finals.push((k, env.obs.clone()));
                }
                if o.done() {
                    finish_episode(env, &o, &self.world, self.cfg.terrain, &mut self.curriculum, c_k, 0.0);
                }
            }
            let fin: Vec<&ObservationBundle> = finals.iter().map(|(_, o)| o).collect();
            for ((k, _), v) in finals.iter().zip(self.values(&frozen, &fin, scale)) {
                next_values[*k] = v;
            }
        }
        let obs: Vec<&ObservationBundle> = self.envs.iter().map(|e| &e.obs).collect();
        let last = self.values(&frozen, &obs, scale);
        for t in 0..horizon {
            for i in 0..n {
                let k = t * n + i;
                if !ends[k] {
                    next_values[k] = if t + 1 < horizon { values[k + n] } else { last[i] };
                }
            }
        }
        let mut advantages = vec![0.0; total];
        let mut returns = vec![0.0; total];
        for i in 0..n {
            let idx: Vec<usize> = (0..horizon).map(|t| t * n + i).collect();
            let pick = |v: &[f64]| idx.iter().map(|&k| v[k]).collect::<Vec<_>>();
            let pickb = |v: &[bool]| idx.iter().map(|&k| v[k]).collect::<Vec<_>>();
            let (a, r) = gae(&pick(&rewards), &pick(&values), &pick(&next_values), &pickb(&terminals), &pickb(&ends), self.ppo.discount, self.ppo.gae_lambda);
            for (j, &k) in idx.iter().enumerate() {
                advantages[k] = a[j];
                returns[k] = r[j];
            }
        }
        Rollout { proprio, extero, privileged, actions, log_probs, advantages, returns }
    }

    /// One rollout plus PPO update. On divergence the networks are left at
    /// their pre-update values.
    pub fn iterate(&mut self) -> Result<MetricsRow> {
        let mut stats = EpisodeStats::default();
        let data = self.collect(&mut stats);
        if self.ppo.normalize_values {
            let r: Vec<[f64; 1]> = data.returns.iter().map(|&v| [v]).collect();
            self.returns.update_batch(&r);
        }
        let scale = self.value_scale();
        let snapshot = (self.teacher.clone(), self.critic.clone(), self.actor_opt.clone(), self.critic_opt.clone(), self.gradient_steps);

        let total = data.log_probs.len();
        let mb = self.ppo.minibatch_for(self.envs.len()).min(total);
        let mut order: Vec<usize> = (0..total).collect();
        let (mut pl_sum, mut vl_sum, mut batches) = (0.0, 0.0, 0usize);
        let result: Result<()> = (|| {
            for _ in 0..self.ppo.epochs {
                order.shuffle(&mut self.rng);
                for chunk in order.chunks(mb) {
                    let (pl, vl) = self.minibatch(&data, chunk, scale)?;
                    pl_sum += pl;
                    vl_sum += vl;
                    batches += 1;
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            (self.teacher, self.critic, self.actor_opt, self.critic_opt, self.gradient_steps) = snapshot;
            return Err(e);
        }

        let mut row = MetricsRow {
            iteration: self.iteration,
            policy_loss: Some(pl_sum / batches.max(1) as f64),
            value_loss: Some(vl_sum / batches.max(1) as f64),
            entropy: Some(gaussian_entropy(self.teacher.log_std.as_slice().expect("contiguous"))),
            learning_rate: self.learning_rate(),
            c_k: self.curriculum.c_k,
            c_sk: 0.0,
            terrain_difficulty: mean_difficulty(&self.curriculum, self.cfg.terrain),
            ..MetricsRow::default()
        };
        stats.fill(&mut row);
        if self.cfg.terrain == TerrainMode::Adaptive {
            self.curriculum.terrain.update(&self.world.curriculum, &mut self.rng);
        }
        self.curriculum.advance();
        self.iteration += 1;
        Ok(row)
    }

    fn minibatch(&mut self, data: &Rollout, idx: &[usize], scale: (f64, f64)) -> Result<(f64, f64)> {
        let p = data.proprio.select(Axis(0), idx);
        let e = data.extero.select(Axis(0), idx);
        let q = data.privileged.select(Axis(0), idx);
        let a = data.actions.select(Axis(0), idx);
        let m = idx.len() as f64;
        let adv: Vec<f64> = idx.iter().map(|&k| data.advantages[k]).collect();
        let mu = adv.iter().sum::<f64>() / m;
        let sd = (adv.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m).sqrt();
        let adv: Vec<f64> = adv.iter().map(|v| (v - mu) / (sd + 1e-8)).collect();

        let (out, cache) = self.teacher.forward_cached(&p.view(), &e.view(), &q.view());
        let log_std = self.teacher.log_std.to_vec();
        let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
        let mut d_mean = Mat::zeros(out.mean.raw_dim());
        let mut d_log_std = vec![0.0; ACTION_DIM];
        let mut policy_loss = 0.0;
        for (r, &k) in idx.iter().enumerate() {
            let mean = out.mean.row(r);
            let act = a.row(r);
            let lp = gaussian_log_prob(act.as_slice().expect("row"), mean.as_slice().expect("row"), &log_std);
            let ratio = (lp - data.log_probs[k]).exp();
            let surr = clipped_surrogate(ratio, adv[r], self.ppo.clip);
            policy_loss -= surr / m;
            // gradient flows only where the unclipped branch is selected
            if ratio * adv[r] <= surr {
                let g = -adv[r] * ratio / m;
                for j in 0..ACTION_DIM {
                    let diff = act[j] - mean[j];
                    d_mean[[r, j]] = g * diff * inv_var[j];
                    d_log_std[j] += g * (diff * diff * inv_var[j] - 1.0);
                }
            }
        }
        let entropy = gaussian_entropy(&log_std);
        check_finite(self.iteration, "policy loss", policy_loss)?;

        let mut grad = self.teacher.zeros_like();
        self.teacher.backward(&cache, &d_mean, &mut grad);
        for j in 0..ACTION_DIM {
            grad.log_std[j] = d_log_std[j] - self.ppo.entropy_coef;
        }

        let full = hcat(&[p.view(), e.view(), q.view()]);
        let (v, vcache) = self.critic.forward_cached(&full.view());
        let mut dv = Mat::zeros(v.raw_dim());
        let mut value_loss = 0.0;
        for (r, &k) in idx.iter().enumerate() {
            let target = (data.returns[k] - scale.0) / scale.1;
            let diff = v[[r, 0]] - target;
            value_loss += diff * diff / m;
            dv[[r, 0]] = self.ppo.value_coef * 2.0 * diff / m;
        }
        check_finite(self.iteration, "value loss", value_loss)?;
        let mut cgrad = self.critic.zeros_like();
        self.critic.backward(&vcache, &dv, &mut cgrad);

        clip_grad_norm(&mut grad, self.ppo.max_grad_norm);
        clip_grad_norm(&mut cgrad, self.ppo.max_grad_norm);
        let lr = self.learning_rate();
        self.actor_opt.lr = lr;
        self.critic_opt.lr = lr;
        self.actor_opt.step(&mut self.teacher, &grad);
        self.critic_opt.step(&mut self.critic, &cgrad);
        self.gradient_steps += 1;
        if !self.teacher.all_finite() || !self.critic.all_finite() {
            return Err(Error::Diverged { iteration: self.iteration, reason: "non-finite parameters".into() });
        }
        Ok((policy_loss - self.ppo.entropy_coef * entropy, value_loss))
    }
}

/// Frozen affine teacher, handy as a known distillation target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTeacher {
    /// `(133 + 208 + 50) × 16`.
    pub w: Mat,
    pub b: Array1<f64>,
}

impl LinearTeacher {
    pub fn random<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Self {
        let inputs = PROPRIO_DIM + EXTERO_DIM + PRIVILEGED_DIM;
        let k = scale / (inputs as f64).sqrt();
        Self {
            w: Mat::from_shape_fn((inputs, ACTION_DIM), |_| k * rng.random_range(-1.0..1.0)),
            b: Array1::from_shape_fn(ACTION_DIM, |_| 0.1 * scale * rng.random_range(-1.0..1.0)),
        }
    }
}

impl TeacherPolicy for LinearTeacher {
    fn action_mean(&self, proprio: &ArrayView2<f64>, extero: &ArrayView2<f64>, privileged: &ArrayView2<f64>) -> Mat {
        hcat(&[proprio.view(), extero.view(), privileged.view()]).dot(&self.w) + &self.b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub num_envs: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer_epochs: usize,
    pub tbptt: usize,
    pub recon_weight: f64,
    pub max_grad_norm: f64,
    pub arch: StudentArch,
    /// Overrides the scheduled terrain mode.
    pub terrain: Option<TerrainMode>,
    /// Overrides the scheduled noise factor.
    pub c_sk: Option<f64>,
    /// Domain-randomization factor for student rollouts.
    pub c_k: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            num_envs: 300,
            horizon: 400,
            epochs: 150,
            learning_rate: 5e-4,
            optimizer_epochs: 2,
            tbptt: 10,
            recon_weight: 0.5,
            max_grad_norm: 1.0,
            arch: StudentArch::default(),
            terrain: None,
            c_sk: None,
            c_k: 1.0,
        }
    }
}

impl StudentConfig {
    pub fn schedule(&self, epoch: usize) -> (f64, TerrainMode) {
        let (c_sk, mode) = student_schedule(epoch);
        (self.c_sk.unwrap_or(c_sk), self.terrain.unwrap_or(mode))
    }
}

/// Complete, resumable distillation state. The teacher is supplied per call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentTrainer {
    pub world: World,
    pub cfg: StudentConfig,
    pub seed: u64,
    pub epoch: usize,
    pub student: StudentNet,
    opt: Adam,
    /// Teacher's input statistics, frozen.
    pub norm: ObsNorm,
    pub curriculum: CurriculumState,
    pub envs: Vec<Env>,
    hidden: Hidden,
    fresh: Vec<bool>,
    rng: ChaCha8Rng,
}

impl StudentTrainer {
    pub fn new(world: World, cfg: StudentConfig, seed: u64, student: StudentNet, mut norm: ObsNorm) -> Result<Self> {
        if student.arch != cfg.arch {
            return Err(Error::Invalid("student architecture does not match config".into()));
        }
        norm.freeze();
        let mut rng = stream_rng(seed, 2);
        let mut curriculum = CurriculumState::new(cfg.c_k.clamp(1e-6, 1.0), 0.98, &world.curriculum, &mut rng)?;
        curriculum.c_k = cfg.c_k;
        let (c_sk, mode) = cfg.schedule(0);
        curriculum.c_sk = c_sk;
        let mut envs: Vec<Env> = (0..cfg.num_envs).map(|i| Env::new(&world, stream_rng(seed, 100_000 + i as u64), true)).collect();
        for env in &mut envs {
            let (patch, particle) = choose_terrain(&world, mode, &curriculum, &mut env.rng);
            env.reset(&world, patch, particle, cfg.c_k, c_sk);
        }
        Ok(Self {
            opt: Adam::new(cfg.learning_rate, student.num_params()),
            hidden: student.zero_hidden(cfg.num_envs),
            fresh: vec![true; cfg.num_envs],
            world,
            cfg,
            seed,
            epoch: 0,
            student,
            norm,
            curriculum,
            envs,
            rng,
        })
    }

    fn collect(&mut self, teacher: &dyn TeacherPolicy, c_sk: f64, mode: TerrainMode, stats: &mut EpisodeStats) -> (Vec<StepData>, Hidden) {
        let n = self.envs.len();
        let h0 = self.hidden.clone();
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        for _ in 0..self.cfg.horizon {
            let obs: Vec<&ObservationBundle> = self.envs.iter().map(|e| &e.obs).collect();
            let b = self.norm.batch(&obs);
            let keep = Array1::from_iter(self.fresh.iter().map(|&f| if f { 0.0 } else { 1.0 }));
            let k = keep.view().insert_axis(Axis(1));
            let h_in: Hidden = self.hidden.iter().map(|m| m * &k).collect();
            let (action, belief) = self.student.act(&b.proprio.view(), &b.extero_noisy.view(), &h_in);
            self.hidden = belief.hidden;
            let teacher_action = teacher.action_mean(&b.proprio.view(), &b.extero_clean.view(), &b.privileged.view());
            for (i, env) in self.envs.iter_mut().enumerate() {
                let a = action.row(i).to_vec();
                let o = env.step(&self.world, &a, self.cfg.c_k);
                stats.record(env, &o);
                self.fresh[i] = o.done();
                if o.done() {
                    finish_episode(env, &o, &self.world, mode, &mut self.curriculum, self.cfg.c_k, c_sk);
                }
            }
            steps.push(StepData {
                proprio: b.proprio,
                extero_noisy: b.extero_noisy,
                teacher_action,
                extero_target: b.extero_clean,
                priv_target: b.privileged,
                keep,
            });
        }
        debug_assert_eq!(self.hidden.first().map_or(n, |h| h.nrows()), n);
        (steps, h0)
    }

    /// One on-policy rollout followed by TBPTT updates.
    pub fn epoch(&mut self, teacher: &dyn TeacherPolicy) -> Result<MetricsRow> {
        let (c_sk, mode) = self.cfg.schedule(self.epoch);
        self.curriculum.c_sk = c_sk;
        for env in &mut self.envs {
            env.c_sk = c_sk;
        }
        let mut stats = EpisodeStats::default();
        let (steps, h0) = self.collect(teacher, c_sk, mode, &mut stats);
        let snapshot = (self.student.clone(), self.opt.clone());

        let (mut bc_first, mut re_first, mut count_first) = (0.0, 0.0, 0usize);
        for pass in 0..self.cfg.optimizer_epochs {
            let mut h = h0.clone();
            for seg in steps.chunks(self.cfg.tbptt.max(1)) {
                let mut grad = self.student.zeros_like();
                let (loss, next) = self.student.segment_loss_and_grad(seg, &h, 1.0 / seg.len() as f64, self.cfg.recon_weight, &mut grad);
                let total = loss.bc + self.cfg.recon_weight * loss.re;
                if !total.is_finite() {
                    (self.student, self.opt) = snapshot;
                    return Err(Error::Diverged { iteration: self.epoch, reason: format!("distillation loss is {total}") });
                }
                if pass == 0 {
                    bc_first += loss.bc;
                    re_first += loss.re;
                    count_first += loss.steps;
                }
                clip_grad_norm(&mut grad, self.cfg.max_grad_norm);
                self.opt.step(&mut self.student, &grad);
                h = next;
            }
        }
        if !self.student.all_finite() {
            (self.student, self.opt) = snapshot;
            return Err(Error::Diverged { iteration: self.epoch, reason: "non-finite parameters".into() });
        }
        let l_bc = bc_first / count_first.max(1) as f64;
        let l_re = re_first / count_first.max(1) as f64;
        let mut row = MetricsRow {
            iteration: self.epoch,
            l_bc: Some(l_bc),
            l_re: Some(l_re),
            loss: Some(l_bc + self.cfg.recon_weight * l_re),
            learning_rate: self.opt.lr,
            c_k: self.cfg.c_k,
            c_sk,
            terrain_difficulty: mean_difficulty(&self.curriculum, mode),
            ..MetricsRow::default()
        };
        stats.fill(&mut row);
        if mode == TerrainMode::Adaptive {
            self.curriculum.terrain.update(&self.world.curriculum, &mut self.rng);
        }
        self.epoch += 1;
        Ok(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gae_three_step_hand_oracle() {
        let (g, l) = (0.9, 0.8);
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 1.0, 1.5];
        let nv = [1.0, 1.5, 2.0];
        let (adv, ret) = gae(&r, &v, &nv, &[false; 3], &[false, false, true], g, l);
        // δ0 = 1 + 0.9·1 − 0.5 = 1.4, δ1 = 2 + 1.35 − 1 = 2.35, δ2 = 3 + 1.8 − 1.5 = 3.3
        let a2 = 3.3;
        let a1 = 2.35 + 0.72 * a2;
        let a0 = 1.4 + 0.72 * a1;
        for (x, y) in adv.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-9);
        // terminal drops the bootstrap, an end cuts the trace
        let (adv, _) = gae(&r, &v, &nv, &[false, true, false], &[false, true, false], g, l);
        assert!((adv[1] - (2.0 - 1.0)).abs() < 1e-9);
        assert!((adv[0] - (1.4 + 0.72 * 1.0)).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_positive_advantage() {
        assert!((clipped_surrogate(1.5, 2.0, 0.2) - 1.2 * 2.0).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.1, 3.0, 0.2), 1.1 * 3.0);
    }

    #[test]
    fn learning_rate_decays_per_step() {
        let p = PpoConfig::default();
        assert!((p.learning_rate_at(1000) - 5e-4 * 0.9999f64.powi(1000)).abs() < 1e-18);
        assert_eq!(p.minibatch_for(1000), 8300);
        assert_eq!(p.minibatch_for(32), 266);
    }

    #[test]
    fn gaussian_helpers_match_closed_forms() {
        let ls = [0.1f64.ln(), 0.0];
        let lp = gaussian_log_prob(&[0.1, 2.0], &[0.0, 1.0], &ls);
        let expect = -0.5 - 0.1f64.ln() - 0.5 - 2.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-12);
        let h = gaussian_entropy(&[0.0]);
        assert!((h - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }

    #[test]
    fn command_sampler_bounds_and_zero_mass() {
        let cfg = CommandConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let mut zeros = 0;
        for _ in 0..n {
            let c = sample_command(&mut rng, &cfg);
            assert!(c.vx.abs() <= 1.0 && c.vy.abs() <= 1.0 && c.wz.abs() <= 1.2);
            zeros += (c == Command::default()) as usize;
        }
        let p = zeros as f64 / n as f64;
        assert!((p - 0.1).abs() <= 0.01, "{p}");
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            assert_eq!(sample_command(&mut a, &cfg), sample_command(&mut b, &cfg));
        }
    }

    #[test]
    fn episode_ends_at_length_without_failure() {
        let mut world = World::default();
        world.env.episode_length = 20;
        let mut env = Env::new(&world, ChaCha8Rng::seed_from_u64(1), false);
        env.reset(&world, TerrainPatch::flat(), None, 0.0, 0.0);
        let mut last = None;
        for _ in 0..20 {
            last = Some(env.step(&world, &[0.0; ACTION_DIM], 0.0));
        }
        let o = last.unwrap();
        assert!(o.truncated && !o.terminal);
        assert!(o.traversed.is_some());
    }

    fn tiny_teacher(seed: u64) -> TeacherTrainer {
        let world = World::default();
        let cfg = TeacherConfig { num_envs: 3, horizon: 8, terrain: TerrainMode::Flat, ..TeacherConfig::default() };
        TeacherTrainer::new(world, cfg, PpoConfig { minibatch_size: 4000, ..PpoConfig::default() }, seed).unwrap()
    }

    #[test]
    fn teacher_iterations_are_reproducible_and_resumable() {
        let mut a = tiny_teacher(7);
        let mut b = tiny_teacher(7);
        let ra = a.iterate().unwrap();
        assert_eq!(ra, b.iterate().unwrap());
        let saved = bincode::serialize(&a).unwrap();
        let mut resumed: TeacherTrainer = bincode::deserialize(&saved).unwrap();
        let next_a = a.iterate().unwrap();
        let next_r = resumed.iterate().unwrap();
        assert_eq!(next_a, next_r);
        assert_eq!(a.teacher, resumed.teacher);
        assert!(a.gradient_steps > 0);
        assert!((a.learning_rate() - 5e-4 * 0.9999f64.powf(a.gradient_steps as f64)).abs() < 1e-18);
    }

    #[test]
    fn student_epoch_runs_and_only_sees_noisy_input() {
        let world = World::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = LinearTeacher::random(0.1, &mut rng);
        let cfg = StudentConfig { num_envs: 2, horizon: 12, tbptt: 5, terrain: Some(TerrainMode::Flat), c_sk: Some(1.0), ..StudentConfig::default() };
        let student = StudentNet::new(cfg.arch, &mut rng);
        let mut t = StudentTrainer::new(world, cfg, 3, student, ObsNorm::identity()).unwrap();
        let row = t.epoch(&teacher).unwrap();
        assert!(row.l_bc.unwrap() > 0.0 && row.l_re.unwrap() > 0.0);
        assert_eq!(t.epoch, 1);
    }
}
