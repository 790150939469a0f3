//! Evaluation protocols.
//!
//! Policies are frozen here: nothing updates parameters or observation
//! statistics. Every trial owns an RNG stream derived from the eval seed.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Axis;
use plotters::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beliefnets::{BeliefStep, StudentNet, TeacherNet};
use crate::error::{Error, Result};
use crate::expconfig::{stream_rng, Checkpoint};
use crate::nn::{Hidden, Mat};
use crate::perception::{sample_heights, Command, NoiseParams, ObservationBundle, Regime, POINTS_PER_FOOT};
use crate::quadsim::{NUM_LEGS, PRIVILEGED_FRICTION_OFFSET};
use crate::terrain::{generate, FrictionRegion, TerrainKind, TerrainPatch, TerrainSpec, HALF_EXTENT};
use crate::training::{Env, ObsNorm, StepOutcome, World};

const EVAL_STREAM: u64 = 1 << 32;
/// Feet must be this far past the step edge to count as on top.
const STEP_CLEARANCE: f64 = 0.05;
const STEP_START_GAP: f64 = 1.0;
const TRAVERSE_START_X: f64 = -2.0;
const LATERAL_JITTER: f64 = 0.3;
const YAW_JITTER: f64 = 0.1;
const WILSON_Z: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    StepSweep,
    TerrainGrid,
    ActionDiff,
    ReconError,
    Introspection,
}

impl Protocol {
    pub const ALL: [Protocol; 5] =
        [Protocol::StepSweep, Protocol::TerrainGrid, Protocol::ActionDiff, Protocol::ReconError, Protocol::Introspection];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::StepSweep => "step_sweep",
            Protocol::TerrainGrid => "terrain_grid",
            Protocol::ActionDiff => "action_diff",
            Protocol::ReconError => "recon_error",
            Protocol::Introspection => "introspection",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Protocol::ALL.iter().map(|p| p.name()).collect();
            Error::Invalid(format!("unknown protocol `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Height-map corruption applied during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCondition {
    Clean,
    Small,
    Large,
    /// A training regime at full student curriculum.
    Regime(Regime),
}

impl NoiseCondition {
    pub fn params(self, world: &World) -> NoiseParams {
        match self {
            NoiseCondition::Clean => NoiseParams::zero(),
            NoiseCondition::Small => NoiseParams::small(),
            NoiseCondition::Large => NoiseParams::large(),
            NoiseCondition::Regime(r) => world.noise.spec(r).params(1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseCondition::Clean => "clean",
            NoiseCondition::Small => "z_small",
            NoiseCondition::Large => "z_large",
            NoiseCondition::Regime(r) => r.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid_size: usize,
    pub trials_per_cell: usize,
    pub grid_kind: TerrainKind,
    pub step_heights: Vec<f64>,
    pub step_trials: usize,
    pub step_command: f64,
    pub step_window_s: f64,
    pub success_distance: f64,
    pub success_speed: f64,
    pub success_window_s: f64,
    pub table_kinds: Vec<TerrainKind>,
    pub table_steps: usize,
    pub table_draws: usize,
    pub introspection_steps: usize,
    /// Environments simulated side by side.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_size: 11,
            trials_per_cell: 30,
            grid_kind: TerrainKind::GridSteps,
            step_heights: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            step_trials: 100,
            step_command: 0.8,
            step_window_s: 10.0,
            success_distance: 4.0,
            success_speed: 0.7,
            success_window_s: 10.0,
            table_kinds: TerrainKind::ALL.to_vec(),
            table_steps: 300,
            table_draws: 10,
            introspection_steps: 250,
            batch: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, usize); 7] = [
            ("eval.grid_size", self.grid_size),
            ("eval.trials_per_cell", self.trials_per_cell),
            ("eval.step_trials", self.step_trials),
            ("eval.table_steps", self.table_steps),
            ("eval.table_draws", self.table_draws),
            ("eval.introspection_steps", self.introspection_steps),
            ("eval.batch", self.batch),
        ];
        for (key, v) in checks {
            if v == 0 {
                return Err(Error::Config { key: key.into(), message: "must be at least 1".into() });
            }
        }
        for (key, v) in [
            ("eval.step_command", self.step_command),
            ("eval.success_speed", self.success_speed),
            ("eval.success_distance", self.success_distance),
            ("eval.success_window_s", self.success_window_s),
            ("eval.step_window_s", self.step_window_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::OutOfRange { key: key.into(), value: v, min: 0.0, max: f64::INFINITY });
            }
        }
        let room = 2.0 * HALF_EXTENT + TRAVERSE_START_X - 0.6;
        if self.success_distance > room {
            return Err(Error::OutOfRange { key: "eval.success_distance".into(), value: self.success_distance, min: 0.0, max: room });
        }
        if let Some(&h) = self.step_heights.iter().find(|h| !(0.0..=0.5).contains(*h)) {
            return Err(Error::OutOfRange { key: "eval.step_heights".into(), value: h, min: 0.0, max: 0.5 });
        }
        if self.table_kinds.is_empty() {
            return Err(Error::Config { key: "eval.table_kinds".into(), message: "needs at least one terrain kind".into() });
        }
        Ok(())
    }

    fn steps(world: &World, seconds: f64) -> usize {
        (seconds / world.sim.control_dt).round().max(1.0) as usize
    }
}

/// A frozen controller with the observation statistics it was trained on.
#[derive(Clone, Debug)]
pub enum Policy {
    Teacher { net: TeacherNet, norm: ObsNorm },
    Student { net: StudentNet, norm: ObsNorm },
}

impl Policy {
    /// Policy and world stored in a checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint) -> (Policy, World) {
        match ckpt {
            Checkpoint::Teacher(t) => {
                let t = *t;
                (Policy::Teacher { net: t.teacher, norm: t.norm }, t.world)
            }
            Checkpoint::Student { trainer, .. } => {
                let t = *trainer;
                (Policy::Student { net: t.student, norm: t.norm }, t.world)
            }
        }
    }

    pub fn norm(&self) -> &ObsNorm {
        match self {
            Policy::Teacher { norm, .. } | Policy::Student { norm, .. } => norm,
        }
    }

    pub fn is_student(&self) -> bool {
        matches!(self, Policy::Student { .. })
    }

    /// SHA-256 over parameters and normalization statistics.
    pub fn fingerprint(&self) -> String {
        let bytes = match self {
            Policy::Teacher { net, norm } => bincode::serialize(&(net, norm)),
            Policy::Student { net, norm } => bincode::serialize(&(net, norm)),
        }
        .expect("in-memory serialization");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zero_hidden(&self, batch: usize) -> Hidden {
        match self {
            Policy::Teacher { .. } => Vec::new(),
            Policy::Student { net, .. } => net.zero_hidden(batch),
        }
    }

    /// Deterministic action means; advances `hidden` for recurrent students.
    pub fn act(&self, obs: &[&ObservationBundle], hidden: &mut Hidden) -> Mat {
        let b = self.norm().batch(obs);
        match self {
            Policy::Teacher { net, .. } => net.forward(&b.proprio.view(), &b.extero_clean.view(), &b.privileged.view()).mean,
            Policy::Student { net, .. } => {
                let (action, step) = net.act(&b.proprio.view(), &b.extero_noisy.view(), hidden);
                *hidden = step.hidden;
                action
            }
        }
    }
}

fn zero_row(hidden: &mut Hidden, row: usize) {
    for h in hidden.iter_mut() {
        h.row_mut(row).fill(0.0);
    }
}

/// The training world with pushes and low-friction episodes removed and a fixed episode window.
pub fn eval_world(world: &World, steps: usize) -> World {
    let mut w = world.clone();
    w.randomization.push_force = 0.0;
    w.randomization.push_torque = 0.0;
    w.randomization.low_friction_probability = 0.0;
    w.env.episode_length = steps;
    w.env.regime_switch = false;
    w.env.resample_command_mid_episode = false;
    w
}

/// Fresh trial environment at `x` with jittered lateral offset and heading.
fn trial_env(world: &World, seed: u64, trial: u64, patch: TerrainPatch, x: f64, noise: &NoiseParams, command: Command) -> Env {
    let mut env = Env::new(world, stream_rng(seed, EVAL_STREAM + trial), true);
    env.forced_noise = Some(noise.clone());
    let pose = [x, env.rng.random_range(-LATERAL_JITTER..=LATERAL_JITTER), env.rng.random_range(-YAW_JITTER..=YAW_JITTER)];
    env.reset_at(world, patch, None, pose, 1.0, 1.0);
    env.command = command;
    env.obs.proprio = crate::perception::proprioception(&env.state, command, &world.sim);
    env
}

/// Steps `envs` together until `judge` settles each one; unsettled trials fail.
fn run_trials(policy: &Policy, world: &World, envs: &mut [Env], judge: impl Fn(&Env, &StepOutcome) -> Option<bool>) -> Vec<bool> {
    let mut hidden = policy.zero_hidden(envs.len());
    let mut result: Vec<Option<bool>> = vec![None; envs.len()];
    for _ in 0..world.env.episode_length {
        if result.iter().all(Option::is_some) {
            break;
        }
        let obs: Vec<&ObservationBundle> = envs.iter().map(|e| &e.obs).collect();
        let action = policy.act(&obs, &mut hidden);
        for (i, env) in envs.iter_mut().enumerate() {
            if result[i].is_some() {
                continue;
            }
            let o = env.step(world, &action.row(i).to_vec(), 1.0);
            result[i] = judge(env, &o).or(o.done().then_some(false));
        }
    }
    result.into_iter().map(|r| r.unwrap_or(false)).collect()
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub label: String,
    pub value: f64,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateRow {
    fn new(label: &str, value: f64, outcomes: &[bool]) -> Self {
        let successes = outcomes.iter().filter(|&&s| s).count();
        let trials = outcomes.len();
        let (ci_low, ci_high) = wilson_interval(successes, trials);
        Self { label: label.into(), value, trials, successes, rate: successes as f64 / trials.max(1) as f64, ci_low, ci_high }
    }
}

/// True when each rate is within the previous row's interval or below it.
pub fn non_increasing_within_ci(rows: &[RateRow]) -> bool {
    rows.windows(2).all(|w| w[1].ci_low <= w[0].ci_high)
}

fn batched(total: usize, batch: usize, mut run: impl FnMut(std::ops::Range<usize>) -> Vec<bool>) -> Vec<bool> {
    let mut out = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + batch).min(total);
        out.extend(run(start..end));
        start = end;
    }
    out
}

/// Success rate per step height under a constant forward command.
pub fn step_sweep(policy: &Policy, world: &World, cfg: &EvalConfig, noise: NoiseCondition, seed: u64) -> Vec<RateRow> {
    let w = eval_world(world, EvalConfig::steps(world, cfg.step_window_s));
    let params = noise.params(world);
    let command = Command::new(cfg.step_command, 0.0, 0.0);
    let edge = 0.0;
    cfg.step_heights
        .iter()
        .enumerate()
        .map(|(hi, &h)| {
            let outcomes = batched(cfg.step_trials, cfg.batch, |range| {
                let mut envs: Vec<Env> = range
                    .map(|t| {
                        let trial = (hi * cfg.step_trials + t) as u64;
                        trial_env(&w, seed, trial, TerrainPatch::single_step(h, edge), edge - STEP_START_GAP, &params, command)
                    })
                    .collect();
                run_trials(policy, &w, &mut envs, |env, o| {
                    if o.terminal {
                        Some(false)
                    } else {
                        env.state.foot_position.iter().all(|f| f.x > edge + STEP_CLEARANCE).then_some(true)
                    }
                })
            });
            RateRow::new("step_height", h, &outcomes)
        })
        .collect()
}

fn traverse_judge(distance: f64) -> impl Fn(&Env, &StepOutcome) -> Option<bool> {
    move |env, o| {
        if o.terminal {
            Some(false)
        } else {
            (env.displacement() >= distance).then_some(true)
        }
    }
}

/// Draws every terrain parameter uniformly from its range.
pub fn random_spec<R: Rng + ?Sized>(kind: TerrainKind, rng: &mut R) -> TerrainSpec {
    let mut spec = TerrainSpec::new(kind, rng.random());
    for p in kind.param_ranges() {
        spec = spec.with(p.name, rng.random_range(p.min..=p.max));
    }
    spec
}

/// Traversal success (distance within the window, no failure) on terrain from `make_spec`.
pub fn traversal_trials(
    policy: &Policy,
    world: &World,
    cfg: &EvalConfig,
    noise: NoiseCondition,
    trials: usize,
    seed: u64,
    first_trial: u64,
    make_spec: impl Fn(u64) -> TerrainSpec,
) -> Result<Vec<bool>> {
    let w = eval_world(world, EvalConfig::steps(world, cfg.success_window_s));
    let params = noise.params(world);
    let command = Command::new(cfg.success_speed, 0.0, 0.0);
    let mut patches = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        patches.push(generate(&make_spec(first_trial + t))?);
    }
    let mut patches = patches.into_iter();
    Ok(batched(trials, cfg.batch, |range| {
        let mut envs: Vec<Env> = range
            .map(|t| {
                let patch = patches.next().expect("one patch per trial");
                trial_env(&w, seed, first_trial + t as u64, patch, TRAVERSE_START_X, &params, command)
            })
            .collect();
        run_trials(policy, &w, &mut envs, traverse_judge(cfg.success_distance))
    }))
}

/// Success rate over terrain of `kind` with its default parameters.
pub fn success_rate(policy: &Policy, world: &World, cfg: &EvalConfig, kind: TerrainKind, noise: NoiseCondition, trials: usize, seed: u64) -> Result<RateRow> {
    let outcomes = traversal_trials(policy, world, cfg, noise, trials, seed, 0, |t| TerrainSpec::new(kind, seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15)))?;
    Ok(RateRow::new(kind.name(), 0.0, &outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub kind: TerrainKind,
    pub param_x: String,
    pub x: f64,
    pub param_y: String,
    pub y: f64,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
}

fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (min + max)];
    }
    (0..n).map(|i| min + (max - min) * i as f64 / (n - 1) as f64).collect()
}

/// Success rates over a grid of the kind's first two parameters (one axis if it has only one).
pub fn terrain_grid(policy: &Policy, world: &World, cfg: &EvalConfig, noise: NoiseCondition, seed: u64) -> Result<Vec<GridCell>> {
    let kind = cfg.grid_kind;
    let ranges = kind.param_ranges();
    let px = ranges[0];
    let xs = linspace(px.min, px.max, cfg.grid_size);
    let (py_name, ys) = match ranges.get(1) {
        Some(py) => (py.name, linspace(py.min, py.max, cfg.grid_size)),
        None => ("", vec![0.0]),
    };
    let mut cells = Vec::with_capacity(xs.len() * ys.len());
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let cell = (iy * xs.len() + ix) as u64;
            let first = cell * cfg.trials_per_cell as u64;
            let outcomes = traversal_trials(policy, world, cfg, noise, cfg.trials_per_cell, seed, first, |t| {
                let mut spec = TerrainSpec::new(kind, seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15)).with(px.name, x);
                if !py_name.is_empty() {
                    spec = spec.with(py_name, y);
                }
                spec
            })?;
            let successes = outcomes.iter().filter(|&&s| s).count();
            cells.push(GridCell {
                kind,
                param_x: px.name.into(),
                x,
                param_y: py_name.into(),
                y,
                trials: outcomes.len(),
                successes,
                rate: successes as f64 / outcomes.len() as f64,
            });
        }
    }
    Ok(cells)
}

/// Squared Euclidean distance between two action rows.
pub fn action_difference(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub terrain: String,
    pub variant: String,
    pub noise: String,
    pub action_diff_mean: f64,
    pub action_diff_std: f64,
    pub recon_mean: f64,
    pub recon_std: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_std(&self) -> (f64, f64) {
        if self.n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        (mean, (self.sum_sq / n - mean * mean).max(0.0).sqrt())
    }
}

fn recon_error(net: &StudentNet, step: &BeliefStep, extero: &Mat, privileged: &Mat) -> Vec<f64> {
    let (oe, sp) = net.belief_decode(&step.pre_belief, &step.belief, &step.l_e);
    let e = (&oe - extero).mapv(|v| v * v).sum_axis(Axis(1));
    let p = (&sp - privileged).mapv(|v| v * v).sum_axis(Axis(1));
    let dims = (extero.ncols() + privileged.ncols()) as f64;
    e.iter().zip(p.iter()).map(|(a, b)| (a + b) / dims).collect()
}

/// Teacher drives; every student shadows it on identical states with noisy height samples.
/// Each terrain draw contributes `table_steps` steps (episodes restart on the same patch).
pub fn ablation_tables(
    teacher: &TeacherNet,
    norm: &ObsNorm,
    students: &[(String, StudentNet)],
    world: &World,
    cfg: &EvalConfig,
    noises: &[NoiseCondition],
    seed: u64,
) -> Result<Vec<TableCell>> {
    let w = eval_world(world, world.env.episode_length);
    let mut cells = Vec::new();
    let mut trial = 0u64;
    for &kind in &cfg.table_kinds {
        for &noise in noises {
            let params = noise.params(world);
            let mut moments = vec![(Moments::default(), Moments::default()); students.len()];
            let mut start = 0;
            while start < cfg.table_draws {
                let end = (start + cfg.batch).min(cfg.table_draws);
                let mut patches = Vec::new();
                let mut envs = Vec::new();
                for _ in start..end {
                    let mut rng = stream_rng(seed, EVAL_STREAM + trial);
                    let patch = generate(&random_spec(kind, &mut rng))?;
                    let mut env = trial_env(&w, seed, trial, patch.clone(), TRAVERSE_START_X, &params, Command::default());
                    env.command = crate::training::sample_command(&mut env.rng, &w.commands);
                    env.obs.proprio = crate::perception::proprioception(&env.state, env.command, &w.sim);
                    patches.push(patch);
                    envs.push(env);
                    trial += 1;
                }
                let mut hidden: Vec<Hidden> = students.iter().map(|(_, s)| s.zero_hidden(envs.len())).collect();
                for _ in 0..cfg.table_steps {
                    let obs: Vec<&ObservationBundle> = envs.iter().map(|e| &e.obs).collect();
                    let b = norm.batch(&obs);
                    let target = teacher.forward(&b.proprio.view(), &b.extero_clean.view(), &b.privileged.view()).mean;
                    for (k, (_, net)) in students.iter().enumerate() {
                        let (action, step) = net.act(&b.proprio.view(), &b.extero_noisy.view(), &hidden[k]);
                        let recon = recon_error(net, &step, &b.extero_clean, &b.privileged);
                        hidden[k] = step.hidden;
                        for i in 0..envs.len() {
                            moments[k].0.push(action_difference(
                                action.row(i).as_slice().expect("row-major"),
                                target.row(i).as_slice().expect("row-major"),
                            ));
                            moments[k].1.push(recon[i]);
                        }
                    }
                    for (i, env) in envs.iter_mut().enumerate() {
                        let o = env.step(&w, &target.row(i).to_vec(), 1.0);
                        if o.done() {
                            let command = env.command;
                            env.reset_at(&w, patches[i].clone(), None, [TRAVERSE_START_X, 0.0, 0.0], 1.0, 1.0);
                            env.command = command;
                            env.obs.proprio = crate::perception::proprioception(&env.state, command, &w.sim);
                            hidden.iter_mut().for_each(|h| zero_row(h, i));
                        }
                    }
                }
                start = end;
            }
            for (k, (name, _)) in students.iter().enumerate() {
                let (am, asd) = moments[k].0.mean_std();
                let (rm, rsd) = moments[k].1.mean_std();
                cells.push(TableCell {
                    terrain: kind.name().into(),
                    variant: name.clone(),
                    noise: noise.name().into(),
                    action_diff_mean: am,
                    action_diff_std: asd,
                    recon_mean: rm,
                    recon_std: rsd,
                    samples: moments[k].0.n,
                });
            }
        }
    }
    Ok(cells)
}

/// Scripted mismatch between what the robot walks on and what it is told.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// A step of `height` at x = 0 that the height map reports as flat.
    HiddenStep { height: f64 },
    /// Ground beyond x = 0 has friction `friction`; the map is accurate.
    Slippery { friction: f64 },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::HiddenStep { .. } => "hidden_step",
            Scenario::Slippery { .. } => "slippery",
        }
    }

    fn patches(&self) -> (TerrainPatch, Option<TerrainPatch>) {
        match *self {
            Scenario::HiddenStep { height } => (TerrainPatch::single_step(height, 0.0), Some(TerrainPatch::flat())),
            Scenario::Slippery { friction } => {
                let region = FrictionRegion { min: [0.0, -HALF_EXTENT], max: [HALF_EXTENT, HALF_EXTENT], mu: friction };
                let base = TerrainPatch::flat();
                let mu = base.friction_at(-1.0, 0.0);
                (base.with_friction(mu, vec![region]), None)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionRow {
    pub step: usize,
    pub base_x: f64,
    /// Mean terrain height around the left-front foot, relative to that foot.
    pub true_height: f64,
    pub map_height: f64,
    pub decoded_height: f64,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub true_friction: f64,
    pub decoded_friction: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs a student through `scenario` and logs its decoded terrain and friction estimates.
pub fn introspect(net: &StudentNet, norm: &ObsNorm, world: &World, cfg: &EvalConfig, scenario: Scenario, seed: u64) -> Vec<IntrospectionRow> {
    let w = eval_world(world, cfg.introspection_steps);
    let (physical, map) = scenario.patches();
    let command = Command::new(cfg.success_speed, 0.0, 0.0);
    let mut env = trial_env(&w, seed, 0, physical, -STEP_START_GAP, &NoiseParams::zero(), command);
    let mut hidden = net.zero_hidden(1);
    let friction = PRIVILEGED_FRICTION_OFFSET..PRIVILEGED_FRICTION_OFFSET + NUM_LEGS;
    let mut rows = Vec::with_capacity(cfg.introspection_steps);
    for step in 0..cfg.introspection_steps {
        let reported = match &map {
            Some(m) => sample_heights(m, &env.state),
            None => env.obs.extero_clean.clone(),
        };
        let mut obs = env.obs.clone();
        obs.extero_noisy = reported.clone();
        let b = norm.batch(&[&obs]);
        let (action, belief) = net.act(&b.proprio.view(), &b.extero_noisy.view(), &hidden);
        let (oe, sp) = net.belief_decode(&belief.pre_belief, &belief.belief, &belief.l_e);
        hidden = belief.hidden.clone();
        let decoded = norm.extero.denormalize(oe.row(0).as_slice().expect("row-major"));
        let decoded_priv = norm.privileged.denormalize(sp.row(0).as_slice().expect("row-major"));
        let alpha = belief.alpha.row(0);
        rows.push(IntrospectionRow {
            step,
            base_x: env.state.base_position.x,
            true_height: mean(&env.obs.extero_clean[..POINTS_PER_FOOT]),
            map_height: mean(&reported[..POINTS_PER_FOOT]),
            decoded_height: mean(&decoded[..POINTS_PER_FOOT]),
            alpha_mean: alpha.mean().unwrap_or(f64::NAN),
            alpha_min: alpha.iter().copied().fold(f64::INFINITY, f64::min),
            alpha_max: alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            true_friction: mean(&env.obs.privileged[friction.clone()]),
            decoded_friction: mean(&decoded_priv[friction.clone()]),
        });
        let o = env.step(&w, &action.row(0).to_vec(), 1.0);
        if o.done() {
            break;
        }
    }
    rows
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize, W: Write>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Invalid(format!("plot: {e}"))
}

/// Two stacked line plots: heights (true, map, decoded) and friction (true, decoded).
pub fn plot_introspection(rows: &[IntrospectionRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    let root = BitMapBackend::new(path, (900, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 1));
    let t_max = rows.len() as f64;
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo.is_finite() {
            let pad = 0.05 * (hi - lo).max(1e-3);
            (lo - pad, hi + pad)
        } else {
            (0.0, 1.0)
        }
    };
    let series: [(&[fn(&IntrospectionRow) -> f64], &[RGBColor]); 2] = [
        (&[|r| r.true_height, |r| r.map_height, |r| r.decoded_height], &[BLACK, BLUE, RED]),
        (&[|r| r.true_friction, |r| r.decoded_friction], &[BLACK, RED]),
    ];
    for (area, (getters, colors)) in panels.iter().zip(series) {
        let (lo, hi) = span(&mut getters.iter().flat_map(|g| rows.iter().map(g)));
        let mut chart = ChartBuilder::on(area).margin(15).build_cartesian_2d(0.0..t_max, lo..hi).map_err(plot_err)?;
        chart.configure_mesh().x_labels(0).y_labels(0).draw().map_err(plot_err)?;
        for (g, c) in getters.iter().zip(colors) {
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, g(r))).filter(|p| p.1.is_finite()).collect();
            chart.draw_series(LineSeries::new(pts, c.stroke_width(2))).map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beliefnets::StudentArch;
    use rand::SeedableRng;

    fn small_cfg() -> EvalConfig {
        EvalConfig { step_heights: vec![0.0, 0.3], step_trials: 4, batch: 3, step_window_s: 1.0, ..EvalConfig::default() }
    }

    fn teacher_policy(seed: u64) -> Policy {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Policy::Teacher { net: TeacherNet::new(&mut rng), norm: ObsNorm::identity() }
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert!("bogus".parse::<Protocol>().is_err());
    }

    #[test]
    fn noise_presets_match_printed_vectors() {
        let w = World::default();
        assert_eq!(NoiseCondition::Small.params(&w).z[0][..7], [0.004, 0.005, 0.04, 0.04, 0.04, 0.01, 0.1]);
        assert_eq!(NoiseCondition::Large.params(&w).z[2][..7], [0.004, 0.3, 0.2, 0.1, 0.1, 0.03, 0.1]);
        assert_eq!(NoiseCondition::Clean.params(&w), NoiseParams::zero());
    }

    #[test]
    fn wilson_interval_hand_values() {
        // tabulated 95% Wilson bounds
        let (lo, hi) = wilson_interval(5, 10);
        assert!((lo - 0.2366).abs() < 1e-4 && (hi - 0.7634).abs() < 1e-4);
        let (lo, hi) = wilson_interval(81, 263);
        assert!((lo - 0.2553).abs() < 1e-4 && (hi - 0.3662).abs() < 1e-4);
        let (lo, hi) = wilson_interval(0, 20);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.2);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
    }

    #[test]
    fn zero_height_step_is_trivial_and_sweep_is_deterministic() {
        let world = World::default();
        let p = teacher_policy(1);
        let a = step_sweep(&p, &world, &small_cfg(), NoiseCondition::Small, 3);
        let b = step_sweep(&p, &world, &small_cfg(), NoiseCondition::Small, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].trials, 4);
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.rate) && r.ci_low <= r.rate && r.rate <= r.ci_high));
    }

    #[test]
    fn identical_actions_have_zero_difference() {
        let a = [0.3, -1.0, 2.0];
        assert_eq!(action_difference(&a, &a), 0.0);
        assert!((action_difference(&[1.0, 2.0], &[0.0, 0.0]) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn table_has_one_cell_per_kind_variant_noise() {
        let world = World::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let teacher = TeacherNet::new(&mut rng);
        let gated = StudentNet::from_teacher(&teacher, StudentArch::default(), &mut rng);
        let plain = StudentNet::from_teacher(&teacher, StudentArch { gated: false, ..StudentArch::default() }, &mut rng);
        let cfg = EvalConfig {
            table_kinds: vec![TerrainKind::Rough, TerrainKind::Boxes],
            table_draws: 2,
            table_steps: 5,
            ..EvalConfig::default()
        };
        let variants = vec![("gated".to_string(), gated), ("no_gate".to_string(), plain)];
        let noises = [NoiseCondition::Small, NoiseCondition::Large];
        let cells = ablation_tables(&teacher, &ObsNorm::identity(), &variants, &world, &cfg, &noises, 0).unwrap();
        assert_eq!(cells.len(), 2 * 2 * 2);
        assert!(cells.iter().all(|c| c.samples == 10 && c.action_diff_mean >= 0.0 && c.recon_mean >= 0.0));
    }

    #[test]
    fn evaluation_leaves_policy_untouched() {
        let world = World::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let teacher = TeacherNet::new(&mut rng);
        let mut norm = ObsNorm::new();
        let env = Env::new(&world, rand_chacha::ChaCha8Rng::seed_from_u64(0), false);
        norm.update(&[&env.obs, &env.obs]);
        norm.freeze();
        let p = Policy::Student { net: StudentNet::from_teacher(&teacher, StudentArch::default(), &mut rng), norm };
        let before = p.fingerprint();
        step_sweep(&p, &world, &small_cfg(), NoiseCondition::Large, 0);
        assert_eq!(before, p.fingerprint());
    }

    #[test]
    fn introspection_alpha_stays_in_unit_interval() {
        let world = World::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let teacher = TeacherNet::new(&mut rng);
        let net = StudentNet::from_teacher(&teacher, StudentArch::default(), &mut rng);
        let cfg = EvalConfig { introspection_steps: 20, ..EvalConfig::default() };
        for scenario in [Scenario::HiddenStep { height: 0.15 }, Scenario::Slippery { friction: 0.2 }] {
            let rows = introspect(&net, &ObsNorm::identity(), &world, &cfg, scenario, 0);
            assert!(!rows.is_empty());
            assert!(rows.iter().all(|r| r.alpha_min > 0.0 && r.alpha_max < 1.0));
        }
        let rows = introspect(&net, &ObsNorm::identity(), &world, &cfg, Scenario::HiddenStep { height: 0.15 }, 0);
        // before the edge the map and the ground agree
        assert!((rows[0].true_height - rows[0].map_height).abs() < 1e-9);
    }

    #[test]
    fn introspection_plot_is_written() {
        let rows: Vec<IntrospectionRow> = (0..10)
            .map(|i| IntrospectionRow {
                step: i,
                base_x: 0.1 * i as f64,
                true_height: -0.3,
                map_height: -0.3,
                decoded_height: -0.3 + 0.01 * i as f64,
                alpha_mean: 0.5,
                alpha_min: 0.1,
                alpha_max: 0.9,
                true_friction: 0.7,
                decoded_friction: 0.6,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.png");
        plot_introspection(&rows, &path).unwrap();
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }
}
