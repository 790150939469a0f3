//! Observation assembly, foot-centred height sampling and the height-sample noise model.

use std::f64::consts::TAU;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::quadsim::{privileged_state, SimConfig, SimState, NUM_JOINTS, NUM_LEGS, PRIVILEGED_DIM};
use crate::terrain::TerrainPatch;
use crate::{Error, Result};

pub const RING_COUNTS: [usize; 5] = [6, 8, 10, 12, 16];
pub const RING_RADII: [f64; 5] = [0.08, 0.16, 0.26, 0.36, 0.48];
pub const POINTS_PER_FOOT: usize = 52;
pub const EXTERO_DIM: usize = POINTS_PER_FOOT * NUM_LEGS;
pub const PROPRIO_DIM: usize = 3 + 3 + 6 + NUM_JOINTS * (1 + 1 + 3 + 2 + 2) + 13;
pub const NOISE_PARAMS: usize = 8;

/// Offsets of the proprioceptive blocks, in assembly order.
pub mod layout {
    pub const COMMAND: usize = 0;
    pub const GRAVITY: usize = 3;
    pub const LINEAR_VELOCITY: usize = 6;
    pub const ANGULAR_VELOCITY: usize = 9;
    pub const JOINT_POSITION: usize = 12;
    pub const JOINT_VELOCITY: usize = 24;
    pub const POSITION_HISTORY: usize = 36;
    pub const VELOCITY_HISTORY: usize = 72;
    pub const TARGET_HISTORY: usize = 96;
    /// Per leg `[Δφ, cos φ, sin φ]`, then `Δφ₀`.
    pub const CPG: usize = 120;
}

/// Desired body velocity: forward, lateral (m/s) and yaw rate (rad/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl Command {
    pub fn new(vx: f64, vy: f64, wz: f64) -> Self {
        Self { vx, vy, wz }
    }
}

/// Polar coordinates `(r, θ)` of the 52 points around one foot, ring by ring,
/// each ring starting at +x and running counter-clockwise.
pub fn ring_pattern() -> [(f64, f64); POINTS_PER_FOOT] {
    let mut out = [(0.0, 0.0); POINTS_PER_FOOT];
    let mut i = 0;
    for (&n, &r) in RING_COUNTS.iter().zip(RING_RADII.iter()) {
        for k in 0..n {
            out[i] = (r, TAU * k as f64 / n as f64);
            i += 1;
        }
    }
    out
}

fn heading(state: &SimState) -> f64 {
    state.base_orientation.euler_angles().2
}

/// World xy of a point given in the foot's heading-aligned frame.
fn point_xy(foot: (f64, f64), yaw: (f64, f64), lx: f64, ly: f64) -> (f64, f64) {
    let (s, c) = yaw;
    (foot.0 + c * lx - s * ly, foot.1 + s * lx + c * ly)
}

/// Terrain heights around each foot relative to the foot height, 52 per leg.
pub fn sample_heights(patch: &TerrainPatch, state: &SimState) -> Vec<f64> {
    let yaw = heading(state).sin_cos();
    let pattern = ring_pattern();
    let mut out = Vec::with_capacity(EXTERO_DIM);
    for leg in 0..NUM_LEGS {
        let f = state.foot_position[leg];
        for &(r, th) in &pattern {
            let (x, y) = point_xy((f.x, f.y), yaw, r * th.cos(), r * th.sin());
            out.push(patch.height(x, y) - f.z);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Nominal,
    Offset,
    Noisy,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Nominal, Regime::Offset, Regime::Noisy];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Nominal => "nominal",
            Regime::Offset => "offset",
            Regime::Noisy => "noisy",
        }
    }
}

/// Per-leg noise parameters `z₀…z₇`: point xy/z std, foot xy/z std, outlier
/// std, outlier probability, episodic xy/z std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub z: [[f64; NOISE_PARAMS]; NUM_LEGS],
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self { z: [[0.0; NOISE_PARAMS]; NUM_LEGS] }
    }

    pub fn uniform(z: [f64; NOISE_PARAMS]) -> Self {
        Self { z: [z; NUM_LEGS] }
    }

    /// Builds the parameters from a seven-entry printed vector, which fills
    /// `z₀…z₆`; `z₇` is supplied separately.
    pub fn from_printed(printed: [f64; 7], z7: f64) -> Self {
        let mut z = [0.0; NOISE_PARAMS];
        z[..7].copy_from_slice(&printed);
        z[7] = z7;
        Self::uniform(z)
    }

    /// The evaluation condition with small noise.
    pub fn small() -> Self {
        Self::from_printed([0.004, 0.005, 0.04, 0.04, 0.04, 0.01, 0.1], 0.1)
    }

    /// The evaluation condition with large noise.
    pub fn large() -> Self {
        Self::from_printed([0.004, 0.3, 0.2, 0.1, 0.1, 0.03, 0.1], 0.1)
    }

    pub fn validate(&self) -> Result<()> {
        for (leg, z) in self.z.iter().enumerate() {
            for (i, &v) in z.iter().enumerate() {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Invalid(format!("noise z{i} of leg {leg} must be a finite non-negative std, got {v}")));
                }
            }
            if z[5] > 1.0 {
                return Err(Error::OutOfRange { key: "noise.z5".into(), value: z[5], min: 0.0, max: 1.0 });
            }
        }
        Ok(())
    }
}

/// One regime's z-vector; entries flagged in `scaled` are multiplied by `c_sk`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub z: [f64; NOISE_PARAMS],
    pub scaled: [bool; NOISE_PARAMS],
}

impl RegimeSpec {
    pub fn params(&self, c_sk: f64) -> NoiseParams {
        let z = std::array::from_fn(|i| if self.scaled[i] { self.z[i] * c_sk } else { self.z[i] });
        NoiseParams::uniform(z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeTable {
    pub probabilities: [f64; 3],
    pub nominal: RegimeSpec,
    pub offset: RegimeSpec,
    pub noisy: RegimeSpec,
}

impl Default for RegimeTable {
    fn default() -> Self {
        const F: bool = false;
        const T: bool = true;
        Self {
            probabilities: [0.6, 0.3, 0.1],
            nominal: RegimeSpec { z: [0.004, 0.005, 0.01, 0.04, 0.03, 0.05, 0.1, 0.1], scaled: [F; 8] },
            offset: RegimeSpec { z: [0.004, 0.005, 0.01, 0.1, 0.1, 0.02, 0.1, 0.1], scaled: [F, F, F, T, T, F, F, F] },
            noisy: RegimeSpec { z: [0.004, 0.1, 0.1, 0.3, 0.3, 0.3, 0.1, 0.1], scaled: [F, T, T, T, T, T, F, F] },
        }
    }
}

impl RegimeTable {
    pub fn spec(&self, regime: Regime) -> &RegimeSpec {
        match regime {
            Regime::Nominal => &self.nominal,
            Regime::Offset => &self.offset,
            Regime::Noisy => &self.noisy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probabilities.iter().sum();
        if self.probabilities.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config {
                key: "noise.probabilities".into(),
                message: format!("must be a probability vector, got {:?}", self.probabilities),
            });
        }
        for r in Regime::ALL {
            self.spec(r).params(1.0).validate()?;
        }
        Ok(())
    }
}

/// Draws a regime and its parameters; called at episode start and mid-episode.
pub fn select_regime<R: Rng + ?Sized>(rng: &mut R, c_sk: f64, table: &RegimeTable) -> (Regime, NoiseParams) {
    let u: f64 = rng.random();
    let [p0, p1, _] = table.probabilities;
    let regime = if u < p0 {
        Regime::Nominal
    } else if u < p0 + p1 {
        Regime::Offset
    } else {
        Regime::Noisy
    };
    (regime, table.spec(regime).params(c_sk))
}

/// Per-foot offsets `w` held constant over a regime segment.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodicNoise {
    pub w: [[f64; 3]; NUM_LEGS],
}

impl EpisodicNoise {
    pub fn draw<R: Rng + ?Sized>(params: &NoiseParams, rng: &mut R) -> Self {
        let mut w = [[0.0; 3]; NUM_LEGS];
        for leg in 0..NUM_LEGS {
            let z = &params.z[leg];
            w[leg] = [normal(rng, z[6]), normal(rng, z[6]), normal(rng, z[7])];
        }
        Self { w }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    n * std
}

/// Noisy height samples. Every random variable is drawn on every call so the
/// stream position does not depend on the parameters.
pub fn apply_noise<R: Rng + ?Sized>(
    patch: &TerrainPatch,
    state: &SimState,
    params: &NoiseParams,
    episodic: &EpisodicNoise,
    c_sk: f64,
    rng: &mut R,
) -> Vec<f64> {
    let yaw = heading(state).sin_cos();
    let pattern = ring_pattern();
    let mut out = Vec::with_capacity(EXTERO_DIM);
    for leg in 0..NUM_LEGS {
        let z = &params.z[leg];
        let f = state.foot_position[leg];
        let [wx, wy, wz] = episodic.w[leg];
        let (fx, fy, fz) = (normal(rng, z[2]), normal(rng, z[2]), normal(rng, z[3]));
        for &(r, th) in &pattern {
            let px = normal(rng, z[0]);
            let py = normal(rng, z[0]);
            let pz = normal(rng, z[1]);
            let hit = rng.random::<f64>() < z[5];
            let outlier = normal(rng, z[4]);
            let lx = r * th.cos() + px + fx + wx;
            let ly = r * th.sin() + py + fy + wy;
            let (x, y) = point_xy((f.x, f.y), yaw, lx, ly);
            let mut h = patch.height(x, y) + pz + fz + wz + patch.cell_offset(x, y, c_sk);
            if hit {
                h += outlier;
            }
            out.push(h - f.z);
        }
    }
    out
}

/// Per-environment noise state: active regime, its parameters and episodic offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseChannel {
    pub regime: Regime,
    pub params: NoiseParams,
    pub episodic: EpisodicNoise,
}

impl NoiseChannel {
    pub fn fixed(params: NoiseParams) -> Self {
        Self { regime: Regime::Nominal, params, episodic: EpisodicNoise::default() }
    }

    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R, c_sk: f64, table: &RegimeTable) {
        let (regime, params) = select_regime(rng, c_sk, table);
        self.episodic = EpisodicNoise::draw(&params, rng);
        self.regime = regime;
        self.params = params;
    }

    /// Keeps the parameters but draws new episodic offsets.
    pub fn redraw_episodic<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.episodic = EpisodicNoise::draw(&self.params, rng);
    }
}

/// Step at which the noise regime is re-drawn within an episode.
pub fn regime_switch_step(episode_length: usize) -> usize {
    episode_length / 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub proprio: Vec<f64>,
    pub extero_clean: Vec<f64>,
    pub extero_noisy: Vec<f64>,
    pub privileged: Vec<f64>,
}

pub fn proprioception(state: &SimState, command: Command, cfg: &SimConfig) -> Vec<f64> {
    let mut o = Vec::with_capacity(PROPRIO_DIM);
    o.extend([command.vx, command.vy, command.wz]);
    o.extend(state.gravity_in_body().iter());
    o.extend(state.body_linear_velocity().iter());
    o.extend(state.body_angular_velocity().iter());
    o.extend(state.q.iter());
    o.extend(state.qd.iter());
    state.q_history.iter().for_each(|h| o.extend(h.iter()));
    state.qd_history.iter().for_each(|h| o.extend(h.iter()));
    state.target_history.iter().for_each(|h| o.extend(h.iter()));
    for leg in 0..NUM_LEGS {
        let (s, c) = state.phases[leg].sin_cos();
        o.extend([state.phase_offsets[leg], c, s]);
    }
    o.push(cfg.base_phase_step());
    debug_assert_eq!(o.len(), PROPRIO_DIM);
    o
}

fn check_dim(component: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension { component, expected, actual: v.len() });
    }
    Ok(())
}

pub fn assemble(proprio: Vec<f64>, extero_clean: Vec<f64>, extero_noisy: Vec<f64>, privileged: Vec<f64>) -> Result<ObservationBundle> {
    check_dim("proprioception", &proprio, PROPRIO_DIM)?;
    check_dim("exteroception (clean)", &extero_clean, EXTERO_DIM)?;
    check_dim("exteroception (noisy)", &extero_noisy, EXTERO_DIM)?;
    check_dim("privileged", &privileged, PRIVILEGED_DIM)?;
    Ok(ObservationBundle { proprio, extero_clean, extero_noisy, privileged })
}

/// Full observation for the current state.
pub fn observe<R: Rng + ?Sized>(
    patch: &TerrainPatch,
    state: &SimState,
    command: Command,
    cfg: &SimConfig,
    noise: &NoiseChannel,
    c_sk: f64,
    rng: &mut R,
) -> ObservationBundle {
    let clean = sample_heights(patch, state);
    let noisy = apply_noise(patch, state, &noise.params, &noise.episodic, c_sk, rng);
    assemble(proprioception(state, command, cfg), clean, noisy, privileged_state(state).to_vec())
        .expect("observation dimensions are fixed by construction")
}

/// Running mean/variance (parallel Welford) used to whiten network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    pub frozen: bool,
    pub clip: f64,
}

impl RunningNorm {
    const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim], frozen: false, clip: 10.0 }
    }

    /// Zero mean, unit variance, never updated.
    pub fn identity(dim: usize) -> Self {
        Self { count: 1.0, mean: vec![0.0; dim], m2: vec![1.0; dim], frozen: true, clip: f64::INFINITY }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count <= 0.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    pub fn update(&mut self, x: &[f64]) {
        self.update_batch(std::slice::from_ref(&x));
    }

    pub fn update_batch<V: AsRef<[f64]>>(&mut self, batch: &[V]) {
        if self.frozen || batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for x in batch {
            for (m, v) in mean.iter_mut().zip(x.as_ref()) {
                *m += v / n;
            }
        }
        let mut m2 = vec![0.0; dim];
        for x in batch {
            for ((s, v), m) in m2.iter_mut().zip(x.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let total = self.count + n;
        for i in 0..dim {
            let delta = mean[i] - self.mean[i];
            self.mean[i] += delta * n / total;
            self.m2[i] += m2[i] + delta * delta * self.count * n / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.normalize_in_place(&mut out);
        out
    }

    /// Inverse of `normalize` for values inside the clip range.
    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        let var = self.variance();
        y.iter().zip(&self.mean).zip(&var).map(|((v, m), s)| v * (s + Self::EPS).sqrt() + m).collect()
    }

    pub fn normalize_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.dim(), "normalizer dimension");
        let var = self.variance();
        for i in 0..x.len() {
            x[i] = ((x[i] - self.mean[i]) / (var[i] + Self::EPS).sqrt()).clamp(-self.clip, self.clip);
        }
    }
}

/// CSV log of which noise regime was active in each episode segment.
pub struct RegimeLog<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RegimeLog<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(["episode", "env", "segment", "regime", "c_sk"])?;
        Ok(Self { inner })
    }

    pub fn record(&mut self, episode: u64, env: usize, segment: usize, regime: Regime, c_sk: f64) -> Result<()> {
        self.inner.write_record([
            episode.to_string(),
            env.to_string(),
            segment.to_string(),
            regime.name().to_string(),
            format!("{c_sk}"),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
