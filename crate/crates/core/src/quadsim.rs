//! Simplified quadruped simulator.
//!
//! The base is a single rigid body; legs are massless kinematic chains whose
//! joints carry a lumped rotor inertia. Feet are points with a spring-damper
//! normal force and a stick-slip tangential spring clamped to the Coulomb cone.
//! Joint targets come from the CPG foot trajectory through analytic IK plus
//! the policy's residuals, tracked by a torque-limited PD controller.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::terrain::TerrainPatch;

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 12;
pub const PRIVILEGED_DIM: usize = 50;
pub const ACTION_DIM: usize = NUM_LEGS + NUM_JOINTS;

/// Leg order used everywhere: left-front, right-front, left-hind, right-hind.
pub const LEG_NAMES: [&str; NUM_LEGS] = ["LF", "RF", "LH", "RH"];

pub type JointVector = [f64; NUM_JOINTS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotModel {
    pub base_mass: f64,
    /// Principal moments about the body axes, kg·m².
    pub base_inertia: [f64; 3],
    pub base_half_extents: [f64; 3],
    /// Hip positions in the body frame.
    pub hip_offsets: [[f64; 3]; NUM_LEGS],
    pub thigh_length: f64,
    pub shank_length: f64,
    /// Default-stance foot positions relative to each hip, body axes.
    pub nominal_foot: [[f64; 3]; NUM_LEGS],
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
    pub joint_inertia: f64,
    pub joint_damping: f64,
    /// Knee threshold, measured from the nominal knee angle.
    pub knee_threshold_offset: f64,
    pub swing_height: f64,
    /// Legs whose sagittal joint axes are mirrored, so their knees point forward.
    pub mirrored: [bool; NUM_LEGS],
}

impl Default for RobotModel {
    fn default() -> Self {
        let hx = 0.3;
        let hy = 0.12;
        Self {
            base_mass: 10.0,
            base_inertia: [0.094, 0.32, 0.375],
            base_half_extents: [0.3, 0.12, 0.06],
            hip_offsets: [[hx, hy, 0.0], [hx, -hy, 0.0], [-hx, hy, 0.0], [-hx, -hy, 0.0]],
            thigh_length: 0.22,
            shank_length: 0.22,
            nominal_foot: [[0.0, 0.0, -0.34]; NUM_LEGS],
            kp: 80.0,
            kd: 2.0,
            torque_limit: 80.0,
            joint_inertia: 0.05,
            joint_damping: 0.1,
            knee_threshold_offset: 0.4,
            swing_height: 0.2,
            mirrored: [false, false, true, true],
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.thigh_length > 0.0 && self.shank_length > 0.0) {
            return Err(crate::Error::Invalid("link lengths must be positive".into()));
        }
        for leg in 0..NUM_LEGS {
            let (_, clamped) = leg_ik(Vector3::from(self.nominal_foot[leg]), leg, self);
            if clamped {
                return Err(crate::Error::Invalid(format!(
                    "nominal stance of leg {} is not reachable",
                    LEG_NAMES[leg]
                )));
            }
        }
        Ok(())
    }

    pub fn nominal_joints(&self) -> JointVector {
        let mut q = [0.0; NUM_JOINTS];
        for leg in 0..NUM_LEGS {
            let (angles, _) = leg_ik(Vector3::from(self.nominal_foot[leg]), leg, self);
            q[3 * leg..3 * leg + 3].copy_from_slice(&angles);
        }
        q
    }

    /// Per-knee thresholds `q_th` for the joint-constraint penalty.
    pub fn knee_thresholds(&self) -> [f64; NUM_LEGS] {
        let q = self.nominal_joints();
        std::array::from_fn(|leg| q[3 * leg + 2] + self.knee_threshold_offset)
    }

    pub fn nominal_base_height(&self) -> f64 {
        -self.nominal_foot.iter().map(|f| f[2]).sum::<f64>() / NUM_LEGS as f64
    }

    fn sagittal_sign(&self, leg: usize) -> f64 {
        if self.mirrored[leg] {
            -1.0
        } else {
            1.0
        }
    }

    fn inner_reach(&self) -> f64 {
        (self.thigh_length - self.shank_length).abs().max(0.02)
    }

    fn outer_reach(&self) -> f64 {
        self.thigh_length + self.shank_length
    }
}

/// Simulation constants that are not properties of the robot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub control_dt: f64,
    pub physics_dt: f64,
    /// Nominal CPG frequency; the per-step phase increment is `2π f Δt`.
    pub base_frequency_hz: f64,
    pub gravity: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    /// Vertical penetration beyond which a contact is treated as a side (riser) hit.
    pub wall_threshold: f64,
    pub tilt_limit_deg: f64,
    pub phase_offset_bound: f64,
    pub residual_bound: f64,
    pub nominal_foot_friction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.02,
            physics_dt: 0.0025,
            base_frequency_hz: 1.25,
            gravity: 9.81,
            contact_stiffness: 1.0e4,
            contact_damping: 150.0,
            tangential_stiffness: 5.0e3,
            tangential_damping: 60.0,
            wall_threshold: 0.04,
            tilt_limit_deg: 60.0,
            phase_offset_bound: 0.5,
            residual_bound: 1.0,
            nominal_foot_friction: 1.0,
        }
    }
}

impl SimConfig {
    pub fn substeps(&self) -> usize {
        (self.control_dt / self.physics_dt).round().max(1.0) as usize
    }

    /// Base phase increment `Δφ₀` per control step.
    pub fn base_phase_step(&self) -> f64 {
        TAU * self.base_frequency_hz * self.control_dt
    }
}

/// Domain randomization magnitudes at curriculum factor 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    pub mass_range: f64,
    pub joint_inertia_scale_range: f64,
    pub joint_position_noise: f64,
    pub joint_velocity_noise: f64,
    pub orientation_noise: f64,
    pub linear_velocity_noise: f64,
    pub angular_velocity_noise: f64,
    pub push_force: f64,
    pub push_torque: f64,
    pub push_duration_steps: (u32, u32),
    pub push_window_steps: u32,
    pub low_friction_probability: f64,
    pub low_friction_range: (f64, f64),
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            mass_range: 1.5,
            joint_inertia_scale_range: 0.2,
            joint_position_noise: 0.1,
            joint_velocity_noise: 0.5,
            orientation_noise: 0.1,
            linear_velocity_noise: 0.3,
            angular_velocity_noise: 0.3,
            push_force: 30.0,
            push_torque: 3.0,
            push_duration_steps: (10, 50),
            push_window_steps: 450,
            low_friction_probability: 0.1,
            low_friction_range: (0.1, 0.3),
        }
    }
}

/// An external wrench applied to the base during `[start, start + duration)` control steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Push {
    pub start_step: u32,
    pub duration: u32,
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    /// World frame.
    pub base_linear_velocity: Vector3<f64>,
    /// World frame.
    pub base_angular_velocity: Vector3<f64>,
    pub q: JointVector,
    pub qd: JointVector,
    pub phases: [f64; NUM_LEGS],
    /// Last applied phase offsets `Δφ_l`.
    pub phase_offsets: [f64; NUM_LEGS],
    /// Joint positions of the previous three control steps, most recent first.
    pub q_history: [JointVector; 3],
    /// Joint velocities of the previous two control steps, most recent first.
    pub qd_history: [JointVector; 2],
    /// Joint targets of the previous two control steps, most recent first.
    pub target_history: [JointVector; 2],
    pub joint_target: JointVector,
    pub torques: JointVector,
    pub foot_position: [Vector3<f64>; NUM_LEGS],
    pub foot_velocity: [Vector3<f64>; NUM_LEGS],
    pub foot_contact: [bool; NUM_LEGS],
    /// Mean contact force over the last control period, world frame.
    pub foot_force: [Vector3<f64>; NUM_LEGS],
    pub foot_normal: [Vector3<f64>; NUM_LEGS],
    /// Effective contact friction at each foot.
    pub foot_friction: [f64; NUM_LEGS],
    /// Seconds since each foot last touched the ground.
    pub airtime: [f64; NUM_LEGS],
    pub thigh_contact: [bool; NUM_LEGS],
    pub shank_contact: [bool; NUM_LEGS],
    pub external_force: Vector3<f64>,
    pub external_torque: Vector3<f64>,
    /// Per-foot friction coefficients for this episode.
    pub episode_friction: [f64; NUM_LEGS],
    pub base_mass: f64,
    pub joint_inertia_scale: f64,
    pub push: Option<Push>,
    pub step_count: u32,
    anchors: [Option<Vector3<f64>>; NUM_LEGS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    None,
    BodyContact,
    TiltExceeded,
    TorqueLimitExceeded,
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminationInfo {
    pub reason: Termination,
    pub diagnostic: Option<String>,
}

impl TerminationInfo {
    fn none() -> Self {
        Self { reason: Termination::None, diagnostic: None }
    }

    pub fn terminated(&self) -> bool {
        self.reason != Termination::None
    }
}

/// Phase offsets and residual joint targets, both in radians.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub phase_offsets: [f64; NUM_LEGS],
    pub residuals: JointVector,
}

impl Action {
    pub fn from_slice(values: &[f64]) -> Self {
        assert_eq!(values.len(), ACTION_DIM, "action dimension");
        let mut a = Action::default();
        a.phase_offsets.copy_from_slice(&values[..NUM_LEGS]);
        a.residuals.copy_from_slice(&values[NUM_LEGS..]);
        a
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.phase_offsets.iter().chain(self.residuals.iter()).copied().collect()
    }

    /// Non-finite entries become zero; everything is clamped to the configured bounds.
    pub fn sanitized(&self, cfg: &SimConfig) -> Self {
        let clean = |v: f64, b: f64| if v.is_finite() { v.clamp(-b, b) } else { 0.0 };
        Action {
            phase_offsets: self.phase_offsets.map(|v| clean(v, cfg.phase_offset_bound)),
            residuals: self.residuals.map(|v| clean(v, cfg.residual_bound)),
        }
    }
}

pub fn wrap_phase(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Nominal foot position for `phase`, relative to the hip.
pub fn foot_target(phase: f64, leg: usize, model: &RobotModel) -> Vector3<f64> {
    let phase = wrap_phase(phase);
    let [x, y, z] = model.nominal_foot[leg];
    let lift = if phase <= PI / 2.0 {
        let t = 2.0 / PI * phase;
        -2.0 * t.powi(3) + 3.0 * t * t
    } else if phase <= PI {
        let t = 2.0 / PI * phase - 1.0;
        2.0 * t.powi(3) - 3.0 * t * t + 1.0
    } else {
        0.0
    };
    Vector3::new(x, y, z + model.swing_height * lift)
}

/// Foot position relative to the hip for joint angles `(haa, hfe, kfe)`.
pub fn leg_fk(angles: [f64; 3], leg: usize, model: &RobotModel) -> Vector3<f64> {
    let [q0, q1, q2] = angles;
    let sx = model.sagittal_sign(leg);
    let (l1, l2) = (model.thigh_length, model.shank_length);
    let xs = -l1 * q1.sin() - l2 * (q1 + q2).sin();
    let zs = -l1 * q1.cos() - l2 * (q1 + q2).cos();
    let (s0, c0) = q0.sin_cos();
    Vector3::new(sx * xs, -s0 * zs, c0 * zs)
}

fn knee_fk(angles: [f64; 3], leg: usize, model: &RobotModel) -> Vector3<f64> {
    let [q0, q1, _] = angles;
    let sx = model.sagittal_sign(leg);
    let xs = -model.thigh_length * q1.sin();
    let zs = -model.thigh_length * q1.cos();
    let (s0, c0) = q0.sin_cos();
    Vector3::new(sx * xs, -s0 * zs, c0 * zs)
}

/// Jacobian of [`leg_fk`]; column `j` is `∂p/∂q_j`.
pub fn leg_jacobian(angles: [f64; 3], leg: usize, model: &RobotModel) -> Matrix3<f64> {
    let [q0, q1, q2] = angles;
    let sx = model.sagittal_sign(leg);
    let (l1, l2) = (model.thigh_length, model.shank_length);
    let xs = -l1 * q1.sin() - l2 * (q1 + q2).sin();
    let zs = -l1 * q1.cos() - l2 * (q1 + q2).cos();
    let dxs = [zs, -l2 * (q1 + q2).cos()];
    let dzs = [-xs, l2 * (q1 + q2).sin()];
    let (s0, c0) = q0.sin_cos();
    Matrix3::new(
        0.0, sx * dxs[0], sx * dxs[1],
        -c0 * zs, -s0 * dzs[0], -s0 * dzs[1],
        -s0 * zs, c0 * dzs[0], c0 * dzs[1],
    )
}

/// Analytic inverse kinematics with a fixed knee branch. Targets outside
/// the workspace annulus are projected onto it and flagged.
pub fn leg_ik(target: Vector3<f64>, leg: usize, model: &RobotModel) -> ([f64; 3], bool) {
    let (l1, l2) = (model.thigh_length, model.shank_length);
    let r = (target.y * target.y + target.z * target.z).sqrt();
    let q0 = target.y.atan2(-target.z);
    let mut xs = model.sagittal_sign(leg) * target.x;
    let mut zs = -r;
    let dist = (xs * xs + zs * zs).sqrt();
    let (lo, hi) = (model.inner_reach(), model.outer_reach());
    let mut clamped = false;
    if dist > hi || dist < lo {
        clamped = true;
        let radius = dist.clamp(lo, hi);
        if dist > 1e-12 {
            xs *= radius / dist;
            zs *= radius / dist;
        } else {
            zs = -radius;
        }
    }
    let d2 = xs * xs + zs * zs;
    let c2 = ((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = -c2.acos();
    let a = l1 + l2 * q2.cos();
    let b = l2 * q2.sin();
    let q1 = (-xs).atan2(-zs) - b.atan2(a);
    ([q0, q1, q2], clamped)
}

/// Static four-leg stance under the base weight: joint deflections where the
/// PD torque balances the foot load, and the resulting hip height.
fn loaded_stance(model: &RobotModel, cfg: &SimConfig) -> (JointVector, f64) {
    let load = Vector3::new(0.0, 0.0, model.base_mass * cfg.gravity / NUM_LEGS as f64);
    let nominal = model.nominal_joints();
    let mut q = nominal;
    let mut height = 0.0;
    for leg in 0..NUM_LEGS {
        let mut angles = leg_angles(&nominal, leg);
        if model.kp > 0.0 {
            for _ in 0..50 {
                let tau = leg_jacobian(angles, leg, model).transpose() * load;
                angles = std::array::from_fn(|j| nominal[3 * leg + j] + tau[j] / model.kp);
            }
        }
        q[3 * leg..3 * leg + 3].copy_from_slice(&angles);
        height -= leg_fk(angles, leg, model).z;
    }
    let penetration = load.z / cfg.contact_stiffness;
    (q, height / NUM_LEGS as f64 - penetration)
}

fn leg_angles(q: &JointVector, leg: usize) -> [f64; 3] {
    [q[3 * leg], q[3 * leg + 1], q[3 * leg + 2]]
}

impl SimState {
    /// Default stance at `(x, y)` with heading `yaw`, resting on the terrain.
    pub fn nominal(model: &RobotModel, cfg: &SimConfig, patch: &TerrainPatch, x: f64, y: f64, yaw: f64) -> Self {
        let target = model.nominal_joints();
        let (q, hip_height) = loaded_stance(model, cfg);
        let orientation = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
        let ground = (0..NUM_LEGS)
            .map(|leg| {
                let hip = Vector3::from(model.hip_offsets[leg]);
                let foot = orientation * (hip + Vector3::from(model.nominal_foot[leg]));
                patch.height(x + foot.x, y + foot.y)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let base = Vector3::new(x, y, ground + hip_height);
        let mut s = SimState {
            base_position: base,
            base_orientation: orientation,
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            q,
            qd: [0.0; NUM_JOINTS],
            phases: [0.0, PI, PI, 0.0],
            phase_offsets: [0.0; NUM_LEGS],
            q_history: [q; 3],
            qd_history: [[0.0; NUM_JOINTS]; 2],
            target_history: [target; 2],
            joint_target: target,
            torques: [0.0; NUM_JOINTS],
            foot_position: [Vector3::zeros(); NUM_LEGS],
            foot_velocity: [Vector3::zeros(); NUM_LEGS],
            foot_contact: [false; NUM_LEGS],
            foot_force: [Vector3::zeros(); NUM_LEGS],
            foot_normal: [Vector3::zeros(); NUM_LEGS],
            foot_friction: [0.0; NUM_LEGS],
            airtime: [0.0; NUM_LEGS],
            thigh_contact: [false; NUM_LEGS],
            shank_contact: [false; NUM_LEGS],
            external_force: Vector3::zeros(),
            external_torque: Vector3::zeros(),
            episode_friction: [cfg.nominal_foot_friction; NUM_LEGS],
            base_mass: model.base_mass,
            joint_inertia_scale: 1.0,
            push: None,
            step_count: 0,
            anchors: [None; NUM_LEGS],
        };
        s.refresh_kinematics(model, patch);
        s
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *self.base_orientation.to_rotation_matrix().matrix()
    }

    /// Gravity direction expressed in the body frame.
    pub fn gravity_in_body(&self) -> Vector3<f64> {
        self.base_orientation.inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0))
    }

    pub fn body_linear_velocity(&self) -> Vector3<f64> {
        self.base_orientation.inverse_transform_vector(&self.base_linear_velocity)
    }

    pub fn body_angular_velocity(&self) -> Vector3<f64> {
        self.base_orientation.inverse_transform_vector(&self.base_angular_velocity)
    }

    /// Angle between the body z axis and the world vertical.
    pub fn tilt(&self) -> f64 {
        let z = self.base_orientation * Vector3::z();
        z.z.clamp(-1.0, 1.0).acos()
    }

    /// Joint accelerations by finite difference across the last control step.
    pub fn joint_acceleration(&self, control_dt: f64) -> JointVector {
        std::array::from_fn(|i| (self.qd[i] - self.qd_history[0][i]) / control_dt)
    }

    fn hip_world(&self, model: &RobotModel, leg: usize) -> Vector3<f64> {
        self.base_position + self.base_orientation * Vector3::from(model.hip_offsets[leg])
    }

    fn refresh_kinematics(&mut self, model: &RobotModel, patch: &TerrainPatch) {
        for leg in 0..NUM_LEGS {
            let angles = leg_angles(&self.q, leg);
            let rel = Vector3::from(model.hip_offsets[leg]) + leg_fk(angles, leg, model);
            let rel_w = self.base_orientation * rel;
            let jd = leg_jacobian(angles, leg, model) * Vector3::new(self.qd[3 * leg], self.qd[3 * leg + 1], self.qd[3 * leg + 2]);
            self.foot_position[leg] = self.base_position + rel_w;
            self.foot_velocity[leg] = self.base_linear_velocity
                + self.base_angular_velocity.cross(&rel_w)
                + self.base_orientation * jd;
            let p = self.foot_position[leg];
            let h = patch.height(p.x, p.y);
            self.foot_contact[leg] = p.z <= h;
            self.foot_normal[leg] = if self.foot_contact[leg] { patch.normal_at(p.x, p.y) } else { Vector3::zeros() };
            self.foot_friction[leg] = self.episode_friction[leg].min(patch.friction_at(p.x, p.y));
        }
    }

    fn check_finite(&self) -> bool {
        self.base_position.iter().all(|v| v.is_finite())
            && self.base_linear_velocity.iter().all(|v| v.is_finite())
            && self.base_angular_velocity.iter().all(|v| v.is_finite())
            && self.base_orientation.coords.iter().all(|v| v.is_finite())
            && self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// Contact normal and penetration depth for a foot below the surface.
fn contact_geometry(p: &Vector3<f64>, patch: &TerrainPatch, wall_threshold: f64) -> Option<(Vector3<f64>, f64)> {
    let h = patch.height(p.x, p.y);
    let pen = h - p.z;
    if pen <= 0.0 {
        return None;
    }
    if pen <= wall_threshold {
        let n = patch.normal_at(p.x, p.y);
        return Some((n, pen * n.z));
    }
    // deep below the local surface: the foot has run into a riser; find the
    // shortest horizontal way out
    const STEP: f64 = 0.005;
    const MAX_STEPS: usize = 24;
    for k in 1..=MAX_STEPS {
        let s = k as f64 * STEP;
        for dir in 0..8 {
            let a = dir as f64 * PI / 4.0;
            let (sy, sx) = a.sin_cos();
            if patch.height(p.x + s * sx, p.y + s * sy) <= p.z {
                return Some((Vector3::new(sx, sy, 0.0), s));
            }
        }
    }
    Some((Vector3::z(), pen))
}

/// Advances one control period.
pub fn step(
    state: &SimState,
    action: &Action,
    patch: &TerrainPatch,
    model: &RobotModel,
    cfg: &SimConfig,
) -> (SimState, TerminationInfo) {
    let action = action.sanitized(cfg);
    let mut s = state.clone();
    let dphi0 = cfg.base_phase_step();

    for leg in 0..NUM_LEGS {
        s.phases[leg] = wrap_phase(s.phases[leg] + action.phase_offsets[leg] + dphi0);
    }
    s.phase_offsets = action.phase_offsets;

    // Foot targets live in the yaw-aligned horizontal frame at each hip.
    let (_, _, yaw) = state.base_orientation.euler_angles();
    let level = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw).inverse() * state.base_orientation;
    let mut target = [0.0; NUM_JOINTS];
    for leg in 0..NUM_LEGS {
        let foot = level.inverse_transform_vector(&foot_target(s.phases[leg], leg, model));
        let (angles, _) = leg_ik(foot, leg, model);
        for j in 0..3 {
            target[3 * leg + j] = angles[j] + action.residuals[3 * leg + j];
        }
    }

    s.q_history = [state.q, state.q_history[0], state.q_history[1]];
    s.qd_history = [state.qd, state.qd_history[0]];
    s.target_history = [state.joint_target, state.target_history[0]];
    s.joint_target = target;

    let (ext_f, ext_t) = match &s.push {
        Some(p) if s.step_count >= p.start_step && s.step_count < p.start_step + p.duration => (p.force, p.torque),
        _ => (Vector3::zeros(), Vector3::zeros()),
    };
    s.external_force = ext_f;
    s.external_torque = ext_t;

    let substeps = cfg.substeps();
    let dt = cfg.control_dt / substeps as f64;
    let inertia_body = Matrix3::from_diagonal(&Vector3::from(model.base_inertia)) * (s.base_mass / model.base_mass);
    let joint_inertia = model.joint_inertia * s.joint_inertia_scale;
    let gravity = Vector3::new(0.0, 0.0, -cfg.gravity);
    let mut force_sum = [Vector3::zeros(); NUM_LEGS];
    let mut saturated_all = [true; NUM_JOINTS];
    let mut in_contact = [false; NUM_LEGS];

    for _ in 0..substeps {
        let rot = s.rotation();
        let mut f_total = s.base_mass * gravity + ext_f;
        let mut t_total = ext_t;
        let mut qdd = [0.0; NUM_JOINTS];

        for leg in 0..NUM_LEGS {
            let angles = leg_angles(&s.q, leg);
            let jac = leg_jacobian(angles, leg, model);
            let qd_leg = Vector3::new(s.qd[3 * leg], s.qd[3 * leg + 1], s.qd[3 * leg + 2]);
            let rel_w = rot * (Vector3::from(model.hip_offsets[leg]) + leg_fk(angles, leg, model));
            let p = s.base_position + rel_w;
            let v = s.base_linear_velocity + s.base_angular_velocity.cross(&rel_w) + rot * (jac * qd_leg);

            let mut force = Vector3::zeros();
            match contact_geometry(&p, patch, cfg.wall_threshold) {
                Some((n, depth)) => {
                    in_contact[leg] = true;
                    let fn_mag = (cfg.contact_stiffness * depth - cfg.contact_damping * v.dot(&n)).max(0.0);
                    let anchor = *s.anchors[leg].get_or_insert(p);
                    let offset = p - anchor;
                    let delta = offset - n * offset.dot(&n);
                    let v_t = v - n * v.dot(&n);
                    let mut f_t = -cfg.tangential_stiffness * delta - cfg.tangential_damping * v_t;
                    let mu = s.episode_friction[leg].min(patch.friction_at(p.x, p.y));
                    let limit = mu * fn_mag;
                    let mag = f_t.norm();
                    if mag > limit {
                        f_t *= if mag > 0.0 { limit / mag } else { 0.0 };
                        // slide the anchor so the spring alone carries the clamped force
                        s.anchors[leg] = Some(p + f_t / cfg.tangential_stiffness);
                    }
                    force = n * fn_mag + f_t;
                }
                None => {
                    in_contact[leg] = false;
                    s.anchors[leg] = None;
                }
            }
            force_sum[leg] += force;
            f_total += force;
            t_total += rel_w.cross(&force);

            let load = jac.transpose() * (rot.transpose() * force);
            for j in 0..3 {
                let i = 3 * leg + j;
                let demand = model.kp * (s.joint_target[i] - s.q[i]) - model.kd * s.qd[i];
                let tau = demand.clamp(-model.torque_limit, model.torque_limit);
                if demand.abs() <= model.torque_limit {
                    saturated_all[i] = false;
                }
                s.torques[i] = tau;
                qdd[i] = (tau + load[j] - model.joint_damping * s.qd[i]) / joint_inertia;
            }
        }

        let inertia_world = rot * inertia_body * rot.transpose();
        let ang_acc = inertia_world.try_inverse().unwrap_or_else(Matrix3::zeros) * t_total;
        s.base_linear_velocity += f_total / s.base_mass * dt;
        s.base_position += s.base_linear_velocity * dt;
        s.base_angular_velocity += ang_acc * dt;
        s.base_orientation = UnitQuaternion::from_scaled_axis(s.base_angular_velocity * dt) * s.base_orientation;
        s.base_orientation.renormalize();
        for i in 0..NUM_JOINTS {
            s.qd[i] += qdd[i] * dt;
            s.q[i] += s.qd[i] * dt;
        }
    }

    s.step_count += 1;
    s.refresh_kinematics(model, patch);
    for leg in 0..NUM_LEGS {
        s.foot_force[leg] = force_sum[leg] / substeps as f64;
        s.foot_contact[leg] = in_contact[leg];
        if in_contact[leg] {
            s.airtime[leg] = 0.0;
            if s.foot_normal[leg] == Vector3::zeros() {
                let p = s.foot_position[leg];
                s.foot_normal[leg] = patch.normal_at(p.x, p.y);
            }
        } else {
            s.airtime[leg] += cfg.control_dt;
            s.foot_normal[leg] = Vector3::zeros();
        }
    }
    update_link_contacts(&mut s, model, patch);

    let info = if !s.check_finite() {
        let diagnostic = format!(
            "non-finite state at step {}: base {:?}, q {:?}",
            s.step_count, state.base_position, state.q
        );
        // keep the last finite state so NaN never leaves the simulator
        let mut frozen = state.clone();
        frozen.step_count = s.step_count;
        return (frozen, TerminationInfo { reason: Termination::NonFinite, diagnostic: Some(diagnostic) });
    } else if body_in_contact(&s, model, patch) {
        TerminationInfo { reason: Termination::BodyContact, diagnostic: None }
    } else if s.tilt() > cfg.tilt_limit_deg.to_radians() {
        TerminationInfo { reason: Termination::TiltExceeded, diagnostic: None }
    } else if saturated_all.iter().any(|&sat| sat) {
        TerminationInfo { reason: Termination::TorqueLimitExceeded, diagnostic: None }
    } else {
        TerminationInfo::none()
    };
    (s, info)
}

/// Thigh and shank contact via three sample points per link.
fn update_link_contacts(s: &mut SimState, model: &RobotModel, patch: &TerrainPatch) {
    const FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
    for leg in 0..NUM_LEGS {
        let angles = leg_angles(&s.q, leg);
        let hip = s.hip_world(model, leg);
        let knee = s.base_position + s.base_orientation * (Vector3::from(model.hip_offsets[leg]) + knee_fk(angles, leg, model));
        let foot = s.foot_position[leg];
        let below = |a: &Vector3<f64>, b: &Vector3<f64>| {
            FRACTIONS.iter().any(|&t| {
                let p = a + (b - a) * t;
                p.z < patch.height(p.x, p.y)
            })
        };
        s.thigh_contact[leg] = below(&hip, &knee);
        s.shank_contact[leg] = below(&knee, &foot);
    }
}

fn body_in_contact(s: &SimState, model: &RobotModel, patch: &TerrainPatch) -> bool {
    let [ex, ey, ez] = model.base_half_extents;
    let corners = [-1.0, 1.0]
        .iter()
        .flat_map(|&sx| [-1.0, 1.0].iter().flat_map(move |&sy| [-1.0, 1.0].map(move |sz| Vector3::new(sx * ex, sy * ey, sz * ez))))
        .chain((0..NUM_LEGS).map(|leg| Vector3::from(model.hip_offsets[leg])));
    for c in corners {
        let p = s.base_position + s.base_orientation * c;
        if p.z < patch.height(p.x, p.y) {
            return true;
        }
    }
    false
}

/// Episode-start domain randomization, with every magnitude scaled by `c_k`.
/// All random draws happen regardless of `c_k` so streams stay aligned.
pub fn randomize_episode<R: Rng + ?Sized>(
    state: &SimState,
    model: &RobotModel,
    cfg: &SimConfig,
    rand_cfg: &RandomizationConfig,
    patch: &TerrainPatch,
    c_k: f64,
    rng: &mut R,
) -> SimState {
    let mut s = state.clone();
    let mut sym = |scale: f64| c_k * scale * rng.random_range(-1.0..=1.0);
    let dm = sym(rand_cfg.mass_range);
    let dj = sym(rand_cfg.joint_inertia_scale_range);
    let dq: JointVector = std::array::from_fn(|_| sym(rand_cfg.joint_position_noise));
    let dqd: JointVector = std::array::from_fn(|_| sym(rand_cfg.joint_velocity_noise));
    let roll = sym(rand_cfg.orientation_noise);
    let pitch = sym(rand_cfg.orientation_noise);
    let dv = Vector3::new(
        sym(rand_cfg.linear_velocity_noise),
        sym(rand_cfg.linear_velocity_noise),
        sym(rand_cfg.linear_velocity_noise),
    );
    let dw = Vector3::new(
        sym(rand_cfg.angular_velocity_noise),
        sym(rand_cfg.angular_velocity_noise),
        sym(rand_cfg.angular_velocity_noise),
    );
    let force = Vector3::new(sym(rand_cfg.push_force), sym(rand_cfg.push_force), sym(rand_cfg.push_force) * 0.5);
    let torque = Vector3::new(sym(rand_cfg.push_torque), sym(rand_cfg.push_torque), sym(rand_cfg.push_torque));
    let start = rng.random_range(0..rand_cfg.push_window_steps.max(1));
    let duration = rng.random_range(rand_cfg.push_duration_steps.0..=rand_cfg.push_duration_steps.1);
    let low_friction = rng.random::<f64>() < rand_cfg.low_friction_probability;
    let low_mu = rng.random_range(rand_cfg.low_friction_range.0..=rand_cfg.low_friction_range.1);

    s.base_mass = model.base_mass + dm;
    s.joint_inertia_scale = 1.0 + dj;
    for i in 0..NUM_JOINTS {
        s.q[i] += dq[i];
        s.qd[i] += dqd[i];
    }
    s.base_orientation = UnitQuaternion::from_euler_angles(roll, pitch, 0.0) * s.base_orientation;
    s.base_linear_velocity += dv;
    s.base_angular_velocity += dw;
    if c_k > 0.0 {
        s.push = Some(Push { start_step: start, duration, force, torque });
        if low_friction {
            let mu = cfg.nominal_foot_friction - c_k * (cfg.nominal_foot_friction - low_mu);
            s.episode_friction = [mu; NUM_LEGS];
        }
    }
    s.q_history = [s.q; 3];
    s.refresh_kinematics(model, patch);
    s
}

/// Privileged state in a fixed order:
/// contact flags (4), contact forces (12), contact normals (12), friction (4),
/// thigh then shank contact (8), external force and torque (6), airtime (4).
pub fn privileged_state(state: &SimState) -> [f64; PRIVILEGED_DIM] {
    let mut out = [0.0; PRIVILEGED_DIM];
    let mut i = 0;
    let mut push = |v: f64| {
        out[i] = v;
        i += 1;
    };
    for leg in 0..NUM_LEGS {
        push(if state.foot_contact[leg] { 1.0 } else { 0.0 });
    }
    for leg in 0..NUM_LEGS {
        let f = if state.foot_contact[leg] { state.foot_force[leg] } else { Vector3::zeros() };
        f.iter().for_each(|&v| push(v));
    }
    for leg in 0..NUM_LEGS {
        state.foot_normal[leg].iter().for_each(|&v| push(v));
    }
    for leg in 0..NUM_LEGS {
        push(state.foot_friction[leg]);
    }
    for leg in 0..NUM_LEGS {
        push(if state.thigh_contact[leg] { 1.0 } else { 0.0 });
    }
    for leg in 0..NUM_LEGS {
        push(if state.shank_contact[leg] { 1.0 } else { 0.0 });
    }
    state.external_force.iter().chain(state.external_torque.iter()).for_each(|&v| push(v));
    for leg in 0..NUM_LEGS {
        push(state.airtime[leg]);
    }
    out
}

/// Index of the first friction coefficient inside [`privileged_state`].
pub const PRIVILEGED_FRICTION_OFFSET: usize = 4 + 12 + 12;

/// Mechanical energy of the base (kinetic + potential).
pub fn base_energy(state: &SimState, model: &RobotModel, cfg: &SimConfig) -> f64 {
    let rot = state.rotation();
    let inertia = rot * Matrix3::from_diagonal(&Vector3::from(model.base_inertia)) * (state.base_mass / model.base_mass) * rot.transpose();
    let w = state.base_angular_velocity;
    0.5 * state.base_mass * state.base_linear_velocity.norm_squared()
        + 0.5 * w.dot(&(inertia * w))
        + state.base_mass * cfg.gravity * state.base_position.z
}

/// Per-step CSV dump of a trajectory for debugging and plots.
pub struct TrajectoryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W) -> crate::Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["step", "x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..NUM_JOINTS).map(|i| format!("q{i}")));
        header.extend((0..NUM_LEGS).map(|l| format!("phase_{}", LEG_NAMES[l])));
        header.extend((0..NUM_LEGS).map(|l| format!("contact_{}", LEG_NAMES[l])));
        inner.write_record(&header)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, s: &SimState) -> crate::Result<()> {
        let (roll, pitch, yaw) = s.base_orientation.euler_angles();
        let v = s.body_linear_velocity();
        let w = s.body_angular_velocity();
        let mut row = vec![s.step_count as f64];
        row.extend(s.base_position.iter());
        row.extend([roll, pitch, yaw]);
        row.extend(v.iter());
        row.extend(w.iter());
        row.extend(s.q.iter());
        row.extend(s.phases.iter());
        row.extend(s.foot_contact.iter().map(|&c| if c { 1.0 } else { 0.0 }));
        self.inner.write_record(row.iter().map(|v| format!("{v}")))?;
        Ok(())
    }

    pub fn flush(&mut self) -> crate::Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
