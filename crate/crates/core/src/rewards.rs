//! Reward terms and their weighted total.

use serde::{Deserialize, Serialize};

use crate::perception::{Command, POINTS_PER_FOOT};
use crate::quadsim::{JointVector, RobotModel, SimConfig, SimState, NUM_JOINTS, NUM_LEGS};

pub const KNEE_JOINTS: [usize; NUM_LEGS] = [2, 5, 8, 11];
pub const TERM_NAMES: [&str; 11] = ["r_lv", "r_av", "r_lvo", "r_b", "r_fc", "r_co", "r_j", "r_jc", "r_s", "r_tau", "r_slip"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
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
    pub total: f64,
    pub c_k: f64,
}

impl RewardBreakdown {
    pub fn terms(&self) -> [f64; 11] {
        [self.r_lv, self.r_av, self.r_lvo, self.r_b, self.r_fc, self.r_co, self.r_j, self.r_jc, self.r_s, self.r_tau, self.r_slip]
    }

    pub fn from_terms(t: [f64; 11], c_k: f64) -> Self {
        let mut b = RewardBreakdown {
            r_lv: t[0],
            r_av: t[1],
            r_lvo: t[2],
            r_b: t[3],
            r_fc: t[4],
            r_co: t[5],
            r_j: t[6],
            r_jc: t[7],
            r_s: t[8],
            r_tau: t[9],
            r_slip: t[10],
            total: 0.0,
            c_k,
        };
        b.total = total(&b);
        b
    }
}

/// Weights of the eleven terms, in [`TERM_NAMES`] order.
pub const WEIGHTS: [f64; 11] = [0.75, 0.75, 0.75, 1.0, 0.003, 0.1, 0.001, 0.08, 0.003, 1.0e-6, 0.003];

pub fn total(b: &RewardBreakdown) -> f64 {
    0.75 * (b.r_lv + b.r_av + b.r_lvo)
        + b.r_b
        + 0.003 * b.r_fc
        + 0.1 * b.r_co
        + 0.001 * b.r_j
        + 0.08 * b.r_jc
        + 0.003 * b.r_s
        + 1.0e-6 * b.r_tau
        + 0.003 * b.r_slip
}

/// Tracking rewards `(r_lv, r_av, r_lvo)`. The command direction enters the
/// projections as a unit vector; its magnitude is the saturation threshold.
pub fn velocity_rewards(v_des: [f64; 2], v: [f64; 2], w_des: f64, w_z: f64) -> (f64, f64, f64) {
    let speed = v_des[0].hypot(v_des[1]);
    let (r_lv, proj, dir) = if speed == 0.0 {
        ((-(v[0] * v[0] + v[1] * v[1])).exp(), 0.0, [0.0, 0.0])
    } else {
        let dir = [v_des[0] / speed, v_des[1] / speed];
        let proj = dir[0] * v[0] + dir[1] * v[1];
        let r = if proj > speed { 1.0 } else { (-(proj - speed).powi(2)).exp() };
        (r, proj, dir)
    };
    let r_av = if w_des == 0.0 {
        (-w_z * w_z).exp()
    } else {
        let proj = w_des.signum() * w_z;
        let target = w_des.abs();
        if proj > target {
            1.0
        } else {
            (-(proj - target).powi(2)).exp()
        }
    };
    let vo = [v[0] - proj * dir[0], v[1] - proj * dir[1]];
    let r_lvo = (-3.0 * (vo[0] * vo[0] + vo[1] * vo[1])).exp();
    (r_lv, r_av, r_lvo)
}

pub fn body_motion(v_z: f64, w_x: f64, w_y: f64) -> f64 {
    -1.25 * v_z * v_z - 0.4 * w_x.abs() - 0.4 * w_y.abs()
}

/// `−1` for each swing leg whose highest surrounding sample is more than 0.2 m below the foot.
pub fn foot_clearance(phases: &[f64; NUM_LEGS], extero_clean: &[f64]) -> f64 {
    let mut r = 0.0;
    for leg in 0..NUM_LEGS {
        if phases[leg] >= 0.0 && phases[leg] < std::f64::consts::PI {
            let samples = &extero_clean[leg * POINTS_PER_FOOT..(leg + 1) * POINTS_PER_FOOT];
            let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max < -0.2 {
                r -= 1.0;
            }
        }
    }
    r
}

/// Everything the penalty terms read from one control step.
#[derive(Clone, Debug)]
pub struct PenaltyInputs {
    pub collision: bool,
    pub q: JointVector,
    pub qd: JointVector,
    pub qdd: JointVector,
    pub knee_thresholds: [f64; NUM_LEGS],
    /// Joint targets at t, t−1, t−2.
    pub targets: [JointVector; 3],
    pub torques: JointVector,
    pub contact: [bool; NUM_LEGS],
    pub foot_speed: [f64; NUM_LEGS],
}

/// `(r_co, r_j, r_jc, r_s, r_τ, r_slip)`.
pub fn penalties(p: &PenaltyInputs, c_k: f64) -> (f64, f64, f64, f64, f64, f64) {
    let r_co = if p.collision { -c_k } else { 0.0 };
    let r_j = -c_k * (0..NUM_JOINTS).map(|i| 0.01 * p.qd[i] * p.qd[i] + p.qdd[i] * p.qdd[i]).sum::<f64>();
    let r_jc = KNEE_JOINTS
        .iter()
        .zip(p.knee_thresholds.iter())
        .map(|(&i, &th)| if p.q[i] > th { -(p.q[i] - th).powi(2) } else { 0.0 })
        .sum::<f64>();
    let [t0, t1, t2] = &p.targets;
    let r_s = -c_k
        * (0..NUM_JOINTS)
            .map(|i| (t0[i] - t1[i]).powi(2) + (t0[i] - 2.0 * t1[i] + t2[i]).powi(2))
            .sum::<f64>();
    let r_tau = -c_k * p.torques.iter().map(|t| t * t).sum::<f64>();
    let r_slip = -c_k * (0..NUM_LEGS).filter(|&l| p.contact[l]).map(|l| p.foot_speed[l].powi(2)).sum::<f64>();
    (r_co, r_j, r_jc, r_s, r_tau, r_slip)
}

impl PenaltyInputs {
    pub fn from_state(state: &SimState, model: &RobotModel, cfg: &SimConfig) -> Self {
        let collision = state.thigh_contact.iter().chain(state.shank_contact.iter()).any(|&c| c);
        Self {
            collision,
            q: state.q,
            qd: state.qd,
            qdd: state.joint_acceleration(cfg.control_dt),
            knee_thresholds: model.knee_thresholds(),
            targets: [state.joint_target, state.target_history[0], state.target_history[1]],
            torques: state.torques,
            contact: state.foot_contact,
            foot_speed: state.foot_velocity.map(|v| v.norm()),
        }
    }
}

/// All terms for the transition that produced `state`.
pub fn compute(
    state: &SimState,
    command: Command,
    extero_clean: &[f64],
    model: &RobotModel,
    cfg: &SimConfig,
    c_k: f64,
) -> RewardBreakdown {
    let v = state.body_linear_velocity();
    let w = state.body_angular_velocity();
    let (r_lv, r_av, r_lvo) = velocity_rewards([command.vx, command.vy], [v.x, v.y], command.wz, w.z);
    let r_b = body_motion(v.z, w.x, w.y);
    let r_fc = foot_clearance(&state.phases, extero_clean);
    let (r_co, r_j, r_jc, r_s, r_tau, r_slip) = penalties(&PenaltyInputs::from_state(state, model, cfg), c_k);
    RewardBreakdown::from_terms([r_lv, r_av, r_lvo, r_b, r_fc, r_co, r_j, r_jc, r_s, r_tau, r_slip], c_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet() -> PenaltyInputs {
        PenaltyInputs {
            collision: false,
            q: [0.0; NUM_JOINTS],
            qd: [0.0; NUM_JOINTS],
            qdd: [0.0; NUM_JOINTS],
            knee_thresholds: [1.0; NUM_LEGS],
            targets: [[0.0; NUM_JOINTS]; 3],
            torques: [0.0; NUM_JOINTS],
            contact: [false; NUM_LEGS],
            foot_speed: [0.0; NUM_LEGS],
        }
    }

    #[test]
    fn velocity_examples() {
        assert_eq!(velocity_rewards([1.0, 0.0], [1.2, 0.0], 0.0, 0.0).0, 1.0);
        assert_eq!(velocity_rewards([0.0, 0.0], [0.0, 0.0], 0.0, 0.0).0, 1.0);
        let r_lvo = velocity_rewards([1.0, 0.0], [1.0, 0.5], 0.0, 0.0).2;
        assert!((r_lvo - (-0.75f64).exp()).abs() < 1e-12);
        assert!((r_lvo - 0.47237).abs() < 1e-5);
        // negative yaw command saturates when turning faster in the same direction
        assert_eq!(velocity_rewards([0.0, 0.0], [0.0, 0.0], -1.0, -1.3).1, 1.0);
    }

    #[test]
    fn body_and_clearance_examples() {
        assert_eq!(body_motion(0.0, 0.0, 0.0), 0.0);
        assert_eq!(body_motion(1.0, 0.0, 0.0), -1.25);
        let mut samples = vec![0.0; 4 * POINTS_PER_FOOT];
        samples[..POINTS_PER_FOOT].iter_mut().for_each(|v| *v = -0.25);
        assert_eq!(foot_clearance(&[1.0, 1.0, 4.0, 4.0], &samples), -1.0);
        // the same leg in stance is not penalized
        assert_eq!(foot_clearance(&[4.0, 1.0, 4.0, 4.0], &samples), 0.0);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalties(&quiet(), 1.0), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let mut p = quiet();
        p.contact[1] = true;
        p.foot_speed[1] = 0.1;
        assert!((penalties(&p, 1.0).5 + 0.01).abs() < 1e-15);
        let mut p = quiet();
        p.q[KNEE_JOINTS[2]] = 1.1;
        assert!((penalties(&p, 1.0).2 + 0.01).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let b = RewardBreakdown::from_terms([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0);
        assert_eq!(b.total, 2.25);
        assert_eq!(total(&RewardBreakdown::default()), 0.0);
    }

    proptest! {
        #[test]
        fn total_matches_weight_table(t in prop::array::uniform11(-10.0f64..10.0)) {
            let b = RewardBreakdown::from_terms(t, 1.0);
            let oracle: f64 = t.iter().zip(WEIGHTS.iter()).map(|(a, w)| a * w).sum();
            prop_assert!((b.total - oracle).abs() < 1e-12);
        }

        #[test]
        fn velocity_rewards_bounded(
            vd in prop::array::uniform2(-1.0f64..1.0), v in prop::array::uniform2(-2.0f64..2.0),
            wd in -1.2f64..1.2, w in -3.0f64..3.0,
        ) {
            let (a, b, c) = velocity_rewards(vd, v, wd, w);
            for r in [a, b, c] {
                prop_assert!(r > 0.0 && r <= 1.0);
            }
        }

        #[test]
        fn r_lv_ignores_orthogonal_velocity(
            vd in prop::array::uniform2(-1.0f64..1.0), v in prop::array::uniform2(-2.0f64..2.0), k in -2.0f64..2.0,
        ) {
            prop_assume!(vd[0].hypot(vd[1]) > 1e-3);
            let orth = [-vd[1], vd[0]];
            let shifted = [v[0] + k * orth[0], v[1] + k * orth[1]];
            let a = velocity_rewards(vd, v, 0.0, 0.0).0;
            let b = velocity_rewards(vd, shifted, 0.0, 0.0).0;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn penalties_non_positive_and_linear_in_c_k(
            qd in prop::array::uniform12(-5.0f64..5.0), q in prop::array::uniform12(-2.0f64..2.0),
            tau in prop::array::uniform12(-80.0f64..80.0), c in 0.0f64..1.0, collision: bool,
            speed in prop::array::uniform4(0.0f64..2.0), contact in prop::array::uniform4(any::<bool>()),
        ) {
            let mut p = quiet();
            p.qd = qd;
            p.qdd = qd.map(|v| v * 3.0);
            p.q = q;
            p.torques = tau;
            p.collision = collision;
            p.foot_speed = speed;
            p.contact = contact;
            p.targets = [q, qd.map(|v| v * 0.1), [0.3; NUM_JOINTS]];
            let one = penalties(&p, 1.0);
            let scaled = penalties(&p, c);
            let a = [one.0, one.1, one.2, one.3, one.4, one.5];
            let b = [scaled.0, scaled.1, scaled.2, scaled.3, scaled.4, scaled.5];
            for i in 0..6 {
                prop_assert!(a[i] <= 0.0);
                let expected = if i == 2 { a[i] } else { c * a[i] };
                prop_assert!((b[i] - expected).abs() <= 1e-9 * a[i].abs().max(1.0));
            }
        }
    }
}
