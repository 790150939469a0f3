use std::f64::consts::TAU;

use beliefwalk::expconfig::{config_to_toml, decode_checkpoint, encode_checkpoint, parse_config, Checkpoint, ExperimentConfig};
use beliefwalk::quadsim::{step, Action, SimState, ACTION_DIM};
use beliefwalk::terrain::{generate, TerrainKind, TerrainSpec, HALF_EXTENT};
use beliefwalk::training::{MetricsRow, MetricsWriter, PpoConfig, TeacherConfig, TeacherTrainer, World};
use proptest::prelude::*;
use proptest::sample::select;

fn spec_strategy() -> impl Strategy<Value = TerrainSpec> {
    (select(TerrainKind::ALL.to_vec()), any::<u64>(), prop::collection::vec(0.0f64..=1.0, 4)).prop_map(|(kind, seed, u)| {
        let mut spec = TerrainSpec::new(kind, seed);
        for (p, t) in kind.param_ranges().iter().zip(u) {
            spec = spec.with(p.name, p.min + t * (p.max - p.min));
        }
        spec
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terrain_is_a_pure_function_of_its_spec(spec in spec_strategy(), xs in prop::collection::vec((-HALF_EXTENT..HALF_EXTENT, -HALF_EXTENT..HALF_EXTENT), 50)) {
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(&a.heightfield, &b.heightfield);
        prop_assert_eq!(&a.boxes, &b.boxes);
        prop_assert_eq!(&a.friction_regions, &b.friction_regions);
        prop_assert_eq!(&a.cells.unit_offsets, &b.cells.unit_offsets);
        for (x, y) in xs {
            let h = a.height(x, y);
            prop_assert!(h.is_finite() && h >= -1e-12, "height {} at ({}, {})", h, x, y);
        }
    }

    #[test]
    fn simulator_state_stays_valid_under_random_actions(
        seed in any::<u64>(),
        actions in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, ACTION_DIM), 1..40),
    ) {
        let world = World::default();
        let patch = generate(&TerrainSpec::new(TerrainKind::Rough, seed)).unwrap();
        let mut state = SimState::nominal(&world.robot, &world.sim, &patch, 0.0, 0.0, 0.0);
        for a in actions {
            let (next, info) = step(&state, &Action::from_slice(&a), &patch, &world.robot, &world.sim);
            prop_assert!((next.base_orientation.quaternion().norm() - 1.0).abs() < 1e-9);
            prop_assert!(next.phases.iter().all(|p| (0.0..TAU).contains(p)));
            prop_assert!(next.torques.iter().all(|t| t.abs() <= world.robot.torque_limit));
            prop_assert!(next.base_position.iter().chain(next.qd.iter()).all(|v| v.is_finite()));
            prop_assert_eq!(next.q_history.len(), 3);
            if info.terminated() {
                break;
            }
            state = next;
        }
    }

    #[test]
    fn config_survives_a_toml_round_trip(
        seed in 0..=i64::MAX as u64,
        lr in 1e-6f64..1e-2,
        discount in 0.9f64..0.9999,
        envs in 1usize..2000,
        horizon in 1usize..1000,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.ppo.learning_rate = lr;
        cfg.ppo.discount = discount;
        cfg.teacher.num_envs = envs;
        cfg.student.horizon = horizon;
        let text = config_to_toml(&cfg).unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}

fn tiny_checkpoint() -> Vec<u8> {
    let cfg = TeacherConfig { num_envs: 2, horizon: 4, iterations: 1, ..TeacherConfig::default() };
    let t = TeacherTrainer::new(World::default(), cfg, PpoConfig::default(), 5).unwrap();
    encode_checkpoint(&Checkpoint::Teacher(Box::new(t))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_flipped_checkpoint_byte_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = tiny_checkpoint();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_checkpoint(&bytes).is_err());
    }
}

#[test]
fn every_default_is_overridable_and_unknown_keys_fail() {
    let defaults = config_to_toml(&ExperimentConfig::default()).unwrap();
    assert_eq!(parse_config(&defaults).unwrap(), ExperimentConfig::default());
    assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    let huge = ExperimentConfig { seed: u64::MAX, ..ExperimentConfig::default() };
    assert!(huge.validate().unwrap_err().to_string().contains("seed"));
    for table in ["robot", "sim", "ppo", "teacher", "student", "eval", "noise", "env", "commands", "curriculum", "randomization"] {
        let err = parse_config(&format!("[{table}]\nbogus_key = 1\n")).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{table}: {err}");
    }
}

#[test]
fn metrics_header_is_stable() {
    let mut buf = Vec::new();
    MetricsWriter::new(&mut buf).write(&MetricsRow::default()).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "iteration,policy_loss,value_loss,entropy,l_bc,l_re,loss,learning_rate,reward_total,\
         r_lv,r_av,r_lvo,r_b,r_fc,r_co,r_j,r_jc,r_s,r_tau,r_slip,c_k,c_sk,episodes,\
         mean_episode_length,failure_rate,terrain_difficulty"
    );
}
