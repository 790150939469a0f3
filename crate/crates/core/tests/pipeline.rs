use beliefwalk::beliefnets::StudentNet;
use beliefwalk::evalharness::{ablation_tables, step_sweep, success_rate, EvalConfig, NoiseCondition, Policy};
use beliefwalk::expconfig::{load_checkpoint, parse_config, save_checkpoint, stream_rng, Checkpoint};
use beliefwalk::terrain::TerrainKind;
use beliefwalk::training::{StudentTrainer, TeacherTrainer};

const CONFIG: &str = r#"
seed = 21
[teacher]
num_envs = 3
horizon = 16
iterations = 2
[student]
num_envs = 3
horizon = 16
epochs = 2
[eval]
step_heights = [0.0, 0.1]
step_trials = 3
step_window_s = 1.0
success_window_s = 1.0
table_kinds = ["rough", "boxes"]
table_draws = 2
table_steps = 8
"#;

#[test]
fn config_to_teacher_to_student_to_evaluation() {
    let cfg = parse_config(CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut teacher = TeacherTrainer::new(cfg.world(), cfg.teacher.clone(), cfg.ppo.clone(), cfg.seed).unwrap();
    for _ in 0..cfg.teacher.iterations {
        let row = teacher.iterate().unwrap();
        assert!(row.policy_loss.unwrap().is_finite());
    }
    let path = dir.path().join("teacher.ckpt");
    save_checkpoint(&path, &Checkpoint::Teacher(Box::new(teacher.clone()))).unwrap();
    let Checkpoint::Teacher(teacher) = load_checkpoint(&path).unwrap() else { panic!("teacher expected") };

    let student = StudentNet::from_teacher(&teacher.teacher, cfg.student.arch, &mut stream_rng(cfg.seed, 1));
    let mut trainer = StudentTrainer::new(cfg.world(), cfg.student.clone(), cfg.seed, student, teacher.norm.clone()).unwrap();
    for _ in 0..cfg.student.epochs {
        assert!(trainer.epoch(&teacher.teacher).unwrap().l_bc.unwrap().is_finite());
    }

    let world = cfg.world();
    let policy = Policy::Student { net: trainer.student.clone(), norm: trainer.norm.clone() };
    let sweep = step_sweep(&policy, &world, &cfg.eval, NoiseCondition::Small, 4);
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep, step_sweep(&policy, &world, &cfg.eval, NoiseCondition::Small, 4));
    assert!(sweep.iter().all(|r| r.trials == 3 && r.ci_low <= r.rate && r.rate <= r.ci_high));

    let row = success_rate(&policy, &world, &cfg.eval, TerrainKind::Rough, NoiseCondition::Clean, 2, 4).unwrap();
    assert_eq!(row.trials, 2);

    let students = vec![("s".to_string(), trainer.student.clone())];
    let cells = ablation_tables(&teacher.teacher, &teacher.norm, &students, &world, &cfg.eval, &[NoiseCondition::Small], 4).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c.samples == 2 * 8 && c.action_diff_mean >= 0.0 && c.recon_mean >= 0.0));
}

#[test]
fn default_success_definitions() {
    let eval = EvalConfig::default();
    assert_eq!((eval.success_distance, eval.success_speed, eval.success_window_s), (4.0, 0.7, 10.0));
    assert_eq!(eval.step_trials, 100);
}
