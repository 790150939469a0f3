use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use beliefwalk::beliefnets::{CoreKind, StudentNet};
use beliefwalk::evalharness::{self, NoiseCondition, Policy, Protocol, Scenario, TableCell};
use beliefwalk::expconfig::{echo_config, load_checkpoint, save_checkpoint, stream_rng, write_atomic, Checkpoint, ExperimentConfig};
use beliefwalk::perception::Command;
use beliefwalk::quadsim::TrajectoryWriter;
use beliefwalk::terrain::{generate, TerrainKind, TerrainPatch, TerrainSpec, RESOLUTION};
use beliefwalk::training::{Env, MetricsWriter, StudentTrainer, TeacherTrainer};
use beliefwalk::Error;

#[derive(Parser)]
#[command(name = "beliefwalk", version, about = "Teacher-student quadruped locomotion training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the privileged teacher with PPO.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a teacher checkpoint (its stored configuration is used).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Distill a teacher checkpoint into the belief-encoder student.
    TrainStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Run an evaluation protocol on a checkpoint.
    Eval {
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the `[eval]` table is read.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra student checkpoints compared in the ablation tables.
        #[arg(long)]
        compare: Vec<PathBuf>,
    },
    /// Roll out a checkpoint once and dump the trajectory and terrain.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        terrain: Option<String>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.7)]
        speed: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a generated terrain patch as a plain-text height grid.
    Terrain {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `name=value` parameter overrides.
        #[arg(long = "set")]
        params: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Diverged { .. })));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::TrainTeacher { config, seed, out, resume } => train_teacher(config, seed, &out, resume),
        Cmd::TrainStudent { teacher, config, seed, out, resume } => train_student(&teacher, config, seed, &out, resume),
        Cmd::Eval { protocol, ckpt, out, config, seed, compare } => eval(&protocol, &ckpt, &out, config, seed, &compare),
        Cmd::Rollout { ckpt, out, terrain, steps, speed, seed } => rollout(&ckpt, &out, terrain, steps, speed, seed),
        Cmd::Terrain { kind, seed, params, out } => terrain(&kind, seed, &params, &out),
    }
}

fn load_cfg(path: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => beliefwalk::expconfig::load_config(&p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_writer(out: &Path, resumed: bool) -> anyhow::Result<MetricsWriter<BufWriter<File>>> {
    let path = out.join("metrics.csv");
    Ok(if resumed && path.exists() {
        MetricsWriter::appending(BufWriter::new(OpenOptions::new().append(true).open(&path)?))
    } else {
        MetricsWriter::new(BufWriter::new(File::create(&path)?))
    })
}

fn save_periodic(out: &Path, name: &str, step: usize, interval: usize, ckpt: &Checkpoint) -> anyhow::Result<()> {
    save_checkpoint(&out.join(format!("{name}.ckpt")), ckpt)?;
    if interval > 0 && step % interval == 0 {
        save_checkpoint(&out.join("checkpoints").join(format!("{name}_{step:06}.ckpt")), ckpt)?;
    }
    Ok(())
}

fn train_teacher(config: Option<PathBuf>, seed: Option<u64>, out: &Path, resume: Option<PathBuf>) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let mut trainer = match &resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::Teacher(t) => *t,
            other => bail!("{} is a {} checkpoint, expected teacher", path.display(), other.kind()),
        },
        None => {
            let cfg = load_cfg(config, seed)?;
            echo_config(&cfg, out)?;
            TeacherTrainer::new(cfg.world(), cfg.teacher.clone(), cfg.ppo.clone(), cfg.seed)?
        }
    };
    let mut metrics = metrics_writer(out, resume.is_some())?;
    while trainer.iteration < trainer.cfg.iterations {
        let row = match trainer.iterate() {
            Ok(r) => r,
            Err(e) => {
                save_checkpoint(&out.join("teacher.ckpt"), &Checkpoint::Teacher(Box::new(trainer.clone())))?;
                return Err(e.into());
            }
        };
        metrics.write(&row)?;
        eprintln!(
            "iter {:5}  reward {:9.3}  r_lv {:.3}  c_k {:.3}  ep_len {}",
            row.iteration,
            row.reward_total,
            row.r_lv,
            row.c_k,
            row.mean_episode_length.map_or("-".into(), |v| format!("{v:.1}"))
        );
        let step = trainer.iteration;
        if step % trainer.cfg.checkpoint_interval.max(1) == 0 || step == trainer.cfg.iterations {
            save_periodic(out, "teacher", step, trainer.cfg.checkpoint_interval, &Checkpoint::Teacher(Box::new(trainer.clone())))?;
        }
    }
    save_checkpoint(&out.join("teacher.ckpt"), &Checkpoint::Teacher(Box::new(trainer)))?;
    Ok(())
}

fn train_student(teacher_path: &Path, config: Option<PathBuf>, seed: Option<u64>, out: &Path, resume: Option<PathBuf>) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let teacher = match load_checkpoint(teacher_path)? {
        Checkpoint::Teacher(t) => *t,
        other => bail!("{} is a {} checkpoint, expected teacher", teacher_path.display(), other.kind()),
    };
    let mut trainer = match &resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::Student { trainer, .. } => *trainer,
            other => bail!("{} is a {} checkpoint, expected student", path.display(), other.kind()),
        },
        None => {
            let cfg = load_cfg(config, seed)?;
            echo_config(&cfg, out)?;
            let mut rng = stream_rng(cfg.seed, 1);
            let student = StudentNet::from_teacher(&teacher.teacher, cfg.student.arch, &mut rng);
            StudentTrainer::new(cfg.world(), cfg.student.clone(), cfg.seed, student, teacher.norm.clone())?
        }
    };
    let snapshot = |t: &StudentTrainer| Checkpoint::Student { trainer: Box::new(t.clone()), teacher: Some(teacher.teacher.clone()) };
    let interval = teacher.cfg.checkpoint_interval;
    let mut metrics = metrics_writer(out, resume.is_some())?;
    while trainer.epoch < trainer.cfg.epochs {
        let row = match trainer.epoch(&teacher.teacher) {
            Ok(r) => r,
            Err(e) => {
                save_checkpoint(&out.join("student.ckpt"), &snapshot(&trainer))?;
                return Err(e.into());
            }
        };
        metrics.write(&row)?;
        eprintln!(
            "epoch {:4}  L_bc {:.5}  L_re {:.5}  c_sk {:.2}",
            row.iteration,
            row.l_bc.unwrap_or(f64::NAN),
            row.l_re.unwrap_or(f64::NAN),
            row.c_sk
        );
        let step = trainer.epoch;
        if step % interval.max(1) == 0 || step == trainer.cfg.epochs {
            save_periodic(out, "student", step, interval, &snapshot(&trainer))?;
        }
    }
    save_checkpoint(&out.join("student.ckpt"), &snapshot(&trainer))?;
    Ok(())
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    evalharness::write_csv(&mut buf, rows)?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn variant_name(net: &StudentNet) -> String {
    let core = match net.arch.core {
        CoreKind::Gru => "gru",
        CoreKind::Feedforward => "mlp",
    };
    format!("{core}_{}", if net.arch.gated { "gate" } else { "no_gate" })
}

/// One row per terrain, one mean/std column pair per (variant, noise).
fn write_wide_table(path: &Path, cells: &[TableCell], value: fn(&TableCell) -> (f64, f64)) -> anyhow::Result<()> {
    let mut columns: Vec<(String, String)> = Vec::new();
    let mut terrains: Vec<String> = Vec::new();
    for c in cells {
        let key = (c.noise.clone(), c.variant.clone());
        if !columns.contains(&key) {
            columns.push(key);
        }
        if !terrains.contains(&c.terrain) {
            terrains.push(c.terrain.clone());
        }
    }
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["terrain".to_string()];
        for (noise, variant) in &columns {
            header.push(format!("{variant}_{noise}_mean"));
            header.push(format!("{variant}_{noise}_std"));
        }
        w.write_record(&header)?;
        for t in &terrains {
            let mut rec = vec![t.clone()];
            for (noise, variant) in &columns {
                let cell = cells.iter().find(|c| &c.terrain == t && &c.noise == noise && &c.variant == variant);
                let (m, s) = cell.map(value).unwrap_or((f64::NAN, f64::NAN));
                rec.push(format!("{m:.6e}"));
                rec.push(format!("{s:.6e}"));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    write_atomic(path, &buf)?;
    Ok(())
}

fn eval(protocol: &str, ckpt_path: &Path, out: &Path, config: Option<PathBuf>, seed: u64, compare: &[PathBuf]) -> anyhow::Result<()> {
    let protocol: Protocol = protocol.parse()?;
    let eval_cfg = load_cfg(config, None)?.eval;
    fs::create_dir_all(out)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let embedded_teacher = match &ckpt {
        Checkpoint::Student { teacher, .. } => teacher.clone(),
        Checkpoint::Teacher(_) => None,
    };
    let (policy, world) = Policy::from_checkpoint(ckpt);
    let before = policy.fingerprint();
    let mut notes = Vec::new();
    match protocol {
        Protocol::StepSweep => {
            for noise in [NoiseCondition::Small, NoiseCondition::Large] {
                let rows = evalharness::step_sweep(&policy, &world, &eval_cfg, noise, seed);
                write_rows(&out.join(format!("step_sweep_{}.csv", noise.name())), &rows)?;
            }
        }
        Protocol::TerrainGrid => {
            let cells = evalharness::terrain_grid(&policy, &world, &eval_cfg, NoiseCondition::Small, seed)?;
            write_rows(&out.join("terrain_grid.csv"), &cells)?;
        }
        Protocol::ActionDiff | Protocol::ReconError => {
            let Policy::Student { net, norm } = &policy else {
                bail!("{protocol} needs a student checkpoint");
            };
            let Some(teacher) = embedded_teacher else {
                bail!("student checkpoint carries no teacher");
            };
            let mut variants = vec![(variant_name(net), net.clone())];
            for path in compare {
                match load_checkpoint(path)? {
                    Checkpoint::Student { trainer, .. } => {
                        let mut name = variant_name(&trainer.student);
                        if variants.iter().any(|(n, _)| *n == name) {
                            name = format!("{name}_{}", variants.len());
                        }
                        variants.push((name, trainer.student));
                    }
                    other => bail!("{} is a {} checkpoint, expected student", path.display(), other.kind()),
                }
            }
            let noises = [NoiseCondition::Small, NoiseCondition::Large];
            let cells = evalharness::ablation_tables(&teacher, norm, &variants, &world, &eval_cfg, &noises, seed)?;
            write_rows(&out.join("ablation_cells.csv"), &cells)?;
            if protocol == Protocol::ActionDiff {
                write_wide_table(&out.join("action_diff.csv"), &cells, |c| (c.action_diff_mean, c.action_diff_std))?;
            } else {
                write_wide_table(&out.join("recon_error.csv"), &cells, |c| (c.recon_mean, c.recon_std))?;
            }
            notes.push(format!("{} steps collected per terrain draw, {} draws per terrain", eval_cfg.table_steps, eval_cfg.table_draws));
        }
        Protocol::Introspection => {
            let Policy::Student { net, norm } = &policy else {
                bail!("introspection needs a student checkpoint");
            };
            for scenario in [Scenario::HiddenStep { height: 0.15 }, Scenario::Slippery { friction: 0.2 }] {
                let rows = evalharness::introspect(net, norm, &world, &eval_cfg, scenario, seed);
                write_rows(&out.join(format!("introspection_{}.csv", scenario.name())), &rows)?;
                evalharness::plot_introspection(&rows, &out.join(format!("introspection_{}.png", scenario.name())))?;
            }
        }
    }
    let after = policy.fingerprint();
    if before != after {
        bail!("policy changed during evaluation");
    }
    let summary = serde_json::json!({
        "protocol": protocol.name(),
        "checkpoint": ckpt_path.display().to_string(),
        "seed": seed,
        "fingerprint": after,
        "eval": eval_cfg,
        "notes": notes,
    });
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(())
}

fn parse_kind(name: &str) -> anyhow::Result<TerrainKind> {
    Ok(name.parse::<TerrainKind>()?)
}

fn rollout(ckpt_path: &Path, out: &Path, terrain: Option<String>, steps: usize, speed: f64, seed: u64) -> anyhow::Result<()> {
    let (policy, world) = Policy::from_checkpoint(load_checkpoint(ckpt_path)?);
    let world = evalharness::eval_world(&world, steps);
    let patch = match terrain {
        Some(k) => generate(&TerrainSpec::new(parse_kind(&k)?, seed))?,
        None => TerrainPatch::flat(),
    };
    fs::create_dir_all(out)?;
    let mut grid = Vec::new();
    patch.export_grid(&mut grid, RESOLUTION)?;
    write_atomic(&out.join("heightfield.txt"), &grid)?;

    let mut env = Env::new(&world, stream_rng(seed, 0), policy.is_student());
    env.reset_at(&world, patch, None, [-2.0, 0.0, 0.0], 1.0, 1.0);
    env.command = Command::new(speed, 0.0, 0.0);
    env.obs.proprio = beliefwalk::perception::proprioception(&env.state, env.command, &world.sim);
    let mut hidden = policy.zero_hidden(1);
    let mut buf = Vec::new();
    {
        let mut traj = TrajectoryWriter::new(&mut buf)?;
        traj.write(&env.state)?;
        for _ in 0..steps {
            let action = policy.act(&[&env.obs], &mut hidden);
            let o = env.step(&world, &action.row(0).to_vec(), 1.0);
            traj.write(&env.state)?;
            if o.done() {
                break;
            }
        }
        traj.flush()?;
    }
    write_atomic(&out.join("trajectory.csv"), &buf)?;
    Ok(())
}

fn terrain(kind: &str, seed: u64, params: &[String], out: &Path) -> anyhow::Result<()> {
    let mut spec = TerrainSpec::new(parse_kind(kind)?, seed);
    for p in params {
        let Some((name, value)) = p.split_once('=') else {
            bail!("parameter override `{p}` is not name=value");
        };
        let value: f64 = value.trim().parse().with_context(|| format!("parameter `{name}`"))?;
        spec = spec.with(name.trim(), value);
    }
    let patch = generate(&spec)?;
    let mut grid = Vec::new();
    patch.export_grid(&mut grid, RESOLUTION)?;
    write_atomic(out, &grid)?;
    Ok(())
}
