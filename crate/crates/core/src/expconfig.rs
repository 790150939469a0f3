//! Experiment configuration, checkpoints and seeding.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beliefnets::TeacherNet;
use crate::error::{Error, Result};
use crate::evalharness::EvalConfig;
use crate::nn::Params;
use crate::perception::RegimeTable;
use crate::quadsim::{RandomizationConfig, RobotModel, SimConfig};
use crate::training::{CommandConfig, EnvConfig, PpoConfig, StudentConfig, StudentTrainer, TeacherConfig, TeacherTrainer, World};
use crate::curriculum::ParticleConfig;

/// Independent ChaCha8 stream `stream` under the global `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub robot: RobotModel,
    pub sim: SimConfig,
    pub randomization: RandomizationConfig,
    pub noise: RegimeTable,
    pub env: EnvConfig,
    pub commands: CommandConfig,
    pub curriculum: ParticleConfig,
    pub ppo: PpoConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
}

fn in_range(key: &str, value: f64, min: f64, max: f64) -> Result<()> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(Error::OutOfRange { key: key.into(), value, min, max })
    }
}

fn positive(key: &str, value: usize) -> Result<()> {
    if value == 0 {
        Err(Error::Config { key: key.into(), message: "must be at least 1".into() })
    } else {
        Ok(())
    }
}

fn named(key: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { .. } | Error::OutOfRange { .. } => e,
        other => Error::Config { key: key.into(), message: other.to_string() },
    })
}

impl ExperimentConfig {
    pub fn world(&self) -> World {
        World {
            robot: self.robot.clone(),
            sim: self.sim.clone(),
            randomization: self.randomization.clone(),
            noise: self.noise.clone(),
            env: self.env.clone(),
            commands: self.commands.clone(),
            curriculum: self.curriculum.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config { key: "seed".into(), message: format!("must be at most {}", i64::MAX) });
        }
        let p = &self.ppo;
        in_range("ppo.learning_rate", p.learning_rate, 1e-12, 1.0)?;
        in_range("ppo.lr_decay", p.lr_decay, 1e-6, 1.0)?;
        in_range("ppo.discount", p.discount, 0.0, 1.0)?;
        in_range("ppo.gae_lambda", p.gae_lambda, 0.0, 1.0)?;
        in_range("ppo.clip", p.clip, 1e-6, 1.0)?;
        in_range("ppo.entropy_coef", p.entropy_coef, 0.0, 1.0)?;
        in_range("ppo.value_coef", p.value_coef, 0.0, 100.0)?;
        in_range("ppo.max_grad_norm", p.max_grad_norm, 1e-9, f64::MAX)?;
        positive("ppo.epochs", p.epochs)?;
        positive("ppo.minibatch_size", p.minibatch_size)?;
        positive("ppo.reference_envs", p.reference_envs)?;

        let t = &self.teacher;
        positive("teacher.num_envs", t.num_envs)?;
        positive("teacher.horizon", t.horizon)?;
        in_range("teacher.initial_c_k", t.initial_c_k, 1e-9, 1.0)?;
        in_range("teacher.c_k_rate", t.c_k_rate, 1e-9, 1.0 - 1e-12)?;

        let s = &self.student;
        positive("student.num_envs", s.num_envs)?;
        positive("student.horizon", s.horizon)?;
        positive("student.optimizer_epochs", s.optimizer_epochs)?;
        positive("student.tbptt", s.tbptt)?;
        in_range("student.learning_rate", s.learning_rate, 1e-12, 1.0)?;
        in_range("student.recon_weight", s.recon_weight, 0.0, 100.0)?;
        in_range("student.max_grad_norm", s.max_grad_norm, 1e-9, f64::MAX)?;
        in_range("student.c_k", s.c_k, 0.0, 1.0)?;
        if let Some(c) = s.c_sk {
            in_range("student.c_sk", c, 0.0, 1.0)?;
        }

        positive("env.episode_length", self.env.episode_length)?;
        positive("env.command_resample_interval", self.env.command_resample_interval)?;
        in_range("env.boundary_margin", self.env.boundary_margin, 0.0, 3.0)?;
        in_range("commands.vx_max", self.commands.vx_max, 0.0, 5.0)?;
        in_range("commands.vy_max", self.commands.vy_max, 0.0, 5.0)?;
        in_range("commands.wz_max", self.commands.wz_max, 0.0, 5.0)?;
        in_range("commands.zero_probability", self.commands.zero_probability, 0.0, 1.0)?;

        in_range("sim.control_dt", self.sim.control_dt, 1e-4, 1.0)?;
        in_range("sim.physics_dt", self.sim.physics_dt, 1e-5, self.sim.control_dt)?;
        named("robot", self.robot.validate())?;
        named("noise", self.noise.validate())?;

        let c = &self.curriculum;
        positive("curriculum.particles", c.particles)?;
        in_range("curriculum.jitter", c.jitter, 0.0, 1.0)?;
        in_range("curriculum.floor", c.floor, 1e-9, 1.0)?;
        in_range("curriculum.traverse_distance", c.traverse_distance, 0.0, 8.0)?;

        self.eval.validate()
    }
}

/// Parses and validates a TOML document; errors name the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config { key: if path == "." { "<root>".into() } else { path }, message: inner.message().trim().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Invalid(format!("cannot serialize config: {e}")))
}

/// Writes the effective configuration to `dir/config.toml`.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.toml"), config_to_toml(cfg)?.as_bytes())
}

/// Write-to-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BWALKCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Checkpoint {
    Teacher(Box<TeacherTrainer>),
    Student { trainer: Box<StudentTrainer>, teacher: Option<TeacherNet> },
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Teacher(_) => "teacher",
            Checkpoint::Student { .. } => "student",
        }
    }
}

/// `magic | version (u32 LE) | bincode body | sha256 of everything before`.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let body = bincode::serialize(ckpt).map_err(|e| Error::Invalid(format!("cannot serialize checkpoint: {e}")))?;
    let mut out = Vec::with_capacity(body.len() + 44);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 + 32 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("missing header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    bincode::deserialize(&payload[12..]).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Hex SHA-256 of the parameter vector's little-endian bytes.
pub fn param_hash<P: Params>(p: &P) -> String {
    let mut h = Sha256::new();
    p.visit(&mut |s| s.iter().for_each(|v| h.update(v.to_le_bytes())));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::TerrainMode;
    use rand::Rng;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.ppo.learning_rate, 5e-4);
        assert_eq!(cfg.ppo.lr_decay, 0.9999);
        assert_eq!(cfg.ppo.discount, 0.996);
        assert_eq!(cfg.ppo.epochs, 2);
        assert_eq!(cfg.ppo.gae_lambda, 0.95);
        assert_eq!(cfg.ppo.clip, 0.2);
        assert_eq!(cfg.ppo.entropy_coef, 0.005);
        assert_eq!(cfg.ppo.minibatch_size, 8300);
        assert_eq!((cfg.teacher.num_envs, cfg.teacher.horizon), (1000, 250));
        assert_eq!((cfg.student.num_envs, cfg.student.horizon, cfg.student.tbptt), (300, 400, 10));
        assert_eq!((cfg.student.learning_rate, cfg.student.recon_weight, cfg.student.optimizer_epochs), (5e-4, 0.5, 2));
    }

    #[test]
    fn override_is_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config("[ppo]\nclip = 0.3\n[student]\nterrain = \"flat\"\n").unwrap();
        assert_eq!(cfg.student.terrain, Some(TerrainMode::Flat));
        echo_config(&cfg, dir.path()).unwrap();
        let echoed = load_config(&dir.path().join("config.toml")).unwrap();
        assert_eq!(echoed.ppo.clip, 0.3);
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn bad_values_name_their_key() {
        let e = parse_config("[ppo]\ndiscount = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("ppo.discount"), "{e}");
        let e = parse_config("[ppo]\nclipp = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("ppo") && e.to_string().contains("clipp"), "{e}");
        let e = parse_config("[teacher]\nnum_envs = \"many\"\n").unwrap_err();
        assert!(e.to_string().contains("teacher.num_envs"), "{e}");
        let e = parse_config("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    fn tiny_checkpoint() -> Checkpoint {
        let world = World::default();
        let cfg = TeacherConfig { num_envs: 2, horizon: 4, terrain: TerrainMode::Flat, ..TeacherConfig::default() };
        Checkpoint::Teacher(Box::new(TeacherTrainer::new(world, cfg, PpoConfig::default(), 3).unwrap()))
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters_and_rng() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = tiny_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let (Checkpoint::Teacher(a), Checkpoint::Teacher(b)) = (&ckpt, &back) else { panic!("kind") };
        assert_eq!(param_hash(&a.teacher), param_hash(&b.teacher));
        assert_eq!(a.norm, b.norm);
        assert_eq!(a.curriculum, b.curriculum);
        let mut ra = a.envs[0].rng.clone();
        let mut rb = b.envs[0].rng.clone();
        assert_eq!(ra.random::<u64>(), rb.random::<u64>());
    }

    #[test]
    fn corrupted_and_foreign_versions_are_rejected() {
        let mut bytes = encode_checkpoint(&tiny_checkpoint()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CorruptCheckpoint(_))));
        let mut bytes = encode_checkpoint(&tiny_checkpoint()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(Error::CheckpointVersion { found: 7, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(decode_checkpoint(&bytes[..20]).is_err());
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a = stream_rng(1, 0);
        let mut b = stream_rng(1, 1);
        let mut c = stream_rng(1, 0);
        let x: u64 = a.random();
        assert_ne!(x, b.random::<u64>());
        assert_eq!(x, c.random::<u64>());
    }
}
