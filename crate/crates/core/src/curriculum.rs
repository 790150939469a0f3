//! Curriculum factor, adaptive terrain curriculum and the student noise schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::terrain::{TerrainKind, TerrainSpec};
use crate::{Error, Result};

/// `c_{k+1} = c_k^d`.
pub fn advance_factor(c_k: f64, d: f64) -> Result<f64> {
    if !(c_k > 0.0 && c_k <= 1.0) {
        return Err(Error::OutOfRange { key: "curriculum.c".into(), value: c_k, min: 0.0, max: 1.0 });
    }
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::OutOfRange { key: "curriculum.d".into(), value: d, min: 0.0, max: 1.0 });
    }
    Ok(c_k.powf(d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleConfig {
    pub particles: usize,
    /// Jitter standard deviation as a fraction of each parameter's range.
    pub jitter: f64,
    /// Floor added to the desirability kernel.
    pub floor: f64,
    /// Mean shift of the difficulty parameter per unit of `score − 0.5`, as a fraction of its range.
    pub drift: f64,
    /// Initial difficulty is drawn from the lowest `initial_fraction` of its range.
    pub initial_fraction: f64,
    /// Distance (m) an episode must cover without termination to count as a traversal.
    pub traverse_distance: f64,
    pub kinds: Vec<TerrainKind>,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            particles: 50,
            jitter: 0.1,
            floor: 0.05,
            drift: 0.1,
            initial_fraction: 0.2,
            traverse_distance: 4.0,
            kinds: TerrainKind::ALL.to_vec(),
        }
    }
}

/// Desirability of a particle with traversal score `s`: peaked at 0.5, never zero.
pub fn kernel(score: f64, floor: f64) -> f64 {
    score * (1.0 - score) + floor
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub kind: TerrainKind,
    /// Parameter vectors in the kind's range order.
    pub params: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl ParticleSet {
    pub fn new<R: Rng + ?Sized>(kind: TerrainKind, cfg: &ParticleConfig, rng: &mut R) -> Self {
        let ranges = kind.param_ranges();
        let params = (0..cfg.particles)
            .map(|_| {
                ranges
                    .iter()
                    .enumerate()
                    .map(|(j, r)| {
                        let u: f64 = rng.random();
                        let span = r.max - r.min;
                        if j == 0 {
                            r.min + u * cfg.initial_fraction * span
                        } else {
                            r.min + u * span
                        }
                    })
                    .collect()
            })
            .collect();
        Self { kind, params, scores: vec![0.5; cfg.particles] }
    }

    pub fn spec(&self, index: usize, seed: u64) -> TerrainSpec {
        let mut spec = TerrainSpec::new(self.kind, seed);
        for (r, &v) in self.kind.param_ranges().iter().zip(&self.params[index]) {
            spec = spec.with(r.name, v);
        }
        spec
    }

    pub fn mean_difficulty(&self) -> f64 {
        self.params.iter().map(|p| p[0]).sum::<f64>() / self.params.len() as f64
    }

    /// Reweights by the kernel, resamples with replacement and jitters within the ranges.
    pub fn update<R: Rng + ?Sized>(&mut self, cfg: &ParticleConfig, rng: &mut R) {
        let weights: Vec<f64> = self.scores.iter().map(|&s| kernel(s.clamp(0.0, 1.0), cfg.floor)).collect();
        self.resample(&weights, cfg, rng);
    }

    /// Resampling step with explicit weights. All-zero weights fall back to uniform.
    pub fn resample<R: Rng + ?Sized>(&mut self, weights: &[f64], cfg: &ParticleConfig, rng: &mut R) {
        let n = self.params.len();
        assert_eq!(weights.len(), n);
        let sum: f64 = weights.iter().filter(|w| w.is_finite() && **w > 0.0).sum();
        let normalized: Vec<f64> = if sum > 0.0 {
            weights.iter().map(|&w| if w.is_finite() && w > 0.0 { w / sum } else { 0.0 }).collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        let ranges = self.kind.param_ranges();
        let mut next = Vec::with_capacity(n);
        let mut next_scores = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, w) in normalized.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let score = self.scores[pick];
            let p: Vec<f64> = self.params[pick]
                .iter()
                .zip(ranges)
                .enumerate()
                .map(|(j, (&v, r))| {
                    let span = r.max - r.min;
                    let shift = if j == 0 { cfg.drift * (score - 0.5) * span } else { 0.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    (v + shift + cfg.jitter * span * noise).clamp(r.min, r.max)
                })
                .collect();
            next.push(p);
            next_scores.push(score);
        }
        self.params = next;
        self.scores = next_scores;
    }
}

/// Particle populations for every terrain kind in the curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainCurriculum {
    pub sets: Vec<ParticleSet>,
    /// Per-particle (traversed, episodes) counts since the last update.
    pub tallies: Vec<Vec<(u32, u32)>>,
}

/// Identifies the particle that produced an episode's terrain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleRef {
    pub set: usize,
    pub index: usize,
}

impl TerrainCurriculum {
    pub fn new<R: Rng + ?Sized>(cfg: &ParticleConfig, rng: &mut R) -> Self {
        let sets: Vec<ParticleSet> = cfg.kinds.iter().map(|&k| ParticleSet::new(k, cfg, rng)).collect();
        let tallies = sets.iter().map(|s| vec![(0, 0); s.params.len()]).collect();
        Self { sets, tallies }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (TerrainSpec, ParticleRef) {
        let set = rng.random_range(0..self.sets.len());
        let index = rng.random_range(0..self.sets[set].params.len());
        let seed: u64 = rng.random();
        (self.sets[set].spec(index, seed), ParticleRef { set, index })
    }

    pub fn record(&mut self, particle: ParticleRef, traversed: bool) {
        let t = &mut self.tallies[particle.set][particle.index];
        t.0 += traversed as u32;
        t.1 += 1;
    }

    /// Turns tallies into scores and updates every population.
    pub fn update<R: Rng + ?Sized>(&mut self, cfg: &ParticleConfig, rng: &mut R) {
        for (set, tallies) in self.sets.iter_mut().zip(self.tallies.iter_mut()) {
            for (score, t) in set.scores.iter_mut().zip(tallies.iter_mut()) {
                if t.1 > 0 {
                    *score = t.0 as f64 / t.1 as f64;
                }
                *t = (0, 0);
            }
            set.update(cfg, rng);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainMode {
    Flat,
    Adaptive,
}

/// Student noise factor and terrain mode for an epoch.
pub fn student_schedule(epoch: usize) -> (f64, TerrainMode) {
    match epoch {
        0..10 => (0.0, TerrainMode::Flat),
        10..20 => (0.0, TerrainMode::Adaptive),
        20..100 => ((epoch - 20) as f64 / 80.0, TerrainMode::Adaptive),
        _ => (1.0, TerrainMode::Adaptive),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub c_k: f64,
    pub d: f64,
    pub c_sk: f64,
    pub epoch: usize,
    pub terrain: TerrainCurriculum,
}

impl CurriculumState {
    pub fn new<R: Rng + ?Sized>(c0: f64, d: f64, cfg: &ParticleConfig, rng: &mut R) -> Result<Self> {
        advance_factor(c0, d)?;
        Ok(Self { c_k: c0, d, c_sk: 0.0, epoch: 0, terrain: TerrainCurriculum::new(cfg, rng) })
    }

    pub fn advance(&mut self) {
        self.c_k = advance_factor(self.c_k, self.d).expect("factor stays in its domain");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_examples() {
        assert_eq!(advance_factor(1.0, 0.98).unwrap(), 1.0);
        // independent value: exp(0.98 · ln 0.3) = 0.3073115...
        assert!((advance_factor(0.3, 0.98).unwrap() - 0.3073115121672409).abs() < 1e-12);
        let mut c = 0.3;
        for _ in 0..500 {
            c = advance_factor(c, 0.98).unwrap();
        }
        assert!((1.0 - c) < 1e-3);
        assert!(advance_factor(0.0, 0.98).is_err());
        assert!(advance_factor(0.5, 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(student_schedule(5), (0.0, TerrainMode::Flat));
        assert_eq!(student_schedule(15), (0.0, TerrainMode::Adaptive));
        assert_eq!(student_schedule(60).0, 0.5);
        assert_eq!(student_schedule(100).0, 1.0);
        assert!((student_schedule(99).0 - 79.0 / 80.0).abs() < 1e-15);
        assert_eq!(student_schedule(1000).0, 1.0);
    }

    #[test]
    fn easy_particles_get_harder() {
        let cfg = ParticleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total_before = 0.0;
        let mut total_after = 0.0;
        for _ in 0..200 {
            let mut set = ParticleSet::new(TerrainKind::StairsStandard, &cfg, &mut rng);
            set.scores = vec![1.0; cfg.particles];
            total_before += set.mean_difficulty();
            set.update(&cfg, &mut rng);
            total_after += set.mean_difficulty();
        }
        assert!(total_after > total_before);
    }

    #[test]
    fn single_weight_copies_one_particle() {
        let mut cfg = ParticleConfig::default();
        cfg.jitter = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = ParticleSet::new(TerrainKind::Boxes, &cfg, &mut rng);
        set.scores = vec![0.5; cfg.particles];
        let chosen = set.params[7].clone();
        let mut w = vec![0.0; cfg.particles];
        w[7] = 1.0;
        set.resample(&w, &cfg, &mut rng);
        assert!(set.params.iter().all(|p| *p == chosen));
    }

    #[test]
    fn zero_weights_reset_to_uniform() {
        let cfg = ParticleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParticleSet::new(TerrainKind::Rough, &cfg, &mut rng);
        let before = set.params.clone();
        set.resample(&vec![0.0; cfg.particles], &cfg, &mut rng);
        assert_eq!(set.params.len(), before.len());
    }

    #[test]
    fn identical_scores_preserve_distribution() {
        let mut cfg = ParticleConfig::default();
        cfg.particles = 2000;
        cfg.jitter = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ParticleSet::new(TerrainKind::LargeSteps, &cfg, &mut rng);
        let before = set.mean_difficulty();
        set.update(&cfg, &mut rng);
        assert!((set.mean_difficulty() - before).abs() < 0.01 * 0.4);
    }

    #[test]
    fn jitter_never_leaves_ranges() {
        let cfg = ParticleConfig { jitter: 0.5, ..ParticleConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in TerrainKind::ALL {
            let mut set = ParticleSet::new(kind, &cfg, &mut rng);
            for round in 0..200 {
                set.scores = (0..cfg.particles).map(|i| ((i + round) % 11) as f64 / 10.0).collect();
                set.update(&cfg, &mut rng);
                for p in &set.params {
                    for (v, r) in p.iter().zip(kind.param_ranges()) {
                        assert!(*v >= r.min && *v <= r.max);
                    }
                }
            }
            // every particle must still produce a valid terrain spec
            set.spec(0, 1).validate().unwrap();
        }
    }

    #[test]
    fn tallies_become_scores() {
        let cfg = ParticleConfig { kinds: vec![TerrainKind::Rough], particles: 4, ..ParticleConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tc = TerrainCurriculum::new(&cfg, &mut rng);
        let r = ParticleRef { set: 0, index: 2 };
        tc.record(r, true);
        tc.record(r, false);
        tc.record(r, true);
        let mut probe = tc.clone();
        for (s, t) in probe.sets[0].scores.iter_mut().zip(&probe.tallies[0]) {
            if t.1 > 0 {
                *s = t.0 as f64 / t.1 as f64;
            }
        }
        assert!((probe.sets[0].scores[2] - 2.0 / 3.0).abs() < 1e-15);
        tc.update(&cfg, &mut rng);
        assert!(tc.tallies[0].iter().all(|t| *t == (0, 0)));
    }

    proptest! {
        #[test]
        fn factor_monotone_and_bounded(c in 1e-6f64..=1.0, d in 0.01f64..0.99) {
            let next = advance_factor(c, d).unwrap();
            prop_assert!(next >= c && next <= 1.0);
        }

        #[test]
        fn schedule_monotone(e in 0usize..500) {
            prop_assert!(student_schedule(e + 1).0 >= student_schedule(e).0);
        }
    }
}
