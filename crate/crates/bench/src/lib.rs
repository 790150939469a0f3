//! Fixtures shared by the benchmarks.

use beliefwalk::beliefnets::StepData;
use beliefwalk::nn::Mat;
use beliefwalk::perception::{EXTERO_DIM, PROPRIO_DIM};
use beliefwalk::quadsim::{SimState, ACTION_DIM, PRIVILEGED_DIM};
use beliefwalk::terrain::{generate, TerrainKind, TerrainPatch, TerrainSpec};
use beliefwalk::training::World;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Default world, a rough patch and the standing pose on it.
pub fn standing(kind: TerrainKind) -> (World, TerrainPatch, SimState) {
    let world = World::default();
    let patch = generate(&TerrainSpec::new(kind, 7)).expect("default spec is valid");
    let state = SimState::nominal(&world.robot, &world.sim, &patch, 0.0, 0.0, 0.0);
    (world, patch, state)
}

/// A distillation segment of `len` steps over `rows` streams.
pub fn segment(rng: &mut impl Rng, rows: usize, len: usize) -> Vec<StepData> {
    (0..len)
        .map(|_| StepData {
            proprio: random_mat(rng, rows, PROPRIO_DIM),
            extero_noisy: random_mat(rng, rows, EXTERO_DIM),
            teacher_action: random_mat(rng, rows, ACTION_DIM),
            extero_target: random_mat(rng, rows, EXTERO_DIM),
            priv_target: random_mat(rng, rows, PRIVILEGED_DIM),
            keep: Array1::ones(rows),
        })
        .collect()
}
