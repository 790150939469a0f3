use std::hint::black_box;

use beliefwalk::beliefnets::{StudentArch, StudentNet, TeacherNet};
use beliefwalk::nn::Params;
use beliefwalk::perception::{apply_noise, EpisodicNoise, NoiseParams, EXTERO_DIM, PROPRIO_DIM};
use beliefwalk::quadsim::{step, Action, ACTION_DIM, PRIVILEGED_DIM};
use beliefwalk::terrain::{generate, TerrainKind, TerrainSpec};
use beliefwalk::training::gae;
use beliefwalk_bench::{random_mat, rng, segment, standing};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

fn terrain(c: &mut Criterion) {
    for kind in [TerrainKind::Rough, TerrainKind::Boxes, TerrainKind::StairsStandard] {
        c.bench_function(&format!("terrain_generate/{}", kind.name()), |b| {
            let mut seed = 0;
            b.iter(|| {
                seed += 1;
                generate(black_box(&TerrainSpec::new(kind, seed))).unwrap()
            })
        });
    }
}

fn simulation(c: &mut Criterion) {
    let (world, patch, state) = standing(TerrainKind::Rough);
    let mut r = rng(1);
    let action = Action::from_slice(&(0..ACTION_DIM).map(|_| r.random_range(-0.2..0.2)).collect::<Vec<_>>());
    c.bench_function("sim_step", |b| b.iter(|| step(black_box(&state), &action, &patch, &world.robot, &world.sim)));

    let params = NoiseParams::small();
    let episodic = EpisodicNoise::draw(&params, &mut r);
    c.bench_function("height_samples_noisy", |b| b.iter(|| apply_noise(&patch, black_box(&state), &params, &episodic, 0.5, &mut r)));
}

fn networks(c: &mut Criterion) {
    let mut r = rng(2);
    let teacher = TeacherNet::new(&mut r);
    let (p, e, s) = (random_mat(&mut r, 64, PROPRIO_DIM), random_mat(&mut r, 64, EXTERO_DIM), random_mat(&mut r, 64, PRIVILEGED_DIM));
    c.bench_function("teacher_forward/64", |b| b.iter(|| teacher.forward(&p.view(), &e.view(), &s.view())));

    let student = StudentNet::new(StudentArch::default(), &mut r);
    let steps = segment(&mut r, 16, 10);
    let hidden = student.zero_hidden(16);
    c.bench_function("student_segment_grad/16x10", |b| {
        b.iter_batched(
            || student.zeros_like(),
            |mut grad| {
                student.segment_loss_and_grad(&steps, &hidden, 1.0, 0.5, &mut grad);
                grad.num_params()
            },
            BatchSize::LargeInput,
        )
    });
}

fn advantages(c: &mut Criterion) {
    let mut r = rng(3);
    let n = 8000;
    let rewards: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let values: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let terminals: Vec<bool> = (0..n).map(|_| r.random_bool(0.01)).collect();
    let ends: Vec<bool> = terminals.iter().enumerate().map(|(i, &t)| t || i % 250 == 249).collect();
    c.bench_function("gae/8000", |b| b.iter(|| gae(&rewards, &values, &values, &terminals, &ends, 0.996, 0.95)));
}

criterion_group!(benches, terrain, simulation, networks, advantages);
criterion_main!(benches);
