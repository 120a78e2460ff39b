use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrl_core::env::{generate_task_set, DifficultyProfile, EnvConfig};
use toolrl_core::exec::parallel_enabled;
use toolrl_core::grpo::{collect_groups, TrainerConfig};
use toolrl_core::metrics::{avg_at_k, EvalConfig};
use toolrl_core::policy::{Featurizer, PolicyConfig, PolicyParams};

fn policy() -> PolicyParams {
    let mut p = PolicyParams::init(&PolicyConfig::default(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    p.theta.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    p
}

/// Worker counts compared: 1 is the sequential path, 0 uses every core.
fn worker_counts() -> Vec<(usize, &'static str)> {
    if parallel_enabled() {
        vec![(1, "sequential"), (0, "parallel")]
    } else {
        vec![(1, "sequential")]
    }
}

fn rollout_groups(c: &mut Criterion) {
    let p = policy();
    let fz = Featurizer::new(PolicyConfig::default().context_window);
    let cfg = TrainerConfig::default();
    let tasks = generate_task_set(3, cfg.rollout_batch_prompts, &DifficultyProfile::default()).unwrap();
    let mut g = c.benchmark_group("collect_groups");
    for (workers, name) in worker_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &workers, |b, &w| {
            b.iter(|| collect_groups(&p, &fz, black_box(&tasks), EnvConfig::default(), &cfg, 7, 1, w).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let p = policy();
    let fz = Featurizer::new(PolicyConfig::default().context_window);
    let tasks = generate_task_set(4, 64, &DifficultyProfile::hard()).unwrap();
    let eval = EvalConfig::default();
    let mut g = c.benchmark_group("avg_at_k");
    g.sample_size(20);
    for (workers, name) in worker_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &workers, |b, &w| {
            b.iter(|| avg_at_k(&p, &fz, black_box(&tasks), &eval, EnvConfig::default(), 9, w).unwrap().mean)
        });
    }
    g.finish();
}

criterion_group!(benches, rollout_groups, evaluation);
criterion_main!(benches);
