//! Curation, density bands, warm-up dynamics and evaluation metrics.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrl_core::coldstart::{curate, teacher_generate, CorpusMix, DensityBand, TeacherStyle};
use toolrl_core::env::{generate_task, generate_task_set, replay, DifficultyProfile, EnvConfig, Task};
use toolrl_core::experiment::{build_corpus, cold_start, task_sets, RunConfig};
use toolrl_core::metrics::{avg_at_k, budget_sweep, difficulty_bins, doubling_budgets, recount_avg_at_k, EvalConfig};
use toolrl_core::policy::{Featurizer, PolicyConfig, PolicyParams};
use toolrl_core::rollout::{rollout, SamplingConfig};
use toolrl_core::traj::{read_log, tool_call_count, write_log, LogHeader, Role};

fn noisy_corpus(seed: u64, n: usize) -> (Vec<Task>, Vec<toolrl_core::traj::Trajectory>) {
    let tasks = generate_task_set(seed, n, &DifficultyProfile::default()).unwrap();
    let mix = CorpusMix { noise_rate: 0.2, error_rate: 0.1, ..CorpusMix::default() };
    let env = EnvConfig { max_trajectory_tokens: 180, ..EnvConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = tasks.iter().map(|t| teacher_generate(t, &mix.style_for(rng.random()), env, &mut rng)).collect();
    (tasks, trajs)
}

fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::init(&PolicyConfig { context_window: 2, hidden_units: 0 }, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.theta.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn curation_is_idempotent_and_replay_consistent(seed in any::<u64>()) {
        let (tasks, trajs) = noisy_corpus(seed, 60);
        let (kept, rejected) = curate(trajs.clone()).unwrap();
        prop_assert_eq!(kept.len() + rejected.len(), trajs.len());
        let (again, none) = curate(kept.clone()).unwrap();
        prop_assert_eq!(&again, &kept);
        prop_assert!(none.is_empty());
        for t in &kept {
            let task = tasks.iter().find(|x| x.task_id == t.task_id).unwrap();
            prop_assert_eq!(t.final_answer, Some(task.answer));
            // replay regenerates every tool output from the sandbox
            let env = EnvConfig { max_trajectory_tokens: 180, ..EnvConfig::default() };
            prop_assert!(replay(t, task, env, |_, _, _| ()).is_ok());
        }
    }

    #[test]
    fn avg_at_k_ignores_task_order_and_workers(seed in any::<u64>()) {
        let tasks = generate_task_set(seed, 12, &DifficultyProfile::lengths(1, 6)).unwrap();
        let p = random_params(seed, 1.0);
        let fz = Featurizer::new(2);
        let eval = EvalConfig { k: 4, ..EvalConfig::default() };
        let env = EnvConfig::default();
        let a = avg_at_k(&p, &fz, &tasks, &eval, env, 9, 1).unwrap();
        let mut shuffled: Vec<usize> = (0..tasks.len()).collect();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let perm: Vec<Task> = shuffled.iter().map(|&i| tasks[i].clone()).collect();
        let b = avg_at_k(&p, &fz, &perm, &eval, env, 9, 4).unwrap();
        for (j, &i) in shuffled.iter().enumerate() {
            prop_assert_eq!(a.per_task[i], b.per_task[j]);
        }
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        let bins = difficulty_bins(&a.per_task);
        prop_assert_eq!(bins.iter().sum::<usize>(), tasks.len());
    }

    #[test]
    fn bins_partition_the_unit_interval(acc in prop::collection::vec(0.0f64..=1.0, 0..50)) {
        prop_assert_eq!(difficulty_bins(&acc).iter().sum::<usize>(), acc.len());
    }
}

#[test]
fn teacher_styles_land_in_their_bands() {
    let env = EnvConfig { max_trajectory_tokens: 512, ..EnvConfig::default() };
    for s in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let long = generate_task(s, 9 + (s % 8) as usize, &DifficultyProfile::default()).unwrap();
        let dense = teacher_generate(&long, &TeacherStyle::dense(), env, &mut rng);
        assert!(DensityBand::AtLeast(9).contains(tool_call_count(&dense)), "seed {s}");
        let any = generate_task(s, 1 + (s % 16) as usize, &DifficultyProfile::default()).unwrap();
        let single = teacher_generate(&any, &TeacherStyle::single_shot(), env, &mut rng);
        assert!(DensityBand::AtMost(1).contains(tool_call_count(&single)), "seed {s}");
        let sparse = teacher_generate(&any, &TeacherStyle::sparse(), env, &mut rng);
        assert!(tool_call_count(&sparse) <= any.len().div_ceil(4), "seed {s}");
    }
}

#[test]
fn metrics_recount_from_logs() {
    let tasks = generate_task_set(5, 10, &DifficultyProfile::default()).unwrap();
    let p = random_params(5, 1.0);
    let fz = Featurizer::new(2);
    let eval = EvalConfig { k: 3, ..EvalConfig::default() };
    let a = avg_at_k(&p, &fz, &tasks, &eval, EnvConfig::default(), 1, 2).unwrap();
    let mut buf = Vec::new();
    write_log(&mut buf, &LogHeader::new("h", 1), &a.trajectories).unwrap();
    let (_, back) = read_log(buf.as_slice()).unwrap();
    let (per_task, mean) = recount_avg_at_k(&tasks, &back, eval.k);
    assert_eq!(per_task, a.per_task);
    assert_eq!(mean, a.mean);
}

/// A policy blind to the remaining budget follows the same token stream
/// under every budget until a call is denied, so accuracy cannot drop as the
/// budget grows.
#[test]
fn sweep_is_monotone_for_budget_blind_policy() {
    let fz = Featurizer::new(2);
    let tasks = generate_task_set(17, 24, &DifficultyProfile::lengths(1, 10)).unwrap();
    // a warm policy that actually solves some tasks, then made budget-blind
    let cfg = RunConfig { seed: 4, policy: PolicyConfig { context_window: 2, hidden_units: 0 }, ..RunConfig::default() };
    let corpus = build_corpus(&RunConfig { corpus: toolrl_core::experiment::CorpusConfig { tasks: 600, ..Default::default() }, ..cfg.clone() }, 0).unwrap();
    let (mut p, _, _) = cold_start(&cfg, &corpus, DensityBand::All, 0).unwrap();
    let v = p.shape.vocab;
    for f in fz.budget_features() {
        p.theta[f * v..(f + 1) * v].iter_mut().for_each(|x| *x = 0.0);
    }
    let eval = EvalConfig { k: 8, ..EvalConfig::default() };
    let budgets = doubling_budgets(1, 64);
    let pts = budget_sweep(&p, &fz, &tasks, &budgets, &eval, EnvConfig::default(), 3, 0).unwrap();
    for w in pts.windows(2) {
        for (i, (lo, hi)) in w[0].result.per_task.iter().zip(&w[1].result.per_task).enumerate() {
            assert!(hi >= lo, "task {i}: {} -> {} at budget {}", lo, hi, w[1].budget);
        }
        // shared prefixes: each shorter-budget trajectory is a prefix of the longer one
        for (a, b) in w[0].result.trajectories.iter().zip(&w[1].result.trajectories) {
            let n = a.steps.len().min(b.steps.len());
            assert_eq!(a.steps[..n].iter().map(|s| s.token).collect::<Vec<_>>(), b.steps[..n].iter().map(|s| s.token).collect::<Vec<_>>());
        }
    }
    assert!(pts.last().unwrap().result.mean > pts[0].result.mean, "sweep is flat; oracle untested");
}

/// Warm-up on dense demonstrations leaves a more exploratory policy than
/// warm-up on single-call demonstrations.
#[test]
fn dense_warm_up_has_higher_entropy() {
    let mut wins = 0;
    for seed in 1..=5u64 {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let corpus = build_corpus(&cfg, 0).unwrap();
        let probe = task_sets(&cfg).unwrap().probe;
        let fz = Featurizer::new(cfg.policy.context_window);
        let mean_entropy = |band| {
            let (p, _, _) = cold_start(&cfg, &corpus, band, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut sum, mut n) = (0.0, 0);
            for t in &probe {
                let r = rollout(&p, &fz, t, cfg.env, SamplingConfig::EXACT, &mut rng).unwrap();
                sum += r.entropies.iter().sum::<f64>();
                n += r.entropies.len();
                assert_eq!(r.entropies.len(), r.outcome.trajectory.steps.iter().filter(|s| s.role == Role::Policy).count());
            }
            sum / n as f64
        };
        if mean_entropy(DensityBand::AtLeast(9)) > mean_entropy(DensityBand::AtMost(1)) {
            wins += 1;
        }
    }
    assert_eq!(wins, 5);
}
