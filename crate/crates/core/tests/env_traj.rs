//! Environment, sandbox and trajectory-log invariants.

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrl_core::coldstart::{teacher_generate, TeacherStyle};
use toolrl_core::env::{execute_tool, generate_task, replay, DifficultyProfile, EnvConfig, SandboxState, Task};
use toolrl_core::policy::{decisions, Featurizer, PolicyConfig, PolicyParams};
use toolrl_core::rollout::{rollout, SamplingConfig};
use toolrl_core::token::Token;
use toolrl_core::traj::{deserialize, read_log, serialize, tool_call_count, validate, write_log, LogHeader, Role, Trajectory, Truncation};

fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::init(&PolicyConfig { context_window: 2, hidden_units: 0 }, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.theta.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
    p
}

fn sampled(task_seed: u64, m: usize, param_seed: u64, budget: u32, cap: usize) -> (Task, Trajectory) {
    let task = generate_task(task_seed, m, &DifficultyProfile::default()).unwrap();
    let env = EnvConfig { tool_budget: budget, max_trajectory_tokens: cap, ..EnvConfig::default() };
    let p = random_params(param_seed, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed ^ task_seed);
    let r = rollout(&p, &Featurizer::new(2), &task, env, SamplingConfig::EXACT, &mut rng).unwrap();
    (task, r.outcome.trajectory)
}

/// Completed `<call> ... <end_call>` spans in the raw policy stream.
fn scan_calls(t: &Trajectory) -> usize {
    let mut open = false;
    let mut n = 0;
    for tok in t.policy_tokens() {
        if tok == Token::CALL {
            open = true;
        } else if tok == Token::END_CALL && open {
            open = false;
            n += 1;
        }
    }
    n
}

fn trajectory_args() -> impl Strategy<Value = (u64, usize, u64, u32, usize)> {
    (any::<u64>(), 1usize..=16, any::<u64>(), 1u32..12, 24usize..300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampled_trajectories_are_valid_and_round_trip((ts, m, ps, b, cap) in trajectory_args()) {
        let (_, t) = sampled(ts, m, ps, b, cap);
        prop_assert!(validate(&t).is_ok(), "{:?}", validate(&t));
        let back = deserialize(&serialize(&t)).unwrap();
        prop_assert_eq!(&back, &t);
        let mut buf = Vec::new();
        write_log(&mut buf, &LogHeader::new("abc", 3), std::slice::from_ref(&t)).unwrap();
        let (h, ts_back) = read_log(buf.as_slice()).unwrap();
        prop_assert_eq!(h, LogHeader::new("abc", 3));
        prop_assert_eq!(ts_back, vec![t]);
    }

    #[test]
    fn call_count_matches_token_scan((ts, m, ps, b, cap) in trajectory_args()) {
        let (_, t) = sampled(ts, m, ps, b, cap);
        prop_assert_eq!(tool_call_count(&t), scan_calls(&t));
        let idx: Vec<u32> = t.tool_events.iter().map(|e| e.call_index).collect();
        prop_assert_eq!(idx, (1..=t.tool_events.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn budget_is_never_exceeded((ts, m, ps, b, cap) in trajectory_args()) {
        let (task, t) = sampled(ts, m, ps, b, cap);
        prop_assert!(t.tool_events.len() <= b as usize);
        if t.truncated == Truncation::ToolBudget {
            prop_assert_eq!(t.tool_events.len(), b as usize);
            prop_assert_eq!(t.policy_tokens().last(), Some(Token::CALL));
        }
        prop_assert!(t.total_len() <= cap.max(t.prompt_tokens.len()));
        // calls_used rises by exactly one per completed span
        let env = EnvConfig { max_trajectory_tokens: cap, ..EnvConfig::default() };
        let used = replay(&t, &task, env, |o, _, _| b - o.remaining_budget).unwrap();
        prop_assert!(used.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    #[test]
    fn policy_length_matches_trainer_decisions((ts, m, ps, b, cap) in trajectory_args()) {
        let (_, t) = sampled(ts, m, ps, b, cap);
        let env = EnvConfig { max_trajectory_tokens: cap, ..EnvConfig::default() };
        let ds = decisions(&t, &Featurizer::new(2), &env).unwrap();
        prop_assert_eq!(ds.len(), t.policy_len());
        prop_assert_eq!(t.steps.iter().filter(|s| s.role == Role::Policy).count(), t.policy_len());
    }

    #[test]
    fn sandbox_is_deterministic(expr in prop::collection::vec(0u8..24, 0..8), last in prop::option::of(0u8..100), used in 0u32..5) {
        let toks: Vec<Token> = expr.into_iter().map(Token).collect();
        let s = SandboxState { last, calls_used: used, budget: 10 };
        let a = execute_tool(&toks, &s);
        prop_assert_eq!(a, execute_tool(&toks, &s));
        prop_assert_eq!(a.1.calls_used, used + 1);
        if !a.0.is_ok() {
            prop_assert_eq!(a.1.last, last);
        }
    }

    #[test]
    fn dense_teacher_reaches_the_answer(seed in any::<u64>(), m in 1usize..=16) {
        let task = generate_task(seed, m, &DifficultyProfile::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = EnvConfig { max_trajectory_tokens: 512, ..EnvConfig::default() };
        let t = teacher_generate(&task, &TeacherStyle::dense(), env, &mut rng);
        prop_assert_eq!(t.final_answer, Some(task.answer));
        prop_assert_eq!(t.tool_events.last().and_then(|e| e.sandbox_state_after), Some(task.answer));
        prop_assert_eq!(t.tool_events.len(), m);
    }
}
