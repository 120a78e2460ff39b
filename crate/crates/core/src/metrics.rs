//! Evaluation and training-dynamics metrics.

use crate::env::{mix_seed, EnvConfig, EnvOutcome, Task};
use crate::exec::par_map;
use crate::grpo::RolloutStepRecord;
use crate::policy::{Featurizer, PolicyError, PolicyParams};
use crate::rollout::{rollout, SamplingConfig};
use crate::traj::{tool_call_count, Trajectory, Truncation};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub inference_tool_budget: u32,
    pub max_trajectory_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 16, temperature: 0.6, top_p: 0.95, inference_tool_budget: 50, max_trajectory_tokens: 512 }
    }
}

impl EvalConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { temperature: self.temperature, top_p: self.top_p }
    }
}

#[derive(Debug, Clone)]
pub struct AvgAtK {
    pub per_task: Vec<f64>,
    pub mean: f64,
    /// `k` trajectories per task, task-major.
    pub trajectories: Vec<Trajectory>,
}

/// Accuracy from retained trajectories, grouped `k` per task in order.
pub fn recount_avg_at_k(tasks: &[Task], trajectories: &[Trajectory], k: usize) -> (Vec<f64>, f64) {
    let per_task: Vec<f64> = tasks
        .iter()
        .zip(trajectories.chunks(k))
        .map(|(t, ts)| ts.iter().filter(|x| x.final_answer == Some(t.answer)).count() as f64 / k as f64)
        .collect();
    let mean = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
    (per_task, mean)
}

/// `k` samples per task. Each sample's random stream depends only on
/// `(seed, task_id, sample)`, so results ignore task order and worker count.
pub fn avg_at_k(
    params: &PolicyParams,
    featurizer: &Featurizer,
    tasks: &[Task],
    eval: &EvalConfig,
    env: EnvConfig,
    seed: u64,
    workers: usize,
) -> Result<AvgAtK, PolicyError> {
    assert!(!tasks.is_empty(), "evaluation task set is empty");
    assert!(eval.k >= 1 && eval.inference_tool_budget >= 1);
    let env = EnvConfig { tool_budget: eval.inference_tool_budget, max_trajectory_tokens: eval.max_trajectory_tokens, ..env };
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..eval.k).map(move |s| (t, s))).collect();
    let outs = par_map(workers, &jobs, |_, &(t, s)| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tasks[t].task_id, s as u64, 0xe7a1]));
        rollout(params, featurizer, &tasks[t], env, eval.sampling(), &mut rng).map(|r| r.outcome)
    });
    let trajectories = outs.into_iter().map(|o| o.map(|o: EnvOutcome| o.trajectory)).collect::<Result<Vec<_>, _>>()?;
    let (per_task, mean) = recount_avg_at_k(tasks, &trajectories, eval.k);
    Ok(AvgAtK { per_task, mean, trajectories })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DifficultyBin {
    Easy,
    Medium,
    Hard,
    VeryHard,
}

impl DifficultyBin {
    pub const ALL: [DifficultyBin; 4] = [DifficultyBin::Easy, DifficultyBin::Medium, DifficultyBin::Hard, DifficultyBin::VeryHard];

    /// Closed lower bounds at 0.75, 0.50 and 0.25.
    pub fn of(accuracy: f64) -> DifficultyBin {
        if accuracy >= 0.75 {
            DifficultyBin::Easy
        } else if accuracy >= 0.50 {
            DifficultyBin::Medium
        } else if accuracy >= 0.25 {
            DifficultyBin::Hard
        } else {
            DifficultyBin::VeryHard
        }
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            DifficultyBin::Easy => (0.75, 1.0),
            DifficultyBin::Medium => (0.50, 0.75),
            DifficultyBin::Hard => (0.25, 0.50),
            DifficultyBin::VeryHard => (0.0, 0.25),
        }
    }
}

/// Counts per bin in [`DifficultyBin::ALL`] order.
pub fn difficulty_bins(per_task: &[f64]) -> [usize; 4] {
    let mut out = [0; 4];
    for &a in per_task {
        out[DifficultyBin::of(a) as usize] += 1;
    }
    out
}

pub const HIST_LABELS: [&str; 6] = ["0", "1", "2", "3-5", "6-9", "10+"];

pub fn hist_bucket(calls: usize) -> usize {
    match calls {
        0 => 0,
        1 => 1,
        2 => 2,
        3..=5 => 3,
        6..=9 => 4,
        _ => 5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub mean_tool_calls: f64,
    /// Policy tokens only.
    pub mean_response_length: f64,
    pub mean_tool_output_length: f64,
    pub tool_use_ratio: f64,
    /// 1.0 when there were no tool events at all.
    pub exec_success_rate: f64,
    pub no_tool_events: bool,
    pub histogram: [usize; 6],
    pub budget_truncations: usize,
}

pub fn rollout_stats(trajs: &[Trajectory]) -> RolloutStats {
    assert!(!trajs.is_empty(), "no trajectories");
    let n = trajs.len() as f64;
    let events: usize = trajs.iter().map(|t| t.tool_events.len()).sum();
    let errors: usize = trajs.iter().map(|t| t.tool_errors()).sum();
    let mut histogram = [0; 6];
    for t in trajs {
        histogram[hist_bucket(tool_call_count(t))] += 1;
    }
    RolloutStats {
        mean_tool_calls: trajs.iter().map(|t| tool_call_count(t) as f64).sum::<f64>() / n,
        mean_response_length: trajs.iter().map(|t| t.policy_len() as f64).sum::<f64>() / n,
        mean_tool_output_length: trajs.iter().map(|t| t.tool_output_len() as f64).sum::<f64>() / n,
        tool_use_ratio: trajs.iter().filter(|t| !t.tool_events.is_empty()).count() as f64 / n,
        exec_success_rate: if events == 0 { 1.0 } else { (events - errors) as f64 / events as f64 },
        no_tool_events: events == 0,
        histogram,
        budget_truncations: trajs.iter().filter(|t| t.truncated == Truncation::ToolBudget).count(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub budget: u32,
    pub result: AvgAtK,
}

/// `avg@k` at each inference budget with everything else fixed.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    params: &PolicyParams,
    featurizer: &Featurizer,
    tasks: &[Task],
    budgets: &[u32],
    eval: &EvalConfig,
    env: EnvConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<SweepPoint>, PolicyError> {
    assert!(budgets.windows(2).all(|w| w[0] < w[1]), "budgets must be sorted ascending");
    budgets
        .iter()
        .map(|&b| {
            let e = EvalConfig { inference_tool_budget: b, ..*eval };
            Ok(SweepPoint { budget: b, result: avg_at_k(params, featurizer, tasks, &e, env, seed, workers)? })
        })
        .collect()
}

/// The sweep budgets 2, 4, ..., 256.
pub fn doubling_budgets(lo: u32, hi: u32) -> Vec<u32> {
    std::iter::successors(Some(lo), |b| b.checked_mul(2)).take_while(|&b| b <= hi).collect()
}

/// Mean policy entropy over every decision of each step's rollouts.
pub fn entropy_curve(records: &[RolloutStepRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| {
            let (sum, n) = r
                .groups
                .iter()
                .flat_map(|g| &g.samples)
                .flat_map(|s| &s.entropies)
                .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

/// Formats a float for CSV output with a fixed number of digits, so files are
/// byte-comparable across runs.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.9}")
}

pub const TRAIN_CSV_HEADER: &str =
    "step,stage,max_tokens,reward_mean,entropy,mean_tool_calls,mean_response_length,exec_success_rate,surrogate,truncated_fraction,clipped_fraction";

pub fn train_csv_row(label: &str, r: &RolloutStepRecord) -> String {
    let m = &r.metrics;
    let clipped = r.ratios.iter().map(|x| x.clipped_fraction).sum::<f64>() / r.ratios.len().max(1) as f64;
    let mut s = String::new();
    if !label.is_empty() {
        s.push_str(label);
        s.push(',');
    }
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.stage + 1,
        r.max_trajectory_tokens,
        fmt_f(m.reward_mean),
        fmt_f(m.entropy),
        fmt_f(m.mean_tool_calls),
        fmt_f(m.mean_response_length),
        fmt_f(m.exec_success_rate),
        fmt_f(m.surrogate),
        fmt_f(m.truncated_fraction),
        fmt_f(clipped)
    );
    s
}
