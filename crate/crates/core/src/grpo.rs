//! Group-relative policy optimization with a token-level clipped surrogate.

use crate::env::{mix_seed, EnvConfig, EnvOutcome, Task};
use crate::exec::par_map;
use crate::policy::{accumulate_logprob_grad, forward, Decision, Featurizer, PolicyError, PolicyParams};
use crate::rollout::{rollout, SamplingConfig};
use crate::traj::{tool_call_count, Role, Truncation};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use thiserror::Error;

/// Tolerance for behavior log-probabilities recomputed under the snapshot.
pub const STALENESS_TOL: f64 = 1e-9;
/// Added to the group standard deviation before dividing.
pub const ADV_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("stale behavior log-prob at trajectory {traj}, token {token}: stored {stored}, recomputed {recomputed}")]
    Stale { traj: usize, token: usize, stored: f64, recomputed: f64 },
    #[error("prompt filtering removed every task from the pool")]
    PoolExhausted,
    #[error("trajectory {0} is missing a behavior log-prob")]
    MissingLogprob(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Outcome,
    ForceTool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    MeanStd,
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    /// Constant-step gradient ascent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub max_trajectory_tokens: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub rollout_batch_prompts: usize,
    pub mini_batches_per_step: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Must be 0; kept so configs can state it.
    pub kl_coeff: f64,
    /// Must be 0; kept so configs can state it.
    pub entropy_coeff: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub tool_budget_train: u32,
    pub stage_schedule: Vec<Stage>,
    pub reward_kind: RewardKind,
    pub advantage_norm: AdvantageNorm,
    pub sampling: SamplingConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 8,
            rollout_batch_prompts: 16,
            mini_batches_per_step: 2,
            eps_low: 0.20,
            eps_high: 0.28,
            kl_coeff: 0.0,
            entropy_coeff: 0.0,
            lr: 5.0,
            optimizer: OptimizerKind::Sgd,
            tool_budget_train: 50,
            stage_schedule: vec![Stage { max_trajectory_tokens: 256, steps: 50 }, Stage { max_trajectory_tokens: 512, steps: 50 }],
            reward_kind: RewardKind::Outcome,
            advantage_norm: AdvantageNorm::MeanStd,
            sampling: SamplingConfig::EXACT,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.mini_batches_per_step == 0 || !self.rollout_batch_prompts.is_multiple_of(self.mini_batches_per_step) {
            return bad("rollout_batch_prompts must be a positive multiple of mini_batches_per_step");
        }
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return bad("eps_low and eps_high must be positive");
        }
        if self.kl_coeff != 0.0 || self.entropy_coeff != 0.0 {
            return bad("kl_coeff and entropy_coeff are not supported and must be 0");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.tool_budget_train == 0 {
            return bad("tool_budget_train must be at least 1");
        }
        if self.stage_schedule.is_empty() || self.stage_schedule.iter().any(|s| s.max_trajectory_tokens == 0) {
            return bad("stage_schedule must be non-empty with positive token caps");
        }
        if !(self.sampling.temperature > 0.0 && self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return bad("sampling temperature must be positive and top_p in (0, 1]");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage_schedule.iter().map(|s| s.steps).sum()
    }
}

pub fn reward(outcome: &EnvOutcome, kind: RewardKind) -> f64 {
    let ok = match kind {
        RewardKind::Outcome => outcome.correct,
        RewardKind::ForceTool => outcome.correct && outcome.used_tool,
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

pub fn compute_group_advantages(rewards: &[f64], norm: AdvantageNorm) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    match norm {
        AdvantageNorm::MeanOnly => rewards.iter().map(|r| r - mean).collect(),
        AdvantageNorm::MeanStd => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect()
        }
    }
}

/// One sampled trajectory with what the update needs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub outcome: EnvOutcome,
    pub decisions: Vec<Decision>,
    pub entropies: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

impl Sample {
    pub fn behavior_logprobs(&self) -> Vec<Option<f64>> {
        self.outcome.trajectory.steps.iter().filter(|s| s.role == Role::Policy).map(|s| s.logprob).collect()
    }
}

/// The `G` samples for one prompt.
#[derive(Debug, Clone)]
pub struct Group {
    pub task: Task,
    pub samples: Vec<Sample>,
}

impl Group {
    /// Scores samples and fills in group-relative advantages.
    pub fn new(task: Task, outcomes: Vec<(EnvOutcome, Vec<Decision>, Vec<f64>)>, kind: RewardKind, norm: AdvantageNorm) -> Self {
        let rewards: Vec<f64> = outcomes.iter().map(|(o, _, _)| reward(o, kind)).collect();
        let adv = compute_group_advantages(&rewards, norm);
        let samples = outcomes
            .into_iter()
            .zip(rewards.iter().zip(&adv))
            .map(|((outcome, decisions, entropies), (&reward, &advantage))| Sample { outcome, decisions, entropies, reward, advantage })
            .collect();
        Group { task, samples }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }

    pub fn all_correct(&self) -> bool {
        self.samples.iter().all(|s| s.reward == 1.0)
    }
}

/// Summary of importance ratios seen during one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RatioStats {
    pub tokens: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of tokens whose clipped term was selected (zero gradient).
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    pub grad: Vec<f64>,
    pub ratios: RatioStats,
}

/// Per-token `min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)` and its
/// derivative with respect to `r`. The derivative is zero exactly where the
/// clipped term is strictly smaller.
pub fn clipped_term(r: f64, a: f64, eps_low: f64, eps_high: f64) -> (f64, f64) {
    let unclipped = r * a;
    let clip = r.max(1.0 - eps_low).min(1.0 + eps_high) * a;
    if clip < unclipped {
        (clip, 0.0)
    } else {
        (unclipped, a)
    }
}

/// Value and exact gradient of
/// `(1 / sum_i |o_i|) sum_i sum_t min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)`
/// over the policy tokens of every sample in `groups`. Behavior log-probs are
/// checked against `params_old` before use.
pub fn surrogate_objective(
    groups: &[&Group],
    params_new: &PolicyParams,
    params_old: &PolicyParams,
    eps_low: f64,
    eps_high: f64,
) -> Result<Surrogate, GrpoError> {
    let n_tokens: usize = groups.iter().flat_map(|g| &g.samples).map(|s| s.decisions.len()).sum();
    let mut grad = vec![0.0; params_new.len()];
    let mut stats = RatioStats { min: f64::INFINITY, max: f64::NEG_INFINITY, ..Default::default() };
    if n_tokens == 0 {
        return Ok(Surrogate { value: 0.0, grad, ratios: RatioStats::default() });
    }
    let norm = 1.0 / n_tokens as f64;
    let same = params_new.theta == params_old.theta;
    let mut value = 0.0;
    let mut clipped = 0usize;
    let mut ratio_sum = 0.0;
    for (si, s) in groups.iter().flat_map(|g| &g.samples).enumerate() {
        let stored = s.behavior_logprobs();
        if stored.len() != s.decisions.len() {
            return Err(GrpoError::MissingLogprob(si));
        }
        let a = s.advantage;
        for (t, (d, lp_old)) in s.decisions.iter().zip(&stored).enumerate() {
            let lp_old = lp_old.ok_or(GrpoError::MissingLogprob(si))?;
            let fwd_new = forward(params_new, &d.features, d.mask)?;
            let lp_new = fwd_new.dist.logprob(d.token);
            let recomputed = if same { lp_new } else { forward(params_old, &d.features, d.mask)?.dist.logprob(d.token) };
            if (recomputed - lp_old).abs() > STALENESS_TOL {
                return Err(GrpoError::Stale { traj: si, token: t, stored: lp_old, recomputed });
            }
            let r = (lp_new - lp_old).exp();
            ratio_sum += r;
            stats.min = stats.min.min(r);
            stats.max = stats.max.max(r);
            let (term, slope) = clipped_term(r, a, eps_low, eps_high);
            value += term;
            if slope == 0.0 {
                clipped += usize::from(a != 0.0);
            } else {
                // d(r A)/d theta = A r d(log pi)/d theta
                accumulate_logprob_grad(params_new, &d.features, &fwd_new, d.token, norm * slope * r, &mut grad);
            }
        }
    }
    stats.tokens = n_tokens;
    stats.mean = ratio_sum / n_tokens as f64;
    stats.clipped_fraction = clipped as f64 / n_tokens as f64;
    Ok(Surrogate { value: value * norm, grad, ratios: stats })
}

/// Ascent optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let state = if matches!(kind, OptimizerKind::Adam { .. }) { n } else { 0 };
        Optimizer { kind, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    pub fn ascend(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        if lr == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p += lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Per-step training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub reward_mean: f64,
    pub entropy: f64,
    pub mean_tool_calls: f64,
    pub mean_response_length: f64,
    pub exec_success_rate: f64,
    pub surrogate: f64,
    pub truncated_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutStepRecord {
    pub step: usize,
    pub stage: usize,
    pub max_trajectory_tokens: usize,
    pub groups: Vec<Group>,
    pub ratios: Vec<RatioStats>,
    pub metrics: StepMetrics,
}

impl RolloutStepRecord {
    pub fn task_ids(&self) -> Vec<u64> {
        self.groups.iter().map(|g| g.task.task_id).collect()
    }
}

/// Samples `G` trajectories for each task under one frozen snapshot.
#[allow(clippy::too_many_arguments)]
pub fn collect_groups(
    params: &PolicyParams,
    featurizer: &Featurizer,
    tasks: &[Task],
    env: EnvConfig,
    cfg: &TrainerConfig,
    seed: u64,
    step: usize,
    workers: usize,
) -> Result<Vec<Group>, GrpoError> {
    let g = cfg.group_size;
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|p| (0..g).map(move |i| (p, i))).collect();
    let results = par_map(workers, &jobs, |_, &(p, i)| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step as u64, p as u64, i as u64]));
        rollout(params, featurizer, &tasks[p], env, cfg.sampling, &mut rng)
    });
    let mut it = results.into_iter();
    let mut groups = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut outs = Vec::with_capacity(g);
        for _ in 0..g {
            let r = it.next().expect("one result per job")?;
            outs.push((r.outcome, r.decisions, r.entropies));
        }
        groups.push(Group::new(task.clone(), outs, cfg.reward_kind, cfg.advantage_norm));
    }
    Ok(groups)
}

pub fn step_metrics(groups: &[Group]) -> StepMetrics {
    let samples: Vec<&Sample> = groups.iter().flat_map(|g| &g.samples).collect();
    let n = samples.len().max(1) as f64;
    let decisions: usize = samples.iter().map(|s| s.entropies.len()).sum();
    let events: usize = samples.iter().map(|s| s.outcome.trajectory.tool_events.len()).sum();
    let errors: usize = samples.iter().map(|s| s.outcome.trajectory.tool_errors()).sum();
    StepMetrics {
        reward_mean: samples.iter().map(|s| s.reward).sum::<f64>() / n,
        entropy: if decisions == 0 { 0.0 } else { samples.iter().flat_map(|s| &s.entropies).sum::<f64>() / decisions as f64 },
        mean_tool_calls: samples.iter().map(|s| tool_call_count(&s.outcome.trajectory) as f64).sum::<f64>() / n,
        mean_response_length: samples.iter().map(|s| s.outcome.trajectory.policy_len() as f64).sum::<f64>() / n,
        exec_success_rate: if events == 0 { 1.0 } else { (events - errors) as f64 / events as f64 },
        surrogate: 0.0,
        truncated_fraction: samples.iter().filter(|s| s.outcome.trajectory.truncated != Truncation::None).count() as f64 / n,
    }
}

/// Context for a training run that persists across rollout steps.
pub struct Trainer<'a> {
    pub cfg: &'a TrainerConfig,
    pub featurizer: Featurizer,
    pub env: EnvConfig,
    pub seed: u64,
    pub workers: usize,
    pub optimizer: Optimizer,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainerConfig, featurizer: Featurizer, env: EnvConfig, seed: u64, workers: usize, n_params: usize) -> Result<Self, GrpoError> {
        cfg.validate()?;
        Ok(Trainer { cfg, featurizer, env, seed, workers, optimizer: Optimizer::new(cfg.optimizer, n_params) })
    }

    fn sample_prompts(&self, pool: &[Task], step: usize) -> Vec<Task> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, step as u64, 0x9a11]));
        let mut out = Vec::with_capacity(self.cfg.rollout_batch_prompts);
        while out.len() < self.cfg.rollout_batch_prompts {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            out.extend(idx.into_iter().take(self.cfg.rollout_batch_prompts - out.len()).map(|i| pool[i].clone()));
        }
        out
    }

    /// Samples a prompt batch, then applies one ascent update per mini-batch.
    /// Every update measures ratios against the snapshot that sampled.
    pub fn rollout_step(&mut self, params: &mut PolicyParams, pool: &[Task], step: usize, stage: usize, max_tokens: usize) -> Result<RolloutStepRecord, GrpoError> {
        if pool.is_empty() {
            return Err(GrpoError::PoolExhausted);
        }
        let env = EnvConfig { max_trajectory_tokens: max_tokens, tool_budget: self.cfg.tool_budget_train, ..self.env };
        let prompts = self.sample_prompts(pool, step);
        let snapshot = params.clone();
        let groups = collect_groups(&snapshot, &self.featurizer, &prompts, env, self.cfg, self.seed, step, self.workers)?;
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, step as u64, 0x3b7c])));
        let per = groups.len() / self.cfg.mini_batches_per_step;
        let mut ratios = Vec::new();
        let mut surrogate = 0.0;
        for chunk in order.chunks(per.max(1)) {
            let batch: Vec<&Group> = chunk.iter().map(|&i| &groups[i]).collect();
            let s = surrogate_objective(&batch, params, &snapshot, self.cfg.eps_low, self.cfg.eps_high)?;
            self.optimizer.ascend(&mut params.theta, &s.grad, self.cfg.lr);
            surrogate += s.value;
            ratios.push(s.ratios);
        }
        let mut metrics = step_metrics(&groups);
        metrics.surrogate = surrogate / ratios.len().max(1) as f64;
        Ok(RolloutStepRecord { step, stage, max_trajectory_tokens: max_tokens, groups, ratios, metrics })
    }
}

/// Drops tasks whose most recent group was solved by every sample.
/// Returns the reduced pool and the removed ids.
pub fn filter_solved_prompts(pool: &[Task], last_rewards: &BTreeMap<u64, Vec<f64>>) -> Result<(Vec<Task>, Vec<u64>), GrpoError> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for t in pool {
        match last_rewards.get(&t.task_id) {
            Some(r) if !r.is_empty() && r.iter().all(|&x| x == 1.0) => removed.push(t.task_id),
            _ => kept.push(t.clone()),
        }
    }
    if kept.is_empty() {
        return Err(GrpoError::PoolExhausted);
    }
    Ok((kept, removed))
}

#[derive(Debug, Clone, Default)]
pub struct StageBoundary {
    pub after_step: usize,
    pub removed: Vec<u64>,
    pub pool_size: usize,
    pub checkpoint: Option<PathBuf>,
}

/// What is kept of each rollout step once its update is done.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub stage: usize,
    pub max_trajectory_tokens: usize,
    pub task_ids: Vec<u64>,
    pub group_rewards: Vec<Vec<f64>>,
    pub ratios: Vec<RatioStats>,
    pub metrics: StepMetrics,
}

impl From<&RolloutStepRecord> for StepSummary {
    fn from(r: &RolloutStepRecord) -> Self {
        StepSummary {
            step: r.step,
            stage: r.stage,
            max_trajectory_tokens: r.max_trajectory_tokens,
            task_ids: r.task_ids(),
            group_rewards: r.groups.iter().map(Group::rewards).collect(),
            ratios: r.ratios.clone(),
            metrics: r.metrics,
        }
    }
}

pub struct StagesResult {
    pub steps: Vec<StepSummary>,
    pub boundaries: Vec<StageBoundary>,
}

/// Where and how to write stage-boundary checkpoints.
pub struct CheckpointSink<'a> {
    pub dir: PathBuf,
    pub context_window: usize,
    pub config_hash: &'a str,
}

/// Runs every stage in order with its token cap. Between stages, tasks whose
/// latest group was all-correct are removed from the pool. `on_step` sees each
/// full record (with the parameters after its update) before it is dropped.
pub fn run_stages(
    trainer: &mut Trainer<'_>,
    params: &mut PolicyParams,
    pool: &[Task],
    checkpoints: Option<&CheckpointSink<'_>>,
    mut on_step: impl FnMut(&RolloutStepRecord, &PolicyParams) -> Result<(), GrpoError>,
) -> Result<StagesResult, GrpoError> {
    let schedule = trainer.cfg.stage_schedule.clone();
    let mut pool = pool.to_vec();
    let mut last_rewards: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut steps = Vec::new();
    let mut boundaries = Vec::new();
    let mut step = 0;
    let mut last_ckpt = None;
    for (si, stage) in schedule.iter().enumerate() {
        if si > 0 {
            let (kept, removed) = filter_solved_prompts(&pool, &last_rewards)?;
            let removed_set: BTreeSet<u64> = removed.iter().copied().collect();
            last_rewards.retain(|id, _| !removed_set.contains(id));
            pool = kept;
            boundaries.push(StageBoundary { after_step: step, removed, pool_size: pool.len(), checkpoint: last_ckpt.take() });
        }
        for _ in 0..stage.steps {
            step += 1;
            let rec = trainer.rollout_step(params, &pool, step, si, stage.max_trajectory_tokens)?;
            for g in &rec.groups {
                last_rewards.insert(g.task.task_id, g.rewards());
            }
            on_step(&rec, params)?;
            steps.push(StepSummary::from(&rec));
        }
        if let Some(sink) = checkpoints {
            let path = sink.dir.join(format!("stage{}.ckpt", si + 1));
            params.save(&path, sink.context_window, sink.config_hash)?;
            last_ckpt = Some(path);
        }
    }
    Ok(StagesResult { steps, boundaries })
}
