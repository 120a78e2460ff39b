//! Scripted demonstrations, curation, density bands and supervised warm-up.

use crate::env::{mix_seed, EnvConfig, EnvError, Episode, PhaseKind, Task};
use crate::exec::par_map;
use crate::policy::{accumulate_logprob_grad, decisions, forward, Decision, Featurizer, PolicyError, PolicyParams};
use crate::token::Token;
use crate::traj::{tool_call_count, Trajectory, Truncation};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ColdStartError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch size must be positive")]
    BatchSize,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Dense,
    Sparse,
    SingleShot,
}

/// Operations batched into one call by the sparse teacher.
pub const SPARSE_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherStyle {
    pub kind: TeacherKind,
    /// Chance that one expression operand is written off by one.
    pub noise_rate: f64,
    /// Dense only: chance of re-reading the register with `<call> <last> <end_call>` after a step.
    #[serde(default)]
    pub check_rate: f64,
    /// Chance of one malformed call (then a retry) somewhere in the episode.
    #[serde(default)]
    pub error_rate: f64,
}

impl TeacherStyle {
    pub fn new(kind: TeacherKind) -> Self {
        TeacherStyle { kind, noise_rate: 0.0, check_rate: 0.0, error_rate: 0.0 }
    }
    pub fn dense() -> Self {
        Self::new(TeacherKind::Dense)
    }
    pub fn sparse() -> Self {
        Self::new(TeacherKind::Sparse)
    }
    pub fn single_shot() -> Self {
        Self::new(TeacherKind::SingleShot)
    }
    pub fn with_noise(self, noise_rate: f64) -> Self {
        TeacherStyle { noise_rate, ..self }
    }
    pub fn with_checks(self, check_rate: f64) -> Self {
        TeacherStyle { check_rate, ..self }
    }
    pub fn with_errors(self, error_rate: f64) -> Self {
        TeacherStyle { error_rate, ..self }
    }

    fn ops_per_call(&self, m: usize) -> usize {
        match self.kind {
            TeacherKind::Dense => 1,
            TeacherKind::Sparse => SPARSE_CHUNK,
            TeacherKind::SingleShot => m,
        }
    }
}

fn push(ep: &mut Episode<'_>, t: Token) {
    ep.step(t, 0.0).expect("teacher emits grammatical tokens");
}

/// Writes a demonstration through the environment. Chain steps are written
/// from the same recall the policy observes, so batched styles inherit its
/// slips; dense calls always write the first step after feedback.
pub fn teacher_generate<R: Rng + ?Sized>(task: &Task, style: &TeacherStyle, env: EnvConfig, rng: &mut R) -> Trajectory {
    let m = task.len();
    let per_call = style.ops_per_call(m);
    let n_calls = m.div_ceil(per_call);
    let noisy_op = rng.random_bool(style.noise_rate.clamp(0.0, 1.0)).then(|| rng.random_range(0..m));
    let error_before = rng.random_bool(style.error_rate.clamp(0.0, 1.0)).then(|| rng.random_range(0..n_calls));
    let mut ep = Episode::new(task, env);
    let mut op_index = 0;
    for call in 0..n_calls {
        if ep.is_done() {
            break;
        }
        if error_before == Some(call) {
            push(&mut ep, Token::CALL);
            if ep.is_done() {
                break;
            }
            push(&mut ep, Token::END_CALL);
            if ep.is_done() {
                break;
            }
        }
        push(&mut ep, Token::CALL);
        if ep.is_done() {
            break;
        }
        let first = if op_index == 0 { Token::digit(task.start_value) } else { Token::LAST };
        push(&mut ep, first);
        let end = (op_index + per_call).min(m);
        while op_index < end && !ep.is_done() {
            let recall = ep.observation().recall;
            push(&mut ep, recall.op.expect("chain step available").token());
            if ep.is_done() {
                break;
            }
            let mut a = ep.observation().recall.operand.expect("operand available");
            if noisy_op == Some(op_index) {
                a = if a == 9 || (a > 0 && rng.random_bool(0.5)) { a - 1 } else { a + 1 };
            }
            push(&mut ep, Token::digit(a));
            op_index += 1;
        }
        if ep.is_done() {
            break;
        }
        push(&mut ep, Token::END_CALL);
        if style.kind == TeacherKind::Dense && !ep.is_done() && rng.random_bool(style.check_rate.clamp(0.0, 1.0)) {
            for t in [Token::CALL, Token::LAST, Token::END_CALL] {
                if ep.is_done() {
                    break;
                }
                push(&mut ep, t);
            }
        }
    }
    if !ep.is_done() {
        push(&mut ep, Token::ANSWER);
        for _ in 0..2 {
            if ep.is_done() {
                break;
            }
            let obs = ep.observation();
            debug_assert_eq!(obs.phase, PhaseKind::Answer);
            let digit = obs.copy_digit.unwrap_or(0);
            push(&mut ep, Token::digit(digit));
        }
        if !ep.is_done() {
            push(&mut ep, Token::EOS);
        }
    }
    ep.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    WrongAnswer,
    ToolError,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub trajectory: Trajectory,
    pub reasons: Vec<RejectReason>,
}

/// Every reason a trajectory fails the quality bar, empty when it passes.
pub fn rejection_reasons(t: &Trajectory) -> Result<Vec<RejectReason>, EnvError> {
    let task = Task::from_prompt(t.task_id, &t.prompt_tokens)?;
    let mut reasons = Vec::new();
    if t.final_answer != Some(task.answer) {
        reasons.push(RejectReason::WrongAnswer);
    }
    if t.tool_events.iter().any(|e| !e.result.is_ok()) {
        reasons.push(RejectReason::ToolError);
    }
    if t.truncated != Truncation::None {
        reasons.push(RejectReason::Truncated);
    }
    Ok(reasons)
}

/// Keeps trajectories with the right answer, only successful tool calls and
/// no truncation. Order is preserved on both sides.
pub fn curate(dataset: Vec<Trajectory>) -> Result<(Vec<Trajectory>, Vec<Rejected>), EnvError> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for t in dataset {
        let reasons = rejection_reasons(&t)?;
        if reasons.is_empty() {
            kept.push(t);
        } else {
            rejected.push(Rejected { trajectory: t, reasons });
        }
    }
    Ok((kept, rejected))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityBand {
    AtMost(usize),
    AtLeast(usize),
    All,
}

impl DensityBand {
    pub fn contains(&self, calls: usize) -> bool {
        match *self {
            DensityBand::AtMost(n) => calls <= n,
            DensityBand::AtLeast(n) => calls >= n,
            DensityBand::All => true,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            DensityBand::AtMost(n) => format!("at_most_{n}"),
            DensityBand::AtLeast(n) => format!("at_least_{n}"),
            DensityBand::All => "all".to_string(),
        }
    }
}

pub fn stratify_by_density(dataset: &[Trajectory], band: DensityBand) -> Vec<Trajectory> {
    dataset.iter().filter(|t| band.contains(tool_call_count(t))).cloned().collect()
}

/// Text manifest: one line per band with the member task ids.
pub fn band_manifest(dataset: &[Trajectory], bands: &[DensityBand]) -> String {
    let mut out = String::new();
    for b in bands {
        let ids: Vec<String> = stratify_by_density(dataset, *b).iter().map(|t| t.task_id.to_string()).collect();
        out.push_str(&format!("{}\t{}\t{}\n", b.label(), ids.len(), ids.join(",")));
    }
    out
}

/// Share of each teacher style in a synthesized corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusMix {
    pub dense: f64,
    pub sparse: f64,
    pub single_shot: f64,
    pub noise_rate: f64,
    pub check_rate: f64,
    pub error_rate: f64,
}

impl Default for CorpusMix {
    fn default() -> Self {
        CorpusMix { dense: 0.25, sparse: 0.35, single_shot: 0.40, noise_rate: 0.05, check_rate: 0.25, error_rate: 0.03 }
    }
}

impl CorpusMix {
    pub fn style_for(&self, u: f64) -> TeacherStyle {
        let total = self.dense + self.sparse + self.single_shot;
        let x = u * total;
        let kind = if x < self.dense {
            TeacherKind::Dense
        } else if x < self.dense + self.sparse {
            TeacherKind::Sparse
        } else {
            TeacherKind::SingleShot
        };
        TeacherStyle { kind, noise_rate: self.noise_rate, check_rate: self.check_rate, error_rate: self.error_rate }
    }
}

/// One teacher trajectory per task, style drawn from `mix`, each with its own
/// seeded stream so the corpus is identical for any worker count.
pub fn synthesize_corpus(tasks: &[Task], mix: &CorpusMix, env: EnvConfig, seed: u64, workers: usize) -> Vec<Trajectory> {
    par_map(workers, tasks, |i, task| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64, 0x7eac]));
        let style = mix.style_for(rng.random());
        teacher_generate(task, &style, env, &mut rng)
    })
}

/// Decisions of one demonstration, the unit of supervised training.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub decisions: Vec<Decision>,
}

pub fn sft_examples(
    dataset: &[Trajectory],
    featurizer: &Featurizer,
    env: &EnvConfig,
    workers: usize,
) -> Result<Vec<SftExample>, ColdStartError> {
    par_map(workers, dataset, |_, t| decisions(t, featurizer, env).map(|decisions| SftExample { decisions }))
        .into_iter()
        .map(|r| r.map_err(ColdStartError::from))
        .collect()
}

/// Mean per-token cross-entropy over policy tokens, and its gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, examples: &[&SftExample]) -> Result<(f64, Vec<f64>), ColdStartError> {
    let n: usize = examples.iter().map(|e| e.decisions.len()).sum();
    if n == 0 {
        return Err(ColdStartError::EmptyDataset);
    }
    let w = 1.0 / n as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for d in examples.iter().flat_map(|e| &e.decisions) {
        let fwd = forward(params, &d.features, d.mask)?;
        loss -= fwd.dist.logprob(d.token);
        // descent direction on the loss is ascent on log-likelihood
        accumulate_logprob_grad(params, &d.features, &fwd, d.token, -w, &mut grad);
    }
    Ok((loss * w, grad))
}

pub fn sft_loss(params: &PolicyParams, examples: &[SftExample]) -> Result<f64, ColdStartError> {
    let refs: Vec<&SftExample> = examples.iter().collect();
    Ok(sft_loss_and_grad(params, &refs)?.0)
}

/// One pass of mini-batch gradient descent in a seeded order. Returns the
/// token-weighted mean of each batch's loss measured before its update.
pub fn sft_epoch(
    params: &mut PolicyParams,
    dataset: &[SftExample],
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64, ColdStartError> {
    if dataset.is_empty() {
        return Err(ColdStartError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(ColdStartError::BatchSize);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&SftExample> = chunk.iter().map(|&i| &dataset[i]).collect();
        let n: usize = batch.iter().map(|e| e.decisions.len()).sum();
        if n == 0 {
            continue;
        }
        let (loss, grad) = sft_loss_and_grad(params, &batch)?;
        total += loss * n as f64;
        tokens += n;
        if lr != 0.0 {
            for (p, g) in params.theta.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
    }
    if tokens == 0 {
        return Err(ColdStartError::EmptyDataset);
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 6, batch_size: 32, lr: 3.0 }
    }
}

/// Runs `cfg.epochs` epochs; returns the per-epoch losses.
pub fn sft_train(params: &mut PolicyParams, dataset: &[SftExample], cfg: &SftConfig, seed: u64) -> Result<Vec<f64>, ColdStartError> {
    (0..cfg.epochs)
        .map(|e| sft_epoch(params, dataset, cfg.lr, cfg.batch_size, mix_seed(&[seed, e as u64, 0x5f7])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_task, DifficultyProfile};
    use crate::policy::PolicyConfig;
    use crate::rollout::greedy_rollout;
    use crate::traj::validate;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn task(m: usize, seed: u64) -> Task {
        generate_task(seed, m, &DifficultyProfile::default()).unwrap()
    }

    #[test]
    fn dense_teacher_makes_one_call_per_step() {
        let env = EnvConfig::default();
        for s in 0..200 {
            let t = task(9 + (s as usize % 8), s);
            let traj = teacher_generate(&t, &TeacherStyle::dense(), env, &mut rng(s));
            assert_eq!(tool_call_count(&traj), t.len());
            assert_eq!(traj.final_answer, Some(t.answer));
            assert!(validate(&traj).is_ok());
            assert!(rejection_reasons(&traj).unwrap().is_empty());
        }
    }

    #[test]
    fn single_shot_and_sparse_call_counts() {
        let env = EnvConfig::default();
        for s in 0..200 {
            let m = 1 + (s as usize % 16);
            let t = task(m, s);
            let one = teacher_generate(&t, &TeacherStyle::single_shot(), env, &mut rng(s));
            assert_eq!(tool_call_count(&one), 1);
            let sp = teacher_generate(&t, &TeacherStyle::sparse(), env, &mut rng(s));
            assert!(tool_call_count(&sp) <= m.div_ceil(SPARSE_CHUNK));
            assert!(validate(&sp).is_ok());
        }
    }

    #[test]
    fn check_calls_add_density() {
        let env = EnvConfig::default();
        let t = task(9, 3);
        let traj = teacher_generate(&t, &TeacherStyle::dense().with_checks(1.0), env, &mut rng(0));
        assert_eq!(tool_call_count(&traj), 18);
        assert_eq!(traj.final_answer, Some(t.answer));
    }

    #[test]
    fn error_injection_is_rejected_as_tool_error() {
        let env = EnvConfig::default();
        let t = task(5, 8);
        let traj = teacher_generate(&t, &TeacherStyle::dense().with_errors(1.0), env, &mut rng(0));
        assert_eq!(traj.final_answer, Some(t.answer));
        assert_eq!(rejection_reasons(&traj).unwrap(), vec![RejectReason::ToolError]);
    }

    #[test]
    fn noise_produces_rejectable_failures() {
        let env = EnvConfig::default();
        let mut bad = 0;
        let n = 1000;
        let data: Vec<Trajectory> = (0..n)
            .map(|s| teacher_generate(&task(1 + s as usize % 16, s), &TeacherStyle::dense().with_noise(0.5), env, &mut rng(s)))
            .collect();
        for t in &data {
            let task = Task::from_prompt(t.task_id, &t.prompt_tokens).unwrap();
            if t.final_answer != Some(task.answer) {
                bad += 1;
            }
        }
        assert!(bad > 0);
        let (kept, rejected) = curate(data).unwrap();
        assert_eq!(rejected.len(), bad);
        assert!(kept.iter().all(|t| rejection_reasons(t).unwrap().is_empty()));
        let again = curate(kept.clone()).unwrap();
        assert_eq!(again.0, kept);
        assert!(again.1.is_empty());
    }

    #[test]
    fn stratify_examples() {
        let env = EnvConfig::default();
        let t = task(12, 1);
        let mk = |style: TeacherStyle, m: usize| {
            let t = task(m, 1);
            teacher_generate(&t, &style, env, &mut rng(0))
        };
        let zero = Trajectory { tool_events: vec![], ..mk(TeacherStyle::single_shot(), 3) };
        let data = vec![
            zero,
            mk(TeacherStyle::single_shot(), 5),
            mk(TeacherStyle::dense(), 3),
            mk(TeacherStyle::dense(), 9),
            teacher_generate(&t, &TeacherStyle::dense(), env, &mut rng(0)),
        ];
        let counts: Vec<usize> = data.iter().map(tool_call_count).collect();
        assert_eq!(counts, vec![0, 1, 3, 9, 12]);
        let low: Vec<usize> = stratify_by_density(&data, DensityBand::AtMost(1)).iter().map(tool_call_count).collect();
        assert_eq!(low, vec![0, 1]);
        let high: Vec<usize> = stratify_by_density(&data, DensityBand::AtLeast(9)).iter().map(tool_call_count).collect();
        assert_eq!(high, vec![9, 12]);
    }

    #[test]
    fn sft_lr_zero_is_bitwise_identity_and_empty_is_error() {
        let cfg = PolicyConfig::default();
        let fz = Featurizer::new(cfg.context_window);
        let env = EnvConfig::default();
        let data = vec![teacher_generate(&task(4, 2), &TeacherStyle::dense(), env, &mut rng(0))];
        let ex = sft_examples(&data, &fz, &env, 1).unwrap();
        let mut p = PolicyParams::init(&cfg, 0);
        p.theta.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin());
        let before = p.clone();
        sft_epoch(&mut p, &ex, 0.0, 4, 1).unwrap();
        assert!(p.theta.iter().zip(&before.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(sft_epoch(&mut p, &[], 0.1, 4, 1), Err(ColdStartError::EmptyDataset)));
    }

    #[test]
    fn memorizes_single_demonstration() {
        let cfg = PolicyConfig::default();
        let fz = Featurizer::new(cfg.context_window);
        let env = EnvConfig::default();
        let t = task(6, 11);
        let demo = teacher_generate(&t, &TeacherStyle::dense(), env, &mut rng(0));
        let ex = sft_examples(std::slice::from_ref(&demo), &fz, &env, 1).unwrap();
        let mut p = PolicyParams::init(&cfg, 0);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let loss = sft_epoch(&mut p, &ex, 5.0, 1, e).unwrap();
            assert!(loss <= prev + 1e-12, "epoch {e}: {loss} > {prev}");
            prev = loss;
        }
        assert!(prev < 0.05);
        let out = greedy_rollout(&p, &fz, &t, env).unwrap();
        let toks: Vec<Token> = out.trajectory.steps.iter().map(|s| s.token).collect();
        let want: Vec<Token> = demo.steps.iter().map(|s| s.token).collect();
        assert_eq!(toks, want);
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let cfg = PolicyConfig { context_window: 1, hidden_units: 0 };
        let fz = Featurizer::new(1);
        let env = EnvConfig::default();
        let data: Vec<Trajectory> = (0..3)
            .map(|s| teacher_generate(&task(2 + s as usize, s), &TeacherStyle::sparse(), env, &mut rng(s)))
            .collect();
        let ex = sft_examples(&data, &fz, &env, 1).unwrap();
        let refs: Vec<&SftExample> = ex.iter().collect();
        let mut p = PolicyParams::init(&cfg, 0);
        let mut r = rng(5);
        p.theta.iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
        let (_, g) = sft_loss_and_grad(&p, &refs).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let x = p.theta[i];
            p.theta[i] = x + h;
            let up = sft_loss(&p, &ex).unwrap();
            p.theta[i] = x - h;
            let down = sft_loss(&p, &ex).unwrap();
            p.theta[i] = x;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 + 1e-5 * fd.abs().max(g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
