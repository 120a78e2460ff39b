//! Config-driven experiment runner: task sets, demonstration corpus, cold
//! start, staged RL, evaluation and artifact files.

use crate::coldstart::{
    band_manifest, curate, sft_examples, sft_train, stratify_by_density, synthesize_corpus, ColdStartError, CorpusMix,
    DensityBand, Rejected, SftConfig,
};
use crate::env::{generate_task_set, mix_seed, DifficultyProfile, EnvConfig, EnvError, Task};
use crate::grpo::{run_stages, CheckpointSink, GrpoError, RewardKind, StageBoundary, StepSummary, Trainer, TrainerConfig};
use crate::metrics::{
    avg_at_k, budget_sweep, difficulty_bins, fmt_f, rollout_stats, train_csv_row, AvgAtK, EvalConfig, RolloutStats, HIST_LABELS,
    TRAIN_CSV_HEADER,
};
use crate::policy::{Featurizer, PolicyConfig, PolicyError, PolicyParams};
use crate::traj::{serialize, write_log, LogHeader, Trajectory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    ColdStart(#[from] ColdStartError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Rq1,
    Rq2,
    Rq3,
    #[serde(rename = "aster_recipe")]
    Recipe,
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSetConfig {
    pub count: usize,
    pub profile: DifficultyProfile,
}

impl Default for TaskSetConfig {
    fn default() -> Self {
        TaskSetConfig { count: 256, profile: DifficultyProfile::default() }
    }
}

/// One training arm of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    /// Demonstration band used for the supervised warm-up; none starts from zero weights.
    #[serde(default)]
    pub cold_start: Option<DensityBand>,
    #[serde(default = "default_reward")]
    pub reward_kind: RewardKind,
    /// Overrides the trainer's tool budget.
    #[serde(default)]
    pub tool_budget_train: Option<u32>,
}

fn default_reward() -> RewardKind {
    RewardKind::Outcome
}

impl Variant {
    pub fn new(label: &str, cold_start: Option<DensityBand>) -> Self {
        Variant { label: label.to_string(), cold_start, reward_kind: RewardKind::Outcome, tool_budget_train: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub tasks: usize,
    pub profile: DifficultyProfile,
    pub mix: CorpusMix,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { tasks: 3000, profile: DifficultyProfile::default(), mix: CorpusMix::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment: Experiment,
    /// Empty selects the experiment's standard arms.
    pub variants: Vec<Variant>,
    pub policy: PolicyConfig,
    pub env: EnvConfig,
    pub train_tasks: TaskSetConfig,
    /// Held-out set for the final score.
    pub eval_tasks: TaskSetConfig,
    /// Set tracked during training.
    pub probe_tasks: TaskSetConfig,
    pub corpus: CorpusConfig,
    pub sft: SftConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    /// Probe evaluation period in rollout steps; 0 disables the curve.
    pub eval_every: usize,
    /// Cold-start bands compared by rq2.
    pub bands: Vec<DensityBand>,
    /// Training budgets compared by rq3.
    pub train_budgets: Vec<u32>,
    /// Cold start shared by the rq3 arms.
    pub budget_cold_start: Option<DensityBand>,
    pub sweep_budgets: Vec<u32>,
    pub log_trajectories: bool,
    pub save_checkpoints: bool,
    /// Rollout worker threads; 0 means one per core. Does not affect results.
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            experiment: Experiment::Unit,
            variants: Vec::new(),
            policy: PolicyConfig::default(),
            env: EnvConfig::default(),
            train_tasks: TaskSetConfig { count: 512, profile: DifficultyProfile::default() },
            eval_tasks: TaskSetConfig { count: 128, profile: DifficultyProfile::hard() },
            probe_tasks: TaskSetConfig { count: 128, profile: DifficultyProfile::default() },
            corpus: CorpusConfig::default(),
            sft: SftConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 0,
            bands: vec![DensityBand::AtMost(1), DensityBand::AtMost(5), DensityBand::AtLeast(9), DensityBand::All],
            train_budgets: vec![10, 50],
            budget_cold_start: Some(DensityBand::All),
            sweep_budgets: Vec::new(),
            log_trajectories: false,
            save_checkpoints: true,
            workers: 0,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        self.trainer.validate().map_err(|e| RunError::Config(format!("trainer: {e}")))?;
        for (name, ts) in [("train_tasks", &self.train_tasks), ("eval_tasks", &self.eval_tasks), ("probe_tasks", &self.probe_tasks)] {
            if ts.count == 0 {
                return bad(format!("{name}.count must be positive"));
            }
            ts.profile.validate().map_err(|e| RunError::Config(format!("{name}.profile: {e}")))?;
        }
        self.corpus.profile.validate().map_err(|e| RunError::Config(format!("corpus.profile: {e}")))?;
        if self.eval.k == 0 || self.eval.inference_tool_budget == 0 {
            return bad("eval.k and eval.inference_tool_budget must be at least 1".into());
        }
        if !(self.eval.temperature > 0.0 && self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return bad("eval.temperature must be positive and eval.top_p in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.env.slip_rate) {
            return bad("env.slip_rate must lie in [0, 1]".into());
        }
        if self.policy.context_window == 0 {
            return bad("policy.context_window must be at least 1".into());
        }
        if !self.sweep_budgets.windows(2).all(|w| w[0] < w[1]) || self.sweep_budgets.contains(&0) {
            return bad("sweep_budgets must be positive and strictly ascending".into());
        }
        if self.sft.batch_size == 0 {
            return bad("sft.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Arms the experiment runs, either explicit or the standard set.
    pub fn resolved_variants(&self) -> Vec<Variant> {
        if !self.variants.is_empty() {
            return self.variants.clone();
        }
        match self.experiment {
            Experiment::Rq1 => vec![
                Variant::new("zero", None),
                Variant { reward_kind: RewardKind::ForceTool, ..Variant::new("zero_force_tool", None) },
                Variant::new("sparse_coldstart", Some(DensityBand::AtMost(1))),
                Variant::new("dense_coldstart", Some(DensityBand::AtLeast(9))),
            ],
            Experiment::Rq2 => self.bands.iter().map(|b| Variant::new(&b.label(), Some(*b))).collect(),
            Experiment::Rq3 => self
                .train_budgets
                .iter()
                .map(|&b| Variant { tool_budget_train: Some(b), ..Variant::new(&format!("budget_{b}"), self.budget_cold_start) })
                .collect(),
            Experiment::Recipe => vec![Variant::new("recipe", Some(DensityBand::AtLeast(9)))],
            Experiment::Unit => vec![Variant::new("unit", Some(DensityBand::All))],
        }
    }

    /// Resolved config as pretty JSON with explicit arms.
    pub fn resolved_json(&self) -> String {
        let mut c = self.clone();
        c.variants = self.resolved_variants();
        serde_json::to_string_pretty(&c).expect("config serializes")
    }

    /// Hash over everything that can change results (not workers or paths).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.variants = self.resolved_variants();
        c.workers = 0;
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }
}

/// Demonstrations after curation.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub raw: usize,
    pub kept: Vec<Trajectory>,
    pub rejected: Vec<Rejected>,
}

pub fn build_corpus(cfg: &RunConfig, workers: usize) -> Result<Corpus, RunError> {
    let tasks = generate_task_set(mix_seed(&[cfg.seed, 0xc0]), cfg.corpus.tasks, &cfg.corpus.profile)?;
    let raw = synthesize_corpus(&tasks, &cfg.corpus.mix, cfg.env, mix_seed(&[cfg.seed, 0xc1]), workers);
    let n = raw.len();
    let (kept, rejected) = curate(raw)?;
    Ok(Corpus { raw: n, kept, rejected })
}

pub struct TaskSets {
    pub train: Vec<Task>,
    pub eval: Vec<Task>,
    pub probe: Vec<Task>,
}

pub fn task_sets(cfg: &RunConfig) -> Result<TaskSets, RunError> {
    Ok(TaskSets {
        train: generate_task_set(mix_seed(&[cfg.seed, 0x71]), cfg.train_tasks.count, &cfg.train_tasks.profile)?,
        eval: generate_task_set(mix_seed(&[cfg.seed, 0x72]), cfg.eval_tasks.count, &cfg.eval_tasks.profile)?,
        probe: generate_task_set(mix_seed(&[cfg.seed, 0x73]), cfg.probe_tasks.count, &cfg.probe_tasks.profile)?,
    })
}

/// Supervised warm-up on one band of the curated corpus.
pub fn cold_start(
    cfg: &RunConfig,
    corpus: &Corpus,
    band: DensityBand,
    workers: usize,
) -> Result<(PolicyParams, Vec<f64>, usize), RunError> {
    let featurizer = Featurizer::new(cfg.policy.context_window);
    let subset = stratify_by_density(&corpus.kept, band);
    let examples = sft_examples(&subset, &featurizer, &cfg.env, workers)?;
    let mut params = PolicyParams::init(&cfg.policy, mix_seed(&[cfg.seed, 0x1a]));
    let losses = sft_train(&mut params, &examples, &cfg.sft, mix_seed(&[cfg.seed, 0x5f]))?;
    Ok((params, losses, subset.len()))
}

#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: Variant,
    pub sft_examples: usize,
    pub sft_losses: Vec<f64>,
    /// Probe score right after the warm-up (or at initialization).
    pub initial_probe: f64,
    pub probe_curve: Vec<(usize, f64)>,
    pub final_probe: f64,
    pub final_eval: AvgAtK,
    pub final_eval_stats: RolloutStats,
    pub steps: Vec<StepSummary>,
    pub boundaries: Vec<StageBoundary>,
    pub sweep: Vec<(u32, f64)>,
    pub params: PolicyParams,
}

impl VariantReport {
    pub fn entropy_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.metrics.entropy).collect()
    }

    /// Mean of the per-step entropy over the first `n` steps.
    pub fn early_entropy(&self, n: usize) -> f64 {
        let c = self.entropy_curve();
        let k = n.min(c.len()).max(1);
        c.iter().take(k).sum::<f64>() / k as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub baseline_probe: f64,
    pub corpus_raw: usize,
    pub corpus_kept: usize,
    pub variants: Vec<VariantReport>,
    pub files: Vec<PathBuf>,
}

/// Writes every artifact beneath one directory.
pub struct Artifacts {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(root: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(root)?;
        Ok(Artifacts { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf, RunError> {
        let rel_path = Path::new(rel);
        if rel_path.is_absolute() || rel_path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(RunError::Config(format!("artifact path escapes the output directory: {rel}")));
        }
        let p = self.root.join(rel_path);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf, RunError> {
        let p = self.path(rel)?;
        std::fs::write(&p, contents)?;
        if !self.written.contains(&PathBuf::from(rel)) {
            self.written.push(PathBuf::from(rel));
        }
        Ok(p)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

fn eval_env(cfg: &RunConfig) -> EnvConfig {
    cfg.env
}

/// Seed of every evaluation in a run, so a saved checkpoint re-evaluates to
/// the same numbers.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    mix_seed(&[cfg.seed, 0xe0])
}

fn write_jsonl(art: &mut Artifacts, rel: &str, hash: &str, seed: u64, trajs: &[Trajectory]) -> Result<(), RunError> {
    let mut buf = Vec::new();
    write_log(&mut buf, &LogHeader::new(hash, seed), trajs)?;
    art.write(rel, &String::from_utf8(buf).expect("utf-8 log"))?;
    Ok(())
}

fn run_variant(
    cfg: &RunConfig,
    variant: &Variant,
    sets: &TaskSets,
    corpus: Option<&Corpus>,
    art: &mut Artifacts,
    hash: &str,
    workers: usize,
) -> Result<VariantReport, RunError> {
    let featurizer = Featurizer::new(cfg.policy.context_window);
    let label = variant.label.as_str();
    let (mut params, sft_losses, sft_n) = match (variant.cold_start, corpus) {
        (Some(band), Some(c)) => cold_start(cfg, c, band, workers)?,
        _ => (PolicyParams::init(&cfg.policy, mix_seed(&[cfg.seed, 0x1a])), Vec::new(), 0),
    };
    if cfg.save_checkpoints {
        let p = art.path(&format!("checkpoints/{label}/init.ckpt"))?;
        params.save(&p, cfg.policy.context_window, hash)?;
    }
    let env = eval_env(cfg);
    let seed = eval_seed(cfg);
    let initial_probe = avg_at_k(&params, &featurizer, &sets.probe, &cfg.eval, env, seed, workers)?.mean;

    let mut trainer_cfg = cfg.trainer.clone();
    trainer_cfg.reward_kind = variant.reward_kind;
    if let Some(b) = variant.tool_budget_train {
        trainer_cfg.tool_budget_train = b;
    }
    let mut trainer = Trainer::new(&trainer_cfg, featurizer, cfg.env, mix_seed(&[cfg.seed, 0x9e]), workers, params.len())?;
    let ckpt_dir = art.path(&format!("checkpoints/{label}/x"))?.parent().expect("parent").to_path_buf();
    let sink = CheckpointSink { dir: ckpt_dir, context_window: cfg.policy.context_window, config_hash: hash };
    let mut probe_curve = vec![(0, initial_probe)];
    let mut train_log: Vec<u8> = Vec::new();
    let mut rollouts_csv = String::from("step,stage,task_id,sample,reward,tool_calls,truncated\n");
    if cfg.log_trajectories {
        crate::traj::write_log(&mut train_log, &LogHeader::new(hash, cfg.seed), &[])?;
    }
    let result = run_stages(&mut trainer, &mut params, &sets.train, cfg.save_checkpoints.then_some(&sink), |rec, p| {
        if cfg.log_trajectories {
            for g in &rec.groups {
                for (i, s) in g.samples.iter().enumerate() {
                    let t = &s.outcome.trajectory;
                    train_log.extend_from_slice(serialize(t).as_bytes());
                    train_log.push(b'\n');
                    let _ = writeln!(
                        rollouts_csv,
                        "{},{},{},{},{},{},{:?}",
                        rec.step,
                        rec.stage + 1,
                        g.task.task_id,
                        i,
                        s.reward,
                        t.tool_events.len(),
                        t.truncated
                    );
                }
            }
        }
        if cfg.eval_every > 0 && rec.step % cfg.eval_every == 0 {
            let a = avg_at_k(p, &featurizer, &sets.probe, &cfg.eval, env, seed, workers)?;
            probe_curve.push((rec.step, a.mean));
        }
        Ok(())
    })?;
    if cfg.log_trajectories {
        art.write(&format!("logs/{label}/train.jsonl"), &String::from_utf8(train_log).expect("utf-8 log"))?;
        art.write(&format!("logs/{label}/rollouts.csv"), &rollouts_csv)?;
    }
    let final_probe = match probe_curve.last() {
        Some(&(s, v)) if s == result.steps.len() && s > 0 => v,
        _ => {
            let v = avg_at_k(&params, &featurizer, &sets.probe, &cfg.eval, env, seed, workers)?.mean;
            if cfg.eval_every > 0 {
                probe_curve.push((result.steps.len(), v));
            }
            v
        }
    };
    let final_eval = avg_at_k(&params, &featurizer, &sets.eval, &cfg.eval, env, seed, workers)?;
    let final_eval_stats = rollout_stats(&final_eval.trajectories);
    if cfg.log_trajectories {
        write_jsonl(art, &format!("logs/{label}/eval.jsonl"), hash, cfg.seed, &final_eval.trajectories)?;
    }
    let mut sweep = Vec::new();
    if !cfg.sweep_budgets.is_empty() {
        for pt in budget_sweep(&params, &featurizer, &sets.eval, &cfg.sweep_budgets, &cfg.eval, env, seed, workers)? {
            if cfg.log_trajectories {
                write_jsonl(art, &format!("logs/{label}/sweep_{}.jsonl", pt.budget), hash, cfg.seed, &pt.result.trajectories)?;
            }
            sweep.push((pt.budget, pt.result.mean));
        }
    }
    if cfg.save_checkpoints {
        let p = art.path(&format!("checkpoints/{label}/final.ckpt"))?;
        params.save(&p, cfg.policy.context_window, hash)?;
    }
    Ok(VariantReport {
        variant: variant.clone(),
        sft_examples: sft_n,
        sft_losses,
        initial_probe,
        probe_curve,
        final_probe,
        final_eval,
        final_eval_stats,
        steps: result.steps,
        boundaries: result.boundaries,
        sweep,
        params,
    })
}

fn write_metric_files(art: &mut Artifacts, cfg: &RunConfig, report: &RunReport) -> Result<(), RunError> {
    let mut train = format!("variant,{TRAIN_CSV_HEADER}\n");
    let mut entropy = String::from("variant,step,entropy\n");
    let mut acc = String::from("variant,step,probe_avg_at_k\n");
    let mut hist = String::from("variant,bucket,count\n");
    let mut sweep = String::from("variant,budget,avg_at_k\n");
    let mut final_csv = String::from("variant,sft_examples,initial_probe,final_probe,final_eval,easy,medium,hard,very_hard,mean_tool_calls,mean_response_length,tool_use_ratio,exec_success_rate,no_tool_events,budget_truncations\n");
    let mut boundaries = String::from("variant,after_step,pool_size,removed\n");
    for v in &report.variants {
        let l = &v.variant.label;
        for s in &v.steps {
            let row = StepRow(s);
            let _ = writeln!(train, "{l},{}", row.csv());
            let _ = writeln!(entropy, "{l},{},{}", s.step, fmt_f(s.metrics.entropy));
        }
        for (step, a) in &v.probe_curve {
            let _ = writeln!(acc, "{l},{step},{}", fmt_f(*a));
        }
        for (label, count) in HIST_LABELS.iter().zip(v.final_eval_stats.histogram) {
            let _ = writeln!(hist, "{l},{label},{count}");
        }
        for (b, a) in &v.sweep {
            let _ = writeln!(sweep, "{l},{b},{}", fmt_f(*a));
        }
        let bins = difficulty_bins(&v.final_eval.per_task);
        let st = &v.final_eval_stats;
        let _ = writeln!(
            final_csv,
            "{l},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            v.sft_examples,
            fmt_f(v.initial_probe),
            fmt_f(v.final_probe),
            fmt_f(v.final_eval.mean),
            bins[0],
            bins[1],
            bins[2],
            bins[3],
            fmt_f(st.mean_tool_calls),
            fmt_f(st.mean_response_length),
            fmt_f(st.tool_use_ratio),
            fmt_f(st.exec_success_rate),
            st.no_tool_events,
            st.budget_truncations
        );
        for b in &v.boundaries {
            let ids: Vec<String> = b.removed.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(boundaries, "{l},{},{},{}", b.after_step, b.pool_size, ids.join(" "));
        }
    }
    art.write("metrics/train.csv", &train)?;
    art.write("metrics/fig7_entropy.csv", &entropy)?;
    art.write("metrics/fig3a_accuracy.csv", &acc)?;
    art.write("metrics/fig2a_hist.csv", &hist)?;
    if !cfg.sweep_budgets.is_empty() {
        art.write("metrics/fig5_sweep.csv", &sweep)?;
    }
    art.write("metrics/final.csv", &final_csv)?;
    art.write("metrics/stage_filter.csv", &boundaries)?;
    art.write("summary.txt", &summary_text(cfg, report))?;
    Ok(())
}

struct StepRow<'a>(&'a StepSummary);

impl StepRow<'_> {
    fn csv(&self) -> String {
        let s = self.0;
        let rec = crate::grpo::RolloutStepRecord {
            step: s.step,
            stage: s.stage,
            max_trajectory_tokens: s.max_trajectory_tokens,
            groups: Vec::new(),
            ratios: s.ratios.clone(),
            metrics: s.metrics,
        };
        train_csv_row("", &rec)
    }
}

fn summary_text(cfg: &RunConfig, r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {:?} seed {} config {}", cfg.experiment, cfg.seed, r.config_hash);
    let _ = writeln!(s, "corpus: {} synthesized, {} kept after curation", r.corpus_raw, r.corpus_kept);
    let _ = writeln!(s, "untrained masked policy, probe avg@{}: {:.4}", cfg.eval.k, r.baseline_probe);
    for v in &r.variants {
        let _ = writeln!(s, "\n[{}]", v.variant.label);
        if let Some(b) = v.variant.cold_start {
            let last = v.sft_losses.last().copied().unwrap_or(f64::NAN);
            let _ = writeln!(s, "  cold start {} on {} demonstrations, final loss {:.4}", b.label(), v.sft_examples, last);
        }
        let _ = writeln!(s, "  probe avg@{}: start {:.4}, end {:.4}", cfg.eval.k, v.initial_probe, v.final_probe);
        let _ = writeln!(s, "  held-out avg@{}: {:.4}", cfg.eval.k, v.final_eval.mean);
        let _ = writeln!(s, "  early entropy (first 30 steps): {:.4}", v.early_entropy(30));
        let st = &v.final_eval_stats;
        let _ = writeln!(
            s,
            "  held-out tool calls {:.2}, response length {:.1}, exec success {:.4}{}",
            st.mean_tool_calls,
            st.mean_response_length,
            st.exec_success_rate,
            if st.no_tool_events { " (no tool events)" } else { "" }
        );
        if !v.sweep.is_empty() {
            let pts: Vec<String> = v.sweep.iter().map(|(b, a)| format!("{b}:{a:.3}")).collect();
            let _ = writeln!(s, "  budget sweep {}", pts.join(" "));
        }
        for b in &v.boundaries {
            let _ = writeln!(s, "  after step {}: removed {} solved tasks, pool {}", b.after_step, b.removed.len(), b.pool_size);
        }
    }
    s
}

fn manifest(cfg: &RunConfig, report: &RunReport, art: &Artifacts) -> Result<String, RunError> {
    let mut files = serde_json::Map::new();
    for rel in &art.written {
        let bytes = std::fs::read(art.root.join(rel))?;
        files.insert(rel.display().to_string(), serde_json::Value::String(hex::encode(Sha256::digest(&bytes))));
    }
    let m = serde_json::json!({
        "config_hash": report.config_hash,
        "seed": cfg.seed,
        "experiment": cfg.experiment,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "parallel_build": crate::exec::parallel_enabled(),
        "files": files,
    });
    Ok(serde_json::to_string_pretty(&m)?)
}

/// Runs the configured experiment end to end, writing artifacts under
/// `cfg.out_dir`. On failure the partial tree is kept with a failure record.
pub fn run(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    art.write("resolved_config.json", &cfg.resolved_json())?;
    match run_inner(cfg, &mut art) {
        Ok(r) => Ok(r),
        Err(e) => {
            let _ = art.write("failure.txt", &format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_inner(cfg: &RunConfig, art: &mut Artifacts) -> Result<RunReport, RunError> {
    let hash = cfg.config_hash();
    let workers = cfg.workers;
    let sets = task_sets(cfg)?;
    let variants = cfg.resolved_variants();
    let corpus = if variants.iter().any(|v| v.cold_start.is_some()) {
        let c = build_corpus(cfg, workers)?;
        if cfg.log_trajectories {
            write_jsonl(art, "corpus/curated.jsonl", &hash, cfg.seed, &c.kept)?;
            let mut rej = String::new();
            for r in &c.rejected {
                rej.push_str(&serde_json::to_string(r)?);
                rej.push('\n');
            }
            art.write("corpus/rejected.jsonl", &rej)?;
        }
        let bands = [DensityBand::AtMost(1), DensityBand::AtMost(5), DensityBand::AtLeast(9), DensityBand::All];
        art.write("corpus/bands.txt", &band_manifest(&c.kept, &bands))?;
        Some(c)
    } else {
        None
    };
    let featurizer = Featurizer::new(cfg.policy.context_window);
    let zero = PolicyParams::init(&PolicyConfig { hidden_units: 0, ..cfg.policy }, 0);
    let baseline_probe = avg_at_k(&zero, &featurizer, &sets.probe, &cfg.eval, eval_env(cfg), eval_seed(cfg), workers)?.mean;
    let mut reports = Vec::new();
    for v in &variants {
        reports.push(run_variant(cfg, v, &sets, corpus.as_ref(), art, &hash, workers)?);
    }
    let mut report = RunReport {
        config_hash: hash,
        baseline_probe,
        corpus_raw: corpus.as_ref().map_or(0, |c| c.raw),
        corpus_kept: corpus.as_ref().map_or(0, |c| c.kept.len()),
        variants: reports,
        files: Vec::new(),
    };
    write_metric_files(art, cfg, &report)?;
    let m = manifest(cfg, &report, art)?;
    art.write("manifest.json", &m)?;
    report.files = art.written.clone();
    Ok(report)
}
