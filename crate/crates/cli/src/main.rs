use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use toolrl_core::coldstart::{band_manifest, curate, DensityBand};
use toolrl_core::experiment::{build_corpus, eval_seed, run, task_sets, RunConfig};
use toolrl_core::metrics::{avg_at_k, budget_sweep, difficulty_bins, doubling_budgets, fmt_f};
use toolrl_core::policy::{Featurizer, PolicyParams};
use toolrl_core::traj::{read_log, write_log, LogHeader};
use toolrl_core::verify::{run_properties, Faults};

/// Output directory override honored when `--out` is absent.
const OUT_ENV: &str = "TOOLRL_OUT";

#[derive(Parser)]
#[command(name = "toolrl", version, about = "Tool-use RL experiments on a synthetic arithmetic sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for rollouts (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config.
    Run(Common),
    /// Run the property and oracle self-checks.
    Verify,
    /// avg@k of a checkpoint on the config's held-out task set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy of a checkpoint across inference tool budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ascending budgets; defaults to 2,4,...,256.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<u32>,
    },
    /// Split a demonstration log into kept and rejected records.
    Curate {
        #[command(flatten)]
        common: Common,
        /// Trajectory log to curate; without it a corpus is synthesized from the config.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(o) = explicit_out(c) {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn explicit_out(c: &Common) -> Option<PathBuf> {
    c.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
}

fn load_policy(path: &Path, cfg: &RunConfig) -> Result<(PolicyParams, Featurizer)> {
    let (params, k) = PolicyParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if k != cfg.policy.context_window {
        eprintln!("note: checkpoint context window {k} overrides config value {}", cfg.policy.context_window);
    }
    Ok((params, Featurizer::new(k)))
}

fn cmd_run(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let report = run(&cfg).with_context(|| format!("run failed; partial artifacts in {}", cfg.out_dir.display()))?;
    print!("{}", std::fs::read_to_string(cfg.out_dir.join("summary.txt"))?);
    println!("\nartifacts: {} ({} files)", cfg.out_dir.display(), report.files.len());
    Ok(())
}

fn cmd_verify() -> Result<bool> {
    let mut ok = true;
    for r in run_properties(&Faults::default()) {
        println!("{} {:<36} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    Ok(ok)
}

fn cmd_eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let (params, fz) = load_policy(checkpoint, &cfg)?;
    let sets = task_sets(&cfg)?;
    let a = avg_at_k(&params, &fz, &sets.eval, &cfg.eval, cfg.env, eval_seed(&cfg), cfg.workers)?;
    let bins = difficulty_bins(&a.per_task);
    println!("avg@{} over {} tasks: {:.4}", cfg.eval.k, sets.eval.len(), a.mean);
    println!("easy {} medium {} hard {} very_hard {}", bins[0], bins[1], bins[2], bins[3]);
    if explicit_out(c).is_some() {
        std::fs::create_dir_all(&cfg.out_dir)?;
        let mut csv = String::from("task_id,accuracy\n");
        for (t, acc) in sets.eval.iter().zip(&a.per_task) {
            csv.push_str(&format!("{},{}\n", t.task_id, fmt_f(*acc)));
        }
        std::fs::write(cfg.out_dir.join("eval.csv"), csv)?;
    }
    Ok(())
}

fn cmd_sweep(c: &Common, checkpoint: &Path, budgets: &[u32]) -> Result<()> {
    let cfg = load_config(c)?;
    let (params, fz) = load_policy(checkpoint, &cfg)?;
    let budgets = if budgets.is_empty() { doubling_budgets(2, 256) } else { budgets.to_vec() };
    if !budgets.windows(2).all(|w| w[0] < w[1]) || budgets.contains(&0) {
        bail!("budgets must be positive and strictly ascending");
    }
    let sets = task_sets(&cfg)?;
    let pts = budget_sweep(&params, &fz, &sets.eval, &budgets, &cfg.eval, cfg.env, eval_seed(&cfg), cfg.workers)?;
    let mut csv = String::from("budget,avg_at_k\n");
    for p in &pts {
        println!("budget {:>4}: {:.4}", p.budget, p.result.mean);
        csv.push_str(&format!("{},{}\n", p.budget, fmt_f(p.result.mean)));
    }
    if explicit_out(c).is_some() {
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::write(cfg.out_dir.join("fig5_sweep.csv"), csv)?;
    }
    Ok(())
}

fn cmd_curate(c: &Common, input: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let (header, dataset) = match input {
        Some(p) => {
            let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let (h, d) = read_log(BufReader::new(f))?;
            (h, d)
        }
        None => {
            let corpus = build_corpus(&cfg, cfg.workers)?;
            let all: Vec<_> = corpus.kept.into_iter().chain(corpus.rejected.into_iter().map(|r| r.trajectory)).collect();
            (LogHeader::new(cfg.config_hash(), cfg.seed), all)
        }
    };
    let n = dataset.len();
    let (kept, rejected) = curate(dataset)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut buf = Vec::new();
    write_log(&mut buf, &header, &kept)?;
    std::fs::write(cfg.out_dir.join("curated.jsonl"), buf)?;
    let mut rej = String::new();
    for r in &rejected {
        rej.push_str(&serde_json::to_string(r)?);
        rej.push('\n');
    }
    std::fs::write(cfg.out_dir.join("rejected.jsonl"), rej)?;
    let bands = [DensityBand::AtMost(1), DensityBand::AtMost(5), DensityBand::AtLeast(9), DensityBand::All];
    std::fs::write(cfg.out_dir.join("bands.txt"), band_manifest(&kept, &bands))?;
    println!("{n} records: {} kept, {} rejected -> {}", kept.len(), rejected.len(), cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(c) => cmd_run(c).map(|_| true),
        Command::Verify => cmd_verify(),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint).map(|_| true),
        Command::Sweep { common, checkpoint, budgets } => cmd_sweep(common, checkpoint, budgets).map(|_| true),
        Command::Curate { common, input } => cmd_curate(common, input.as_deref()).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
