mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Parser, Subcommand};
use sable_core::attention::{Context, MatConfig, MatLite, MatVariant};
use sable_core::bench::{self, BenchConfig, Sweep};
use sable_core::checkpoint;
use sable_core::envs::EnvSpec;
use sable_core::policy::{ActMode, Policy};
use sable_core::sable::{MemoryMode, Sable, SableConfig};
use sable_core::trainer::{self, CsvMetrics, MetricsRow, TrainObserver};
use sable_core::verify::{self, Fault};
use sable_core::SableError;

use config::{Config, ConfigError, MemoryKind, ModelKind};

#[derive(Parser)]
#[command(name = "sable", version, about = "Train, evaluate and benchmark retention policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Report greedy and stochastic returns of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a memory and throughput sweep and write it as CSV.
    Bench {
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle suites.
    Verify {
        /// Suite to run; repeatable. Runs every suite when absent.
        #[arg(long)]
        suite: Vec<String>,
        /// Deliberate defect, currently only `kappa-sign-flip`.
        #[arg(long)]
        inject_fault: Option<String>,
        /// Print suite names and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() || err.is::<ConfigError>() {
        return 2;
    }
    match err.downcast_ref::<SableError>() {
        Some(SableError::Config(_) | SableError::ParamMismatch { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
        } => cmd_eval(&config, &checkpoint, episodes, seed),
        Command::Bench {
            sweep,
            config,
            out,
            seed,
        } => cmd_bench(sweep.as_deref(), config.as_deref(), &out, seed),
        Command::Verify {
            suite,
            inject_fault,
            list,
        } => cmd_verify(&suite, inject_fault.as_deref(), list),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Creates a fresh `<base>/<prefix>-<timestamp>` directory, never reusing one.
fn fresh_dir(base: &Path, prefix: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(base).with_context(|| format!("creating {}", base.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 {
            format!("{prefix}-{stamp}")
        } else {
            format!("{prefix}-{stamp}-{n}")
        };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn sable_config(cfg: &Config, spec: &EnvSpec) -> SableConfig {
    let m = &cfg.model;
    SableConfig {
        d_model: m.d_model,
        n_heads: m.n_heads,
        n_blocks: m.n_blocks,
        kappa_scale: m.kappa_scale,
        action_space: spec.action_space,
        memory_mode: match m.memory {
            MemoryKind::Full => MemoryMode::FullTrajectory,
            MemoryKind::None => MemoryMode::NoMemory,
            MemoryKind::AgentChunked => MemoryMode::AgentChunked(m.chunk_agents),
        },
        obs_dim: spec.obs_dim,
        n_agents: spec.n_agents,
    }
}

fn mat_config(cfg: &Config, spec: &EnvSpec) -> MatConfig {
    let m = &cfg.model;
    MatConfig {
        d_model: m.d_model,
        n_heads: m.n_heads,
        n_blocks: m.n_blocks,
        variant: MatVariant { norm: m.norm, ff: m.ff },
        context: Context::CurrentStep,
        action_space: spec.action_space,
        obs_dim: spec.obs_dim,
        n_agents: spec.n_agents,
    }
}

fn env_spec(cfg: &Config) -> anyhow::Result<EnvSpec> {
    Ok(cfg.env.name.build(&cfg.env.neom)?.spec().clone())
}

struct RunObserver {
    metrics: CsvMetrics<BufWriter<File>>,
    checkpoints: PathBuf,
}

impl<P: Policy> TrainObserver<P> for RunObserver {
    fn on_metrics(&mut self, row: &MetricsRow) -> sable_core::Result<()> {
        self.metrics.write_row(row)?;
        println!(
            "update {:>4}  steps {:>8}  return {:.3} ± {:.3}  loss {:.4}",
            row.update, row.env_steps, row.mean_return, row.std_return, row.loss.total
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, update: usize, policy: &P) -> sable_core::Result<()> {
        checkpoint::save(policy.params(), &self.checkpoints.join(format!("update-{update:05}.ckpt")))
    }
}

fn run_training<P: Policy>(mut policy: P, cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let checkpoints = dir.join("checkpoints");
    fs::create_dir(&checkpoints)?;
    let file = File::create(dir.join("metrics.csv"))?;
    let mut observer = RunObserver {
        metrics: CsvMetrics::new(BufWriter::new(file)),
        checkpoints: checkpoints.clone(),
    };
    let summary = trainer::train(&mut policy, &cfg.env.name, &cfg.env.neom, &cfg.train, &mut observer)?;
    observer.metrics.into_inner().flush()?;
    checkpoint::save(policy.params(), &checkpoints.join("final.ckpt"))?;
    if let Some(r) = summary.final_return() {
        println!("final greedy return {r:.3} after {} env steps", summary.env_steps);
    }
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> anyhow::Result<ExitCode> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let spec = env_spec(&cfg)?;
    let model_seed = cfg.train.seed;
    let dir = fresh_dir(out, "train")?;
    fs::write(dir.join("config.resolved.ini"), cfg.resolved())?;
    println!("writing to {}", dir.display());
    match cfg.model.kind {
        ModelKind::Sable => run_training(Sable::new(sable_config(&cfg, &spec), model_seed)?, &cfg, &dir)?,
        ModelKind::MatLite => run_training(MatLite::new(mat_config(&cfg, &spec), model_seed)?, &cfg, &dir)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn report<P: Policy>(mut policy: P, cfg: &Config, ckpt: &Path, episodes: usize, seed: u64) -> anyhow::Result<()> {
    let stored = checkpoint::load(ckpt)?;
    policy
        .params_mut()
        .load_from(&stored)
        .with_context(|| format!("checkpoint {} does not match the configured model", ckpt.display()))?;
    for (label, mode) in [("greedy", ActMode::Greedy), ("stochastic", ActMode::Sample)] {
        let returns = trainer::evaluate_policy(&policy, &cfg.env.name, &cfg.env.neom, episodes, mode, seed)?;
        let (mean, std) = trainer::mean_std(&returns);
        println!("{label}: {mean:.4} ± {std:.4} over {episodes} episodes");
    }
    Ok(())
}

fn cmd_eval(config: &Path, ckpt: &Path, episodes: usize, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    if episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let cfg = Config::load(config)?;
    let spec = env_spec(&cfg)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    match cfg.model.kind {
        ModelKind::Sable => report(Sable::new(sable_config(&cfg, &spec), 0)?, &cfg, ckpt, episodes, seed)?,
        ModelKind::MatLite => report(MatLite::new(mat_config(&cfg, &spec), 0)?, &cfg, ckpt, episodes, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(sweep: Option<&str>, config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = sweep {
        cfg.bench.sweep = s.parse::<Sweep>()?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let b = &cfg.bench;
    let bc = BenchConfig {
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        n_blocks: cfg.model.n_blocks,
        obs_dim: b.obs_dim,
        n_actions: b.n_actions,
        steps: b.steps,
        agent_chunk: b.agent_chunk,
        max_bytes: b.max_bytes,
        seed: cfg.train.seed,
    };
    let (name, rows) = match b.sweep {
        Sweep::Agents => ("agents", bench::bench_agents(&bc, &bench::default_agent_models(&bc), &b.agents)?),
        Sweep::Chunks => (
            "chunks",
            bench::bench_chunks(&bc, &cfg.env.name, cfg.train.rollout_length, cfg.train.n_envs, &b.chunks)?,
        ),
        Sweep::Context => ("context", bench::bench_context(&bc, b.context_agents, b.context_steps)?),
    };
    let dir = fresh_dir(out, "bench")?;
    fs::write(dir.join("config.resolved.ini"), cfg.resolved())?;
    let path = dir.join(format!("{name}.csv"));
    fs::write(&path, bench::to_csv(&rows))?;
    for r in &rows {
        let tail = match (r.saturated, r.loss) {
            (true, _) => "  saturated".to_string(),
            (false, Some(l)) => format!("  loss {l:.10}"),
            (false, None) => String::new(),
        };
        println!(
            "{:<22} {:>5}  {:>12.1} steps/s  {:>12} bytes{tail}",
            r.model, r.agents_or_chunk, r.steps_per_sec, r.peak_bytes
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suites: &[String], fault: Option<&str>, list: bool) -> anyhow::Result<ExitCode> {
    if list {
        for s in verify::SUITES {
            println!("{s}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let fault = match fault {
        None => Fault::None,
        Some("kappa-sign-flip") => Fault::KappaSignFlip,
        Some(o) => return Err(usage(format!("unknown fault `{o}`, expected kappa-sign-flip"))),
    };
    let names: Vec<&str> = if suites.is_empty() {
        verify::SUITES.to_vec()
    } else {
        suites.iter().map(String::as_str).collect()
    };
    for n in &names {
        if !verify::SUITES.contains(n) {
            return Err(usage(format!("unknown suite `{n}`; known: {}", verify::SUITES.join(", "))));
        }
    }
    let mut failed = Vec::new();
    for n in names {
        let r = verify::run_suite(n, fault)?;
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<24} {:>7.2}s  {}", r.name, r.seconds, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(anyhow!("failed suites: {}", failed.join(", ")))
    }
}
