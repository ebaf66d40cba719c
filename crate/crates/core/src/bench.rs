//! Throughput and memory sweeps over synthetic inputs.
//!
//! Environment stepping is excluded: observations are random and actions
//! are discarded, so each row measures pure model cost.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{ablation_variants, Context, MatConfig, MatLite, MatVariant};
use crate::envs::{ActionSpace, EnvName, NeomOptions};
use crate::error::{Result, SableError};
use crate::params::normal_init;
use crate::policy::{ActMode, Policy};
use crate::sable::{MemoryMode, Sable, SableConfig};
use crate::tensor::{AllocationMeter, Graph};
use crate::trainer::{collect_rollout, make_slots, minibatch_loss, TrainConfig};

pub const BENCH_HEADER: &str = "model,agents_or_chunk,steps_per_sec,peak_bytes";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchModel {
    Retention(MemoryMode),
    Attention(MatVariant),
}

impl fmt::Display for BenchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchModel::Retention(MemoryMode::FullTrajectory) => write!(f, "sable"),
            BenchModel::Retention(MemoryMode::NoMemory) => write!(f, "sable-no-memory"),
            BenchModel::Retention(MemoryMode::AgentChunked(c)) => write!(f, "sable-chunked-{c}"),
            BenchModel::Attention(v) => write!(f, "mat-lite-{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Agents,
    Chunks,
    Context,
}

impl FromStr for Sweep {
    type Err = SableError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agents" => Ok(Sweep::Agents),
            "chunks" => Ok(Sweep::Chunks),
            "context" => Ok(Sweep::Context),
            o => Err(SableError::Config(format!("unknown sweep `{o}`, expected agents, chunks or context"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub steps: usize,
    pub agent_chunk: usize,
    pub max_bytes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d_model: 32,
            n_heads: 1,
            n_blocks: 1,
            obs_dim: 5,
            n_actions: 3,
            steps: 4,
            agent_chunk: 32,
            max_bytes: 2 << 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub agents_or_chunk: usize,
    pub steps_per_sec: f64,
    pub peak_bytes: usize,
    pub saturated: bool,
    pub loss: Option<f64>,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.model, self.agents_or_chunk, self.steps_per_sec, self.peak_bytes)
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn sable_for(cfg: &BenchConfig, n_agents: usize, mode: MemoryMode) -> Result<Sable> {
    Sable::new(
        SableConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_blocks: cfg.n_blocks,
            kappa_scale: 1.0,
            action_space: ActionSpace::Discrete(cfg.n_actions),
            memory_mode: mode,
            obs_dim: cfg.obs_dim,
            n_agents,
        },
        cfg.seed,
    )
}

fn mat_for(cfg: &BenchConfig, n_agents: usize, variant: MatVariant, context: Context) -> Result<MatLite> {
    MatLite::new(
        MatConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_blocks: cfg.n_blocks,
            variant,
            context,
            action_space: ActionSpace::Discrete(cfg.n_actions),
            obs_dim: cfg.obs_dim,
            n_agents,
        },
        cfg.seed,
    )
}

/// Runs `steps` execution steps on random observations. Returns
/// (steps/sec, peak bytes, saturated).
fn run_steps<P: Policy>(policy: &P, cfg: &BenchConfig, n_agents: usize) -> Result<(f64, usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let obs: Vec<_> = (0..cfg.steps).map(|_| normal_init(&mut rng, n_agents, cfg.obs_dim, 1.0)).collect();
    let mut state = policy.initial_state();
    let mut peak = 0;
    let mut done_steps = 0;
    let mut saturated = false;
    let start = Instant::now();
    for (t, o) in obs.iter().enumerate() {
        let (res, bytes) = AllocationMeter::measure(|| {
            let out = policy.act(o, t, &mut state, ActMode::Sample, &mut rng);
            policy.end_step(&mut state, false);
            out
        });
        res?;
        peak = peak.max(bytes + policy.state_bytes(&state));
        done_steps += 1;
        if peak > cfg.max_bytes {
            saturated = true;
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let sps = if secs > 0.0 { done_steps as f64 / secs } else { 0.0 };
    Ok((if saturated { 0.0 } else { sps }, peak, saturated))
}

fn agent_row(cfg: &BenchConfig, model: BenchModel, n: usize) -> Result<BenchRow> {
    let (sps, peak, saturated) = match model {
        BenchModel::Retention(mode) => {
            let mode = match mode {
                MemoryMode::AgentChunked(c) => MemoryMode::AgentChunked(c.min(n)),
                m => m,
            };
            run_steps(&sable_for(cfg, n, mode)?, cfg, n)?
        }
        BenchModel::Attention(v) => run_steps(&mat_for(cfg, n, v, Context::CurrentStep)?, cfg, n)?,
    };
    Ok(BenchRow {
        model: model.to_string(),
        agents_or_chunk: n,
        steps_per_sec: sps,
        peak_bytes: peak,
        saturated,
        loss: None,
    })
}

/// Models compared in the agent sweep: full-memory retention, retention
/// chunked over agents, and the attention baseline.
pub fn default_agent_models(cfg: &BenchConfig) -> Vec<BenchModel> {
    vec![
        BenchModel::Retention(MemoryMode::FullTrajectory),
        BenchModel::Retention(MemoryMode::AgentChunked(cfg.agent_chunk)),
        BenchModel::Attention(ablation_variants()[0]),
    ]
}

/// One row per (model, agent count). Chunk sizes larger than the agent
/// count are clamped to it.
pub fn bench_agents(cfg: &BenchConfig, models: &[BenchModel], agent_counts: &[usize]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &m in models {
        for &n in agent_counts {
            rows.push(agent_row(cfg, m, n)?);
        }
    }
    Ok(rows)
}

/// Training-loss memory for each time chunk size on one fixed rollout.
/// `loss` is filled on every row.
pub fn bench_chunks(
    cfg: &BenchConfig,
    env: &EnvName,
    rollout_length: usize,
    n_envs: usize,
    chunks: &[usize],
) -> Result<Vec<BenchRow>> {
    let opts = NeomOptions::default();
    let spec = env.build(&opts)?.spec().clone();
    let net = Sable::new(
        SableConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_blocks: cfg.n_blocks,
            kappa_scale: 1.0,
            action_space: spec.action_space,
            memory_mode: MemoryMode::FullTrajectory,
            obs_dim: spec.obs_dim,
            n_agents: spec.n_agents,
        },
        cfg.seed,
    )?;
    let tc = TrainConfig {
        rollout_length,
        n_envs,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut slots = make_slots(&net, env, &opts, &tc)?;
    let mut rollout = collect_rollout(&net, &mut slots, rollout_length)?;
    for s in &mut rollout.slots {
        s.compute_advantages(tc.gamma, tc.gae_lambda);
    }
    let group: Vec<_> = rollout.slots.iter().collect();
    let perm: Vec<usize> = (0..spec.n_agents).collect();
    let mut rows = Vec::new();
    for &c in chunks {
        if c == 0 || !rollout_length.is_multiple_of(c) {
            return Err(SableError::Config(format!("chunk {c} must divide rollout length {rollout_length}")));
        }
        let tc = TrainConfig {
            time_chunk_steps: c,
            ..tc.clone()
        };
        let start = Instant::now();
        let (res, peak) = AllocationMeter::measure(|| -> Result<f64> {
            let mut g = Graph::new();
            let (loss, b) = minibatch_loss(&mut g, &net, &group, &perm, &tc)?;
            g.backward(loss)?;
            Ok(b.total)
        });
        let loss = res?;
        let secs = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            model: "sable".into(),
            agents_or_chunk: c,
            steps_per_sec: if secs > 0.0 { rollout.env_steps() as f64 / secs } else { 0.0 },
            peak_bytes: peak,
            saturated: false,
            loss: Some(loss),
        });
    }
    Ok(rows)
}

/// Stored inference context after each of `steps` steps for retention and
/// for episode-context attention. `peak_bytes` holds the state size.
pub fn bench_context(cfg: &BenchConfig, n_agents: usize, steps: usize) -> Result<Vec<BenchRow>> {
    let sable = sable_for(cfg, n_agents, MemoryMode::FullTrajectory)?;
    let mat = mat_for(cfg, n_agents, ablation_variants()[0], Context::Episode)?;
    let mut rows = context_rows(&sable, "sable", cfg, n_agents, steps)?;
    rows.extend(context_rows(&mat, "mat-lite-episode", cfg, n_agents, steps)?);
    Ok(rows)
}

fn context_rows<P: Policy>(policy: &P, name: &str, cfg: &BenchConfig, n: usize, steps: usize) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = policy.initial_state();
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let o = normal_init(&mut rng, n, cfg.obs_dim, 1.0);
        let start = Instant::now();
        policy.act(&o, t, &mut state, ActMode::Sample, &mut rng)?;
        policy.end_step(&mut state, false);
        let secs = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            model: name.into(),
            agents_or_chunk: t + 1,
            steps_per_sec: if secs > 0.0 { 1.0 / secs } else { 0.0 },
            peak_bytes: policy.state_bytes(&state),
            saturated: false,
            loss: None,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((log_log_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn agent_sweep_has_one_row_per_count() {
        let cfg = BenchConfig {
            d_model: 8,
            steps: 2,
            ..BenchConfig::default()
        };
        let models = default_agent_models(&cfg);
        let rows = bench_agents(&cfg, &models, &[2, 4]).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.peak_bytes > 0 && r.steps_per_sec.is_finite()));
        assert_eq!(to_csv(&rows).lines().next(), Some(BENCH_HEADER));
    }

    #[test]
    fn retention_context_is_constant() {
        let cfg = BenchConfig {
            d_model: 8,
            ..BenchConfig::default()
        };
        let rows = bench_context(&cfg, 3, 5).unwrap();
        let sable: Vec<usize> = rows.iter().filter(|r| r.model == "sable").map(|r| r.peak_bytes).collect();
        let mat: Vec<usize> = rows.iter().filter(|r| r.model != "sable").map(|r| r.peak_bytes).collect();
        assert!(sable.windows(2).all(|w| w[0] == w[1]));
        assert!(mat.windows(2).all(|w| w[1] > w[0]));
    }
}
