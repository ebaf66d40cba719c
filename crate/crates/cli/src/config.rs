//! INI-style run configuration with `[model]`, `[train]`, `[env]` and
//! `[bench]` sections. Unknown sections and keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sable_core::attention::{FfKind, NormKind};
use sable_core::bench::Sweep;
use sable_core::envs::{EnvName, NeomOptions};
use sable_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sable,
    MatLite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryKind {
    Full,
    None,
    AgentChunked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub kappa_scale: f64,
    pub memory: MemoryKind,
    pub chunk_agents: usize,
    pub norm: NormKind,
    pub ff: FfKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Sable,
            d_model: 32,
            n_heads: 1,
            n_blocks: 1,
            kappa_scale: 1.0,
            memory: MemoryKind::Full,
            chunk_agents: 32,
            norm: NormKind::Rms,
            ff: FfKind::SwiGlu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSection {
    pub name: EnvName,
    pub neom: NeomOptions,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            name: "neom:half-1-half-0:4".parse().expect("valid env"),
            neom: NeomOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub sweep: Sweep,
    pub agents: Vec<usize>,
    pub chunks: Vec<usize>,
    pub steps: usize,
    pub agent_chunk: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub context_agents: usize,
    pub context_steps: usize,
    pub max_bytes: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            sweep: Sweep::Agents,
            agents: vec![8, 16, 32, 64, 128, 256],
            chunks: vec![8, 16, 32, 64, 128],
            steps: 4,
            agent_chunk: 32,
            obs_dim: 5,
            n_actions: 3,
            context_agents: 8,
            context_steps: 32,
            max_bytes: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub env: EnvSection,
    pub bench: BenchSection,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Model,
    Train,
    Env,
    Bench,
}

fn value<T: FromStr>(raw: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("cannot parse `{raw}`: {e}"))
}

fn flag(raw: &str) -> Result<bool, String> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        o => Err(format!("cannot parse `{o}` as a boolean")),
    }
}

fn list(raw: &str) -> Result<Vec<usize>, String> {
    let items = raw
        .split(',')
        .map(|s| value::<usize>(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(items)
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sable" => Ok(ModelKind::Sable),
            "mat-lite" => Ok(ModelKind::MatLite),
            o => Err(format!("unknown model `{o}`, expected sable or mat-lite")),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Sable => "sable",
            ModelKind::MatLite => "mat-lite",
        })
    }
}

impl FromStr for MemoryKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(MemoryKind::Full),
            "none" => Ok(MemoryKind::None),
            "agent-chunked" => Ok(MemoryKind::AgentChunked),
            o => Err(format!("unknown memory `{o}`, expected full, none or agent-chunked")),
        }
    }
}

impl fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryKind::Full => "full",
            MemoryKind::None => "none",
            MemoryKind::AgentChunked => "agent-chunked",
        })
    }
}

fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::Layer => "layer",
        NormKind::Rms => "rms",
    }
}

fn ff_name(f: FfKind) -> &'static str {
    match f {
        FfKind::Plain => "plain",
        FfKind::SwiGlu => "swiglu",
    }
}

fn sweep_name(s: Sweep) -> &'static str {
    match s {
        Sweep::Agents => "agents",
        Sweep::Chunks => "chunks",
        Sweep::Context => "context",
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: source.clone(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Config::parse(&text, &source)
    }

    pub fn parse(text: &str, source: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        let mut section = None;
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ConfigError {
                source: source.into(),
                line: Some(i + 1),
                message,
            };
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(match name.trim() {
                    "model" => Section::Model,
                    "train" => Section::Train,
                    "env" => Section::Env,
                    "bench" => Section::Bench,
                    o => return Err(err(format!("unknown section [{o}]"))),
                });
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, found `{line}`")));
            };
            let (key, val) = (key.trim(), val.trim());
            let Some(sec) = section else {
                return Err(err(format!("key `{key}` appears before any section")));
            };
            cfg.set(sec, key, val).map_err(err)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: Section, key: &str, v: &str) -> Result<(), String> {
        match section {
            Section::Model => {
                let m = &mut self.model;
                match key {
                    "model" => m.kind = value(v)?,
                    "d_model" => m.d_model = value(v)?,
                    "n_heads" => m.n_heads = value(v)?,
                    "n_blocks" => m.n_blocks = value(v)?,
                    "kappa_scale" => m.kappa_scale = value(v)?,
                    "memory" => m.memory = value(v)?,
                    "chunk_agents" => m.chunk_agents = value(v)?,
                    "norm" => m.norm = value(v)?,
                    "ff" => m.ff = value(v)?,
                    _ => return Err(format!("unknown key `{key}` in [model]")),
                }
            }
            Section::Train => {
                let t = &mut self.train;
                match key {
                    "rollout_length" => t.rollout_length = value(v)?,
                    "updates" => t.updates = value(v)?,
                    "epochs" => t.epochs = value(v)?,
                    "minibatches" => t.minibatches = value(v)?,
                    "gamma" => t.gamma = value(v)?,
                    "gae_lambda" => t.gae_lambda = value(v)?,
                    "clip_eps" => t.clip_eps = value(v)?,
                    "entropy_coef" => t.entropy_coef = value(v)?,
                    "value_coef" => t.value_coef = value(v)?,
                    "max_grad_norm" => t.max_grad_norm = value(v)?,
                    "learning_rate" => t.learning_rate = value(v)?,
                    "normalize_advantage" => t.normalize_advantage = flag(v)?,
                    "n_envs" => t.n_envs = value(v)?,
                    "seed" => t.seed = value(v)?,
                    "time_chunk_steps" => t.time_chunk_steps = value(v)?,
                    "eval_interval" => t.eval_interval = value(v)?,
                    "eval_episodes" => t.eval_episodes = value(v)?,
                    "checkpoint_interval" => t.checkpoint_interval = value(v)?,
                    "timing" => t.timing = flag(v)?,
                    _ => return Err(format!("unknown key `{key}` in [train]")),
                }
            }
            Section::Env => {
                let e = &mut self.env;
                match key {
                    "name" => e.name = value(v)?,
                    "max_episode_steps" => e.neom.max_episode_steps = value(v)?,
                    "history_len" => e.neom.history_len = value(v)?,
                    "max_bonus" => e.neom.max_bonus = value(v)?,
                    "terminate_on_success" => e.neom.terminate_on_success = flag(v)?,
                    _ => return Err(format!("unknown key `{key}` in [env]")),
                }
            }
            Section::Bench => {
                let b = &mut self.bench;
                match key {
                    "sweep" => b.sweep = value(v)?,
                    "agents" => b.agents = list(v)?,
                    "chunks" => b.chunks = list(v)?,
                    "steps" => b.steps = value(v)?,
                    "agent_chunk" => b.agent_chunk = value(v)?,
                    "obs_dim" => b.obs_dim = value(v)?,
                    "n_actions" => b.n_actions = value(v)?,
                    "context_agents" => b.context_agents = value(v)?,
                    "context_steps" => b.context_steps = value(v)?,
                    "max_bytes" => b.max_bytes = value(v)?,
                    _ => return Err(format!("unknown key `{key}` in [bench]")),
                }
            }
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`Config::parse`] reads back.
    pub fn resolved(&self) -> String {
        let (m, t, e, b) = (&self.model, &self.train, &self.env, &self.bench);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("[model]\nmodel", m.kind.to_string());
        put("d_model", m.d_model.to_string());
        put("n_heads", m.n_heads.to_string());
        put("n_blocks", m.n_blocks.to_string());
        put("kappa_scale", format!("{:?}", m.kappa_scale));
        put("memory", m.memory.to_string());
        put("chunk_agents", m.chunk_agents.to_string());
        put("norm", norm_name(m.norm).into());
        put("ff", ff_name(m.ff).into());
        put("\n[train]\nrollout_length", t.rollout_length.to_string());
        put("updates", t.updates.to_string());
        put("epochs", t.epochs.to_string());
        put("minibatches", t.minibatches.to_string());
        put("gamma", format!("{:?}", t.gamma));
        put("gae_lambda", format!("{:?}", t.gae_lambda));
        put("clip_eps", format!("{:?}", t.clip_eps));
        put("entropy_coef", format!("{:?}", t.entropy_coef));
        put("value_coef", format!("{:?}", t.value_coef));
        put("max_grad_norm", format!("{:?}", t.max_grad_norm));
        put("learning_rate", format!("{:?}", t.learning_rate));
        put("normalize_advantage", t.normalize_advantage.to_string());
        put("n_envs", t.n_envs.to_string());
        put("seed", t.seed.to_string());
        put("time_chunk_steps", t.time_chunk_steps.to_string());
        put("eval_interval", t.eval_interval.to_string());
        put("eval_episodes", t.eval_episodes.to_string());
        put("checkpoint_interval", t.checkpoint_interval.to_string());
        put("timing", t.timing.to_string());
        put("\n[env]\nname", e.name.to_string());
        put("max_episode_steps", e.neom.max_episode_steps.to_string());
        put("history_len", e.neom.history_len.to_string());
        put("max_bonus", format!("{:?}", e.neom.max_bonus));
        put("terminate_on_success", e.neom.terminate_on_success.to_string());
        put("\n[bench]\nsweep", sweep_name(b.sweep).into());
        put("agents", join(&b.agents));
        put("chunks", join(&b.chunks));
        put("steps", b.steps.to_string());
        put("agent_chunk", b.agent_chunk.to_string());
        put("obs_dim", b.obs_dim.to_string());
        put("n_actions", b.n_actions.to_string());
        put("context_agents", b.context_agents.to_string());
        put("context_steps", b.context_steps.to_string());
        put("max_bytes", b.max_bytes.to_string());
        out
    }
}
