//! Cooperative shared-reward environments.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SableError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Number of scalars stored per agent action.
    pub fn width(&self) -> usize {
        match *self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous(d) => d,
        }
    }

    /// Width of the decoder's action input.
    pub fn embed_width(&self) -> usize {
        match *self {
            ActionSpace::Discrete(k) | ActionSpace::Continuous(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub max_episode_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Tensor,
    pub reward: f64,
    pub done: bool,
}

/// A fully cooperative environment: per-agent observations and actions, one
/// shared reward. Discrete actions are passed as their index.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Tensor;
    fn step(&mut self, actions: &[f64]) -> Result<StepOutcome>;
}

fn discrete_index(a: f64, k: usize) -> Result<usize> {
    if a.fract() != 0.0 || a < 0.0 || a >= k as f64 {
        return Err(SableError::contract(format!("action {a} outside 0..{k}")));
    }
    Ok(a as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    SimpleSine,
    HalfOneHalfZero,
    QuickFlip,
}

impl Pattern {
    pub fn values(self) -> &'static [f64] {
        match self {
            Pattern::SimpleSine => &[0.5, 0.7, 0.8, 0.7, 0.5, 0.3, 0.2, 0.3],
            Pattern::HalfOneHalfZero => &[1.0, 0.0],
            Pattern::QuickFlip => &[0.5, 0.0, -0.5, 0.0],
        }
    }

    /// Distinct pattern values in ascending order.
    pub fn action_set(self) -> Vec<f64> {
        let mut v = self.values().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

impl FromStr for Pattern {
    type Err = SableError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple-sine" => Ok(Pattern::SimpleSine),
            "half-1-half-0" => Ok(Pattern::HalfOneHalfZero),
            "quick-flip" => Ok(Pattern::QuickFlip),
            other => Err(SableError::Config(format!("unknown neom pattern `{other}`"))),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::SimpleSine => "simple-sine",
            Pattern::HalfOneHalfZero => "half-1-half-0",
            Pattern::QuickFlip => "quick-flip",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeomOptions {
    pub max_episode_steps: usize,
    pub history_len: usize,
    pub max_bonus: f64,
    pub terminate_on_success: bool,
}

impl Default for NeomOptions {
    fn default() -> Self {
        NeomOptions {
            max_episode_steps: 32,
            history_len: 4,
            max_bonus: 9.0,
            terminate_on_success: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeomState {
    pub pattern: Pattern,
    pub target: Vec<f64>,
    pub current: Vec<f64>,
    /// Per agent, most recent action first.
    pub prev_actions: Vec<Vec<f64>>,
    pub step: usize,
}

/// Agents pick positions from the pattern's value set and are rewarded for
/// reproducing the pattern tiled across the team.
#[derive(Debug, Clone)]
pub struct Neom {
    spec: EnvSpec,
    opts: NeomOptions,
    actions: Vec<f64>,
    state: NeomState,
}

impl Neom {
    pub fn new(pattern: Pattern, n_agents: usize, opts: NeomOptions) -> Result<Self> {
        if n_agents == 0 || opts.max_episode_steps == 0 {
            return Err(SableError::Config("neom needs agents and a positive horizon".into()));
        }
        let actions = pattern.action_set();
        let values = pattern.values();
        let target: Vec<f64> = (0..n_agents).map(|i| values[i % values.len()]).collect();
        let spec = EnvSpec {
            n_agents,
            obs_dim: 1 + opts.history_len,
            action_space: ActionSpace::Discrete(actions.len()),
            max_episode_steps: opts.max_episode_steps,
        };
        let state = NeomState {
            pattern,
            current: target.clone(),
            prev_actions: vec![vec![0.0; opts.history_len]; n_agents],
            target,
            step: 0,
        };
        Ok(Neom { spec, opts, actions, state })
    }

    pub fn state(&self) -> &NeomState {
        &self.state
    }

    pub fn action_values(&self) -> &[f64] {
        &self.actions
    }

    fn max_distance(&self) -> f64 {
        self.actions[self.actions.len() - 1] - self.actions[0]
    }

    fn observe(&self) -> Tensor {
        let s = &self.state;
        let width = self.spec.obs_dim;
        Tensor::from_fn(self.spec.n_agents, width, |i, c| {
            if c == 0 {
                f64::from(u8::from(s.current[i] == s.target[i]))
            } else {
                s.prev_actions[i][c - 1]
            }
        })
    }

    /// Steps with raw position values, each of which must belong to the
    /// pattern's action set.
    pub fn step_values(&mut self, values: &[f64]) -> Result<StepOutcome> {
        if values.len() != self.spec.n_agents {
            return Err(SableError::contract(format!(
                "{} actions for {} agents",
                values.len(),
                self.spec.n_agents
            )));
        }
        if let Some(bad) = values.iter().find(|v| !self.actions.contains(v)) {
            return Err(SableError::contract(format!(
                "action {bad} not in {} action set {:?}",
                self.state.pattern, self.actions
            )));
        }
        let n = self.spec.n_agents as f64;
        let max_d = self.max_distance();
        let s = &mut self.state;
        s.current.copy_from_slice(values);
        for (hist, &a) in s.prev_actions.iter_mut().zip(values) {
            hist.rotate_right(1);
            if let Some(first) = hist.first_mut() {
                *first = a;
            }
        }
        let dist: f64 = s.current.iter().zip(&s.target).map(|(c, t)| (c - t).abs()).sum::<f64>() / n;
        let mut reward = 1.0 - 2.0 * dist / max_d;
        let solved = s.current == s.target;
        if solved {
            reward += self.opts.max_bonus * (1.0 - s.step as f64 / self.opts.max_episode_steps as f64);
        }
        s.step += 1;
        let done = s.step >= self.opts.max_episode_steps || (solved && self.opts.terminate_on_success);
        Ok(StepOutcome {
            observations: self.observe(),
            reward,
            done,
        })
    }
}

impl Environment for Neom {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.actions.len();
        let current: Vec<f64> = (0..self.spec.n_agents)
            .map(|_| self.actions[rng.random_range(0..k)])
            .collect();
        self.state.prev_actions = current.iter().map(|&c| vec![c; self.opts.history_len]).collect();
        self.state.current = current;
        self.state.step = 0;
        self.observe()
    }

    fn step(&mut self, actions: &[f64]) -> Result<StepOutcome> {
        let k = self.actions.len();
        let values = actions
            .iter()
            .map(|&a| discrete_index(a, k).map(|i| self.actions[i]))
            .collect::<Result<Vec<_>>>()?;
        self.step_values(&values)
    }
}

/// Two agents, two actions, horizon 2; reward 1 on each step where both
/// agents pick `bit`. Observations carry the step index.
#[derive(Debug, Clone)]
pub struct UnitEnv {
    spec: EnvSpec,
    bit: usize,
    step: usize,
}

impl UnitEnv {
    pub const HORIZON: usize = 2;

    pub fn new(bit: usize) -> Self {
        UnitEnv {
            spec: EnvSpec {
                n_agents: 2,
                obs_dim: 1,
                action_space: ActionSpace::Discrete(2),
                max_episode_steps: Self::HORIZON,
            },
            bit: bit & 1,
            step: 0,
        }
    }

    fn observe(&self) -> Tensor {
        Tensor::full(&[2, 1], self.step as f64)
    }
}

impl Environment for UnitEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Tensor {
        self.step = 0;
        self.observe()
    }

    fn step(&mut self, actions: &[f64]) -> Result<StepOutcome> {
        if actions.len() != 2 {
            return Err(SableError::contract(format!("{} actions for 2 agents", actions.len())));
        }
        let a0 = discrete_index(actions[0], 2)?;
        let a1 = discrete_index(actions[1], 2)?;
        let reward = if a0 == self.bit && a1 == self.bit { 1.0 } else { 0.0 };
        self.step += 1;
        Ok(StepOutcome {
            observations: self.observe(),
            reward,
            done: self.step >= Self::HORIZON,
        })
    }
}

/// Environment named by `neom:<pattern>:<agents>` or `unit`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvName {
    Neom { pattern: Pattern, n_agents: usize },
    Unit,
}

impl FromStr for EnvName {
    type Err = SableError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "unit" {
            return Ok(EnvName::Unit);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["neom", pattern, n] => {
                let n_agents: usize = n
                    .parse()
                    .map_err(|_| SableError::Config(format!("bad agent count `{n}` in env `{s}`")))?;
                if n_agents == 0 {
                    return Err(SableError::Config(format!("env `{s}` needs at least one agent")));
                }
                Ok(EnvName::Neom {
                    pattern: pattern.parse()?,
                    n_agents,
                })
            }
            _ => Err(SableError::Config(format!(
                "unknown env `{s}`, expected neom:<pattern>:<agents> or unit"
            ))),
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvName::Neom { pattern, n_agents } => write!(f, "neom:{pattern}:{n_agents}"),
            EnvName::Unit => f.write_str("unit"),
        }
    }
}

impl EnvName {
    pub fn build(&self, opts: &NeomOptions) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvName::Neom { pattern, n_agents } => Box::new(Neom::new(*pattern, *n_agents, opts.clone())?),
            EnvName::Unit => Box::new(UnitEnv::new(1)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn observation_width_and_seeded_reset() {
        let mut a = Neom::new(Pattern::QuickFlip, 5, NeomOptions::default()).unwrap();
        let mut b = a.clone();
        let oa = a.reset(11);
        assert_eq!(oa.shape(), &[5, 5]);
        assert_eq!(oa, b.reset(11));
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn simple_sine_tiles_once_for_eight_agents() {
        let env = Neom::new(Pattern::SimpleSine, 8, NeomOptions::default()).unwrap();
        assert_eq!(env.state().target, vec![0.5, 0.7, 0.8, 0.7, 0.5, 0.3, 0.2, 0.3]);
        assert_eq!(env.action_values(), &[0.2, 0.3, 0.5, 0.7, 0.8]);
    }

    #[test]
    fn perfect_first_step_earns_full_bonus() {
        let mut env = Neom::new(Pattern::SimpleSine, 8, NeomOptions::default()).unwrap();
        env.reset(0);
        let target = env.state().target.clone();
        let out = env.step_values(&target).unwrap();
        assert_eq!(out.reward, 10.0);
        assert!(!out.done);
    }

    #[test]
    fn maximally_wrong_is_minus_one() {
        let mut env = Neom::new(Pattern::HalfOneHalfZero, 4, NeomOptions::default()).unwrap();
        env.reset(0);
        assert_eq!(env.step_values(&[0.0, 1.0, 0.0, 1.0]).unwrap().reward, -1.0);
    }

    #[test]
    fn success_terminates_when_enabled() {
        let opts = NeomOptions {
            terminate_on_success: true,
            ..NeomOptions::default()
        };
        let mut env = Neom::new(Pattern::HalfOneHalfZero, 2, opts).unwrap();
        env.reset(3);
        let out = env.step_values(&[1.0, 0.0]).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 10.0);
    }

    #[test]
    fn out_of_set_actions_rejected() {
        let mut env = Neom::new(Pattern::QuickFlip, 2, NeomOptions::default()).unwrap();
        env.reset(0);
        assert!(matches!(env.step_values(&[0.25, 0.0]), Err(SableError::Contract(_))));
        assert!(matches!(env.step(&[3.0, 0.0]), Err(SableError::Contract(_))));
        assert!(matches!(env.step(&[0.5, 0.0]), Err(SableError::Contract(_))));
    }

    #[test]
    fn horizon_ends_episode() {
        let mut env = Neom::new(Pattern::QuickFlip, 3, NeomOptions::default()).unwrap();
        env.reset(1);
        for s in 0..32 {
            let out = env.step(&[0.0, 1.0, 2.0]).unwrap();
            assert_eq!(out.done, s == 31);
        }
    }

    #[test]
    fn unit_env_brute_force_optimum_and_random_mean() {
        let mut best = f64::MIN;
        let mut total = 0.0;
        for joint in 0..16u32 {
            let mut env = UnitEnv::new(1);
            env.reset(0);
            let mut ret = 0.0;
            for s in 0..2 {
                let a0 = f64::from((joint >> (2 * s)) & 1);
                let a1 = f64::from((joint >> (2 * s + 1)) & 1);
                ret += env.step(&[a0, a1]).unwrap().reward;
            }
            best = best.max(ret);
            total += ret;
        }
        assert_eq!(best, 2.0);
        assert_eq!(total / 16.0, 0.5);
    }

    #[test]
    fn env_names_parse_and_print() {
        for name in ["neom:simple-sine:8", "neom:half-1-half-0:4", "neom:quick-flip:16", "unit"] {
            let parsed: EnvName = name.parse().unwrap();
            assert_eq!(parsed.to_string(), name);
        }
        assert!("neom:zigzag:4".parse::<EnvName>().is_err());
        assert!("neom:quick-flip:0".parse::<EnvName>().is_err());
        assert!("gridworld".parse::<EnvName>().is_err());
    }

    proptest! {
        #[test]
        fn reward_bounded_and_monotone_in_correct_count(
            pattern in prop::sample::select(vec![Pattern::SimpleSine, Pattern::HalfOneHalfZero, Pattern::QuickFlip]),
            n in 1usize..12,
            seed in 0u64..1000,
            picks in prop::collection::vec(0usize..5, 12),
        ) {
            let mut env = Neom::new(pattern, n, NeomOptions::default()).unwrap();
            env.reset(seed);
            let set = env.action_values().to_vec();
            let acts: Vec<f64> = picks[..n].iter().map(|&p| (p % set.len()) as f64).collect();
            let r = env.clone().step(&acts).unwrap().reward;
            prop_assert!((-1.0..=10.0).contains(&r));
            // fixing one wrong agent never lowers the reward
            let target = env.state().target.clone();
            if let Some(i) = (0..n).find(|&i| set[acts[i] as usize] != target[i]) {
                let mut better = acts.clone();
                better[i] = set.iter().position(|&v| v == target[i]).unwrap() as f64;
                let r2 = env.clone().step(&better).unwrap().reward;
                prop_assert!(r2 >= r);
            }
        }
    }
}
