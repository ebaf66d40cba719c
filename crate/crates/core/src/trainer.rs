//! On-policy training: vectorized rollouts with carried hidden states,
//! generalized advantage estimation, and clipped-PPO updates over agent
//! shuffled minibatches of environment slots.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{ActionSpace, EnvName, Environment, NeomOptions};
use crate::error::{Result, SableError};
use crate::params::Adam;
use crate::policy::{permutation_rows, ActMode, Policy, Trajectory};
use crate::tensor::{AllocationMeter, Graph, Tensor, Var};

pub const METRICS_HEADER: &str =
    "update,env_steps,mean_return,std_return,steps_per_sec,peak_bytes,loss_total,loss_ppo,loss_value,entropy";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rollout_length: usize,
    pub updates: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub normalize_advantage: bool,
    pub n_envs: usize,
    pub seed: u64,
    pub time_chunk_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub checkpoint_interval: usize,
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rollout_length: 128,
            updates: 300,
            epochs: 2,
            minibatches: 1,
            gamma: 0.99,
            gae_lambda: 0.9,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            learning_rate: 5e-4,
            normalize_advantage: true,
            n_envs: 4,
            seed: 0,
            time_chunk_steps: 128,
            eval_interval: 10,
            eval_episodes: 32,
            checkpoint_interval: 0,
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rollout_length", self.rollout_length),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("n_envs", self.n_envs),
            ("time_chunk_steps", self.time_chunk_steps),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SableError::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_envs.is_multiple_of(self.minibatches) {
            return Err(SableError::Config(format!(
                "minibatches {} must divide n_envs {}",
                self.minibatches, self.n_envs
            )));
        }
        let coefs = [
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("clip_eps", self.clip_eps),
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in coefs {
            if !v.is_finite() || v < 0.0 {
                return Err(SableError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Number of worker threads for `work` independent items, capped by
/// `SABLE_THREADS` when set.
pub fn thread_count(work: usize) -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("SABLE_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(avail);
    cap.min(work).max(1)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// GAE over one scalar stream. `dones[t]` marks that step `t` ended its
/// episode, so nothing after it is bootstrapped into it.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let l = rewards.len();
    let mut adv = vec![0.0; l];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..l).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * cont - values[t];
        next_adv = delta + gamma * lambda * cont * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Negative mean clipped surrogate.
pub fn ppo_loss(g: &mut Graph, log_probs: Var, old_log_probs: Var, advantages: Var, clip_eps: f64) -> Result<Var> {
    let diff = g.sub(log_probs, old_log_probs)?;
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, advantages)?;
    let clipped = g.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let s2 = g.mul(clipped, advantages)?;
    let m = g.minimum(s1, s2)?;
    let mean = g.mean(m);
    Ok(g.scale(mean, -1.0))
}

/// `coef · mean((values − targets)²)`.
pub fn value_loss(g: &mut Graph, values: Var, targets: Var, coef: f64) -> Result<Var> {
    let d = g.sub(values, targets)?;
    let sq = g.square(d);
    let mean = g.mean(sq);
    Ok(g.scale(mean, coef))
}

/// Rescales to zero mean and unit standard deviation.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    xs.iter().map(|x| (x - mean) / std).collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One environment slot's share of a rollout.
#[derive(Debug, Clone)]
pub struct SlotRollout<S> {
    pub traj: Trajectory,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub bootstrap: Vec<f64>,
    pub boundary: S,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
    pub finished_returns: Vec<f64>,
}

impl<S> SlotRollout<S> {
    /// Fills advantages and targets, one GAE stream per agent.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let n = self.traj.n_agents;
        let l = self.traj.n_steps();
        self.advantages = vec![0.0; l * n];
        self.targets = vec![0.0; l * n];
        for a in 0..n {
            let vals: Vec<f64> = (0..l).map(|t| self.values[t * n + a]).collect();
            let (adv, tgt) = compute_gae(&self.rewards, &vals, &self.traj.dones, self.bootstrap[a], gamma, lambda);
            for t in 0..l {
                self.advantages[t * n + a] = adv[t];
                self.targets[t * n + a] = tgt[t];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rollout<S> {
    pub slots: Vec<SlotRollout<S>>,
}

impl<S> Rollout<S> {
    pub fn env_steps(&self) -> usize {
        self.slots.iter().map(|s| s.traj.n_steps()).sum()
    }
}

/// A live environment slot with its carried policy state.
pub struct Slot<S> {
    env: Box<dyn Environment>,
    state: S,
    obs: Tensor,
    timestep: usize,
    episode: u64,
    episode_return: f64,
    rng: ChaCha8Rng,
    seed: u64,
    index: usize,
}

impl<S: Clone> Slot<S> {
    pub fn new(mut env: Box<dyn Environment>, state: S, seed: u64, index: usize) -> Self {
        let obs = env.reset(mix_seed(seed, index as u64, 0));
        Slot {
            env,
            state,
            obs,
            timestep: 0,
            episode: 0,
            episode_return: 0.0,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64, u64::MAX)),
            seed,
            index,
        }
    }

    pub fn state(&self) -> &S {
        &self.state
    }

    fn collect<P: Policy<State = S>>(&mut self, policy: &P, length: usize) -> Result<SlotRollout<S>> {
        let n = policy.n_agents();
        let width = policy.action_space().width();
        let boundary = self.state.clone();
        let obs_dim = self.obs.cols();
        let mut obs = Vec::with_capacity(length * n * obs_dim);
        let mut actions = Vec::with_capacity(length * n * width);
        let mut timesteps = Vec::with_capacity(length);
        let mut dones = Vec::with_capacity(length);
        let mut rewards = Vec::with_capacity(length);
        let mut log_probs = Vec::with_capacity(length * n);
        let mut values = Vec::with_capacity(length * n);
        let mut finished = Vec::new();
        let env_err = |slot: usize, e: SableError| SableError::Environment {
            slot,
            detail: e.to_string(),
        };
        for _ in 0..length {
            let out = policy.act(&self.obs, self.timestep, &mut self.state, ActMode::Sample, &mut self.rng)?;
            let step = self.env.step(&out.actions).map_err(|e| env_err(self.index, e))?;
            obs.extend_from_slice(self.obs.data());
            actions.extend_from_slice(&out.actions);
            timesteps.push(self.timestep);
            dones.push(step.done);
            rewards.push(step.reward);
            log_probs.extend(out.log_probs);
            values.extend(out.values);
            self.episode_return += step.reward;
            policy.end_step(&mut self.state, step.done);
            if step.done {
                finished.push(self.episode_return);
                self.episode_return = 0.0;
                self.episode += 1;
                self.timestep = 0;
                self.obs = self.env.reset(mix_seed(self.seed, self.index as u64, self.episode));
            } else {
                self.timestep += 1;
                self.obs = step.observations;
            }
        }
        let bootstrap = policy.peek_values(&self.obs, self.timestep, &self.state)?;
        Ok(SlotRollout {
            traj: Trajectory {
                n_agents: n,
                obs: Tensor::new(&[length * n, obs_dim], obs)?,
                actions: Tensor::new(&[length * n, width], actions)?,
                timesteps,
                dones,
            },
            rewards,
            log_probs,
            values,
            bootstrap,
            boundary,
            advantages: Vec::new(),
            targets: Vec::new(),
            finished_returns: finished,
        })
    }
}

/// Steps every slot for `length` steps, in parallel when threads allow.
pub fn collect_rollout<P: Policy>(policy: &P, slots: &mut [Slot<P::State>], length: usize) -> Result<Rollout<P::State>> {
    let threads = thread_count(slots.len());
    let results: Vec<Result<SlotRollout<P::State>>> = if threads <= 1 {
        slots.iter_mut().map(|s| s.collect(policy, length)).collect()
    } else {
        let per = slots.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = slots
                .chunks_mut(per)
                .map(|chunk| scope.spawn(move || chunk.iter_mut().map(|s| s.collect(policy, length)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("rollout worker panicked"))
                .collect()
        })
    };
    Ok(Rollout {
        slots: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Loss terms of one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ppo: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
}

/// Builds the combined loss for a set of slots under an agent order.
/// Returns the loss variable and its breakdown.
pub fn minibatch_loss<P: Policy>(
    g: &mut Graph,
    policy: &P,
    slots: &[&SlotRollout<P::State>],
    perm: &[usize],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let (mut lps, mut ents, mut vals) = (Vec::new(), Vec::new(), Vec::new());
    let (mut old, mut adv, mut tgt) = (Vec::new(), Vec::new(), Vec::new());
    for s in slots {
        let n = s.traj.n_agents;
        let order = permutation_rows(perm, n, s.traj.n_steps())?;
        let traj = s.traj.permuted(perm)?;
        let eval = policy.evaluate(g, &traj, &s.boundary, cfg.time_chunk_steps)?;
        lps.push(eval.log_probs);
        ents.push(eval.entropy);
        vals.push(eval.values);
        old.extend(order.iter().map(|&r| s.log_probs[r]));
        adv.extend(order.iter().map(|&r| s.advantages[r]));
        tgt.extend(order.iter().map(|&r| s.targets[r]));
    }
    if cfg.normalize_advantage {
        adv = normalize(&adv);
    }
    let cat = |g: &mut Graph, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat_rows(v) };
    let lp = cat(g, &lps)?;
    let ent = cat(g, &ents)?;
    let val = cat(g, &vals)?;
    let old_v = g.constant(Tensor::column(old));
    let adv_v = g.constant(Tensor::column(adv));
    let tgt_v = g.constant(Tensor::column(tgt));
    let ratio_diff = g.sub(lp, old_v)?;
    let mean_ratio = g.value(ratio_diff).data().iter().map(|d| d.exp()).sum::<f64>() / g.value(ratio_diff).len() as f64;
    let ppo = ppo_loss(g, lp, old_v, adv_v, cfg.clip_eps)?;
    let vl = value_loss(g, val, tgt_v, cfg.value_coef)?;
    let ent_mean = g.mean(ent);
    let bonus = g.scale(ent_mean, -cfg.entropy_coef);
    let total = g.add(ppo, vl)?;
    let total = g.add(total, bonus)?;
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        ppo: g.value(ppo).item(),
        value: g.value(vl).item(),
        entropy: g.value(ent_mean).item(),
        mean_ratio,
    };
    Ok((total, breakdown))
}

/// Statistics of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: LossBreakdown,
    pub first_mean_ratio: f64,
    pub peak_bytes: usize,
}

/// Runs the configured epochs of minibatch optimization on `rollout`.
/// Agent order is the identity in the first epoch and reshuffled in every
/// later one.
pub fn update<P: Policy>(
    policy: &mut P,
    adam: &mut Adam,
    rollout: &Rollout<P::State>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let n = policy.n_agents();
    let n_slots = rollout.slots.len();
    if n_slots % cfg.minibatches != 0 {
        return Err(SableError::Config(format!(
            "minibatches {} must divide {n_slots} slots",
            cfg.minibatches
        )));
    }
    let per = n_slots / cfg.minibatches;
    let mut stats = UpdateStats::default();
    let mut first = true;
    let mut peak = 0;
    for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        if epoch > 0 {
            perm.shuffle(rng);
        }
        let mut order: Vec<usize> = (0..n_slots).collect();
        order.shuffle(rng);
        for mb in order.chunks(per) {
            let group: Vec<&SlotRollout<P::State>> = mb.iter().map(|&i| &rollout.slots[i]).collect();
            let (res, bytes) = AllocationMeter::measure(|| -> Result<LossBreakdown> {
                let mut g = Graph::new();
                let (loss, breakdown) = minibatch_loss(&mut g, &*policy, &group, &perm, cfg)?;
                if !breakdown.total.is_finite() {
                    return Err(SableError::NonFinite(format!(
                        "loss at epoch {epoch}: ppo {} value {} entropy {}",
                        breakdown.ppo, breakdown.value, breakdown.entropy
                    )));
                }
                let grads = g.backward(loss)?;
                let params = policy.params_mut();
                params.zero_grad();
                params.accumulate(&g, &grads)?;
                Ok(breakdown)
            });
            let breakdown = res?;
            peak = peak.max(bytes);
            let params = policy.params_mut();
            if cfg.max_grad_norm > 0.0 {
                params.clip_grad_norm(cfg.max_grad_norm);
            }
            if !params.grad_norm().is_finite() {
                return Err(SableError::NonFinite("gradient".into()));
            }
            adam.step(params);
            if first {
                stats.first_mean_ratio = breakdown.mean_ratio;
                first = false;
            }
            stats.loss = breakdown;
        }
    }
    stats.peak_bytes = peak;
    Ok(stats)
}

/// Episode returns of `episodes` fresh episodes.
pub fn evaluate_policy<P: Policy>(
    policy: &P,
    env_name: &EnvName,
    opts: &NeomOptions,
    episodes: usize,
    mode: ActMode,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut env = env_name.build(opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX, 1));
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(mix_seed(seed, u64::MAX - 1, ep as u64));
        let mut state = policy.initial_state();
        let mut total = 0.0;
        let horizon = env.spec().max_episode_steps;
        for t in 0..horizon {
            let out = policy.act(&obs, t, &mut state, mode, &mut rng)?;
            let step = env.step(&out.actions).map_err(|e| SableError::Environment {
                slot: 0,
                detail: e.to_string(),
            })?;
            total += step.reward;
            policy.end_step(&mut state, step.done);
            if step.done {
                break;
            }
            obs = step.observations;
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Episode returns of a policy that picks every agent's action uniformly
/// at random (standard normal for continuous actions).
pub fn random_policy_returns(env_name: &EnvName, opts: &NeomOptions, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::Rng;
    let mut env = env_name.build(opts)?;
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 7, 7));
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        env.reset(mix_seed(seed, u64::MAX - 1, ep as u64));
        let mut total = 0.0;
        for _ in 0..spec.max_episode_steps {
            let actions: Vec<f64> = match spec.action_space {
                ActionSpace::Discrete(k) => (0..spec.n_agents).map(|_| rng.random_range(0..k) as f64).collect(),
                ActionSpace::Continuous(d) => (0..spec.n_agents * d)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            };
            let step = env.step(&actions)?;
            total += step.reward;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub steps_per_sec: f64,
    pub peak_bytes: usize,
    pub loss: LossBreakdown,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.mean_return,
            self.std_return,
            self.steps_per_sec,
            self.peak_bytes,
            self.loss.total,
            self.loss.ppo,
            self.loss.value,
            self.loss.entropy
        )
    }
}

/// Callbacks invoked while training.
pub trait TrainObserver<P: Policy> {
    fn on_metrics(&mut self, row: &MetricsRow) -> Result<()>;
    fn on_checkpoint(&mut self, _update: usize, _policy: &P) -> Result<()> {
        Ok(())
    }
}

/// Writes metrics rows as CSV, header first.
pub struct CsvMetrics<W: Write> {
    out: W,
    wrote_header: bool,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(out: W) -> Self {
        CsvMetrics { out, wrote_header: false }
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        if !self.wrote_header {
            writeln!(self.out, "{METRICS_HEADER}")?;
            self.wrote_header = true;
        }
        writeln!(self.out, "{}", row.csv())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<P: Policy, W: Write> TrainObserver<P> for CsvMetrics<W> {
    fn on_metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.write_row(row)
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub env_steps: usize,
}

impl TrainSummary {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_return)
    }
}

/// Builds `n_envs` slots for a policy.
pub fn make_slots<P: Policy>(
    policy: &P,
    env_name: &EnvName,
    opts: &NeomOptions,
    cfg: &TrainConfig,
) -> Result<Vec<Slot<P::State>>> {
    (0..cfg.n_envs)
        .map(|i| Ok(Slot::new(env_name.build(opts)?, policy.initial_state(), cfg.seed, i)))
        .collect()
}

/// Full training loop. Evaluates greedily every `eval_interval` updates and
/// after the last one.
pub fn train<P: Policy>(
    policy: &mut P,
    env_name: &EnvName,
    opts: &NeomOptions,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<P>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let spec = env_name.build(opts)?.spec().clone();
    if spec.n_agents != policy.n_agents() || spec.action_space != policy.action_space() {
        return Err(SableError::Config(format!(
            "environment {env_name} has {} agents and {:?}, policy expects {} and {:?}",
            spec.n_agents,
            spec.action_space,
            policy.n_agents(),
            policy.action_space()
        )));
    }
    let mut slots = make_slots(&*policy, env_name, opts, cfg)?;
    let mut adam = Adam::new(policy.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3, 3));
    let mut rows = Vec::new();
    let mut env_steps = 0;
    let mut window_steps = 0;
    let mut window_secs = 0.0;
    let mut window_peak = 0;
    for u in 1..=cfg.updates {
        let start = Instant::now();
        let mut rollout = collect_rollout(&*policy, &mut slots, cfg.rollout_length)?;
        for s in &mut rollout.slots {
            s.compute_advantages(cfg.gamma, cfg.gae_lambda);
        }
        let stats = update(policy, &mut adam, &rollout, cfg, &mut rng)?;
        if !policy.params().all_finite() {
            return Err(SableError::NonFinite(format!("parameters after update {u}")));
        }
        let steps = rollout.env_steps();
        env_steps += steps;
        window_steps += steps;
        window_secs += start.elapsed().as_secs_f64();
        window_peak = window_peak.max(stats.peak_bytes);
        let eval_now = (cfg.eval_interval > 0 && u % cfg.eval_interval == 0) || u == cfg.updates;
        if eval_now {
            let returns = evaluate_policy(&*policy, env_name, opts, cfg.eval_episodes, ActMode::Greedy, cfg.seed)?;
            let (mean, std) = mean_std(&returns);
            let sps = if cfg.timing && window_secs > 0.0 { window_steps as f64 / window_secs } else { 0.0 };
            let row = MetricsRow {
                update: u,
                env_steps,
                mean_return: mean,
                std_return: std,
                steps_per_sec: sps,
                peak_bytes: window_peak,
                loss: stats.loss,
            };
            observer.on_metrics(&row)?;
            rows.push(row);
            window_steps = 0;
            window_secs = 0.0;
            window_peak = 0;
        }
        if cfg.checkpoint_interval > 0 && (u % cfg.checkpoint_interval == 0 || u == cfg.updates) {
            observer.on_checkpoint(u, policy)?;
        }
    }
    Ok(TrainSummary { rows, env_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_gae(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let l = r.len();
        let next_v = |t: usize| if t + 1 < l { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..l)
            .map(|t| r[t] + gamma * next_v(t) * if d[t] { 0.0 } else { 1.0 } - v[t])
            .collect();
        (0..l)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..l {
                    sum += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= gamma * lambda;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn monte_carlo_identity() {
        let (adv, tgt) = compute_gae(&[1.0, 1.0, 1.0], &[0.0; 3], &[false; 3], 0.0, 1.0, 1.0);
        assert_eq!(adv, vec![3.0, 2.0, 1.0]);
        assert_eq!(tgt, adv);
    }

    #[test]
    fn zero_lambda_is_one_step_td() {
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.4, -0.3];
        let d = [false, true, false];
        let (adv, _) = compute_gae(&r, &v, &d, 0.7, 0.9, 0.0);
        let want = [0.5 + 0.9 * 0.4 - 0.1, -1.0 - 0.4, 2.0 + 0.9 * 0.7 + 0.3];
        for (a, w) in adv.iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn gae_matches_brute_force(
            series in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, any::<bool>()), 1..=16),
            boot in -2.0..2.0f64,
            gamma in 0.0..=1.0f64,
            lambda in 0.0..=1.0f64,
        ) {
            let r: Vec<f64> = series.iter().map(|s| s.0).collect();
            let v: Vec<f64> = series.iter().map(|s| s.1).collect();
            let d: Vec<bool> = series.iter().map(|s| s.2).collect();
            let (adv, tgt) = compute_gae(&r, &v, &d, boot, gamma, lambda);
            let want = brute_gae(&r, &v, &d, boot, gamma, lambda);
            for t in 0..r.len() {
                prop_assert!((adv[t] - want[t]).abs() <= 1e-12);
                prop_assert!((tgt[t] - adv[t] - v[t]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ppo_loss_unit_ratio_is_negative_mean_advantage() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::column(vec![-0.3, -1.2, -2.0]));
        let adv = g.constant(Tensor::column(vec![1.0, -2.0, 4.0]));
        let l = ppo_loss(&mut g, lp, lp, adv, 0.2).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ppo_loss_clips_large_ratio() {
        let mut g = Graph::new();
        let new = g.constant(Tensor::column(vec![2f64.ln()]));
        let old = g.constant(Tensor::column(vec![0.0]));
        let adv = g.constant(Tensor::column(vec![1.0]));
        let l = ppo_loss(&mut g, new, old, adv, 0.2).unwrap();
        assert!((g.value(l).item() + 1.2).abs() < 1e-12);
    }

    #[test]
    fn value_loss_cases() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::column(vec![1.0, 2.0]));
        let t = g.constant(Tensor::column(vec![1.0, 2.0]));
        let u = g.constant(Tensor::column(vec![0.0, 1.0]));
        let same = value_loss(&mut g, v, t, 0.5).unwrap();
        let off = value_loss(&mut g, v, u, 0.5).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        assert!((g.value(off).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalized_advantages_have_unit_moments() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let (m, s) = mean_std(&normalize(&xs));
        assert!(m.abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_rejects_indivisible_minibatches() {
        let cfg = TrainConfig {
            n_envs: 3,
            minibatches: 2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn thread_count_never_exceeds_work() {
        assert_eq!(thread_count(1), 1);
        assert!(thread_count(4) <= 4);
    }
}
