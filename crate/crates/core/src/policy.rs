//! Pieces shared by every joint policy: the policy interface, trajectory
//! layout, positional encoding, embeddings and output heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::ActionSpace;
use crate::error::{Result, SableError};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Sinusoidal encoding of a within-episode timestep, `[1, d_model]`.
pub fn positional_encode(timestep: usize, d_model: usize) -> Tensor {
    let t = timestep as f64;
    Tensor::from_fn(1, d_model, |_, c| {
        let freq = 10_000f64.powf(-((c / 2 * 2) as f64) / d_model as f64);
        if c % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

/// One encoding row per token, shared by all agents of a step.
pub fn positional_rows(timesteps: &[usize], n_agents: usize, d_model: usize) -> Tensor {
    let rows: Vec<Tensor> = timesteps.iter().map(|&t| positional_encode(t, d_model)).collect();
    let mut out = Tensor::zeros(&[timesteps.len() * n_agents, d_model]);
    for (s, pe) in rows.iter().enumerate() {
        for a in 0..n_agents {
            let r = s * n_agents + a;
            out.data_mut()[r * d_model..(r + 1) * d_model].copy_from_slice(pe.data());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Result of acting for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    /// `N × width`, row-major by agent.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Agent-timestep flattened trajectory of one environment slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_agents: usize,
    /// `[L·N, obs_dim]`.
    pub obs: Tensor,
    /// `[L·N, width]`.
    pub actions: Tensor,
    /// Within-episode index of each step.
    pub timesteps: Vec<usize>,
    /// Episode ended at this step.
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn tokens(&self) -> usize {
        self.n_steps() * self.n_agents
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tokens();
        if self.obs.rows() != t || self.actions.rows() != t || self.dones.len() != self.n_steps() {
            return Err(SableError::contract(format!(
                "trajectory of {} steps × {} agents has obs {:?}, actions {:?}, {} dones",
                self.n_steps(),
                self.n_agents,
                self.obs.shape(),
                self.actions.shape(),
                self.dones.len()
            )));
        }
        Ok(())
    }

    /// Reorders agents within every step: new agent `i` is old agent `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Trajectory> {
        let order = permutation_rows(perm, self.n_agents, self.n_steps())?;
        Ok(Trajectory {
            n_agents: self.n_agents,
            obs: gather_rows(&self.obs, &order),
            actions: gather_rows(&self.actions, &order),
            timesteps: self.timesteps.clone(),
            dones: self.dones.clone(),
        })
    }

    /// Steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Trajectory> {
        let n = self.n_agents;
        Ok(Trajectory {
            n_agents: n,
            obs: self.obs.slice_rows(start * n, len * n)?,
            actions: self.actions.slice_rows(start * n, len * n)?,
            timesteps: self.timesteps[start..start + len].to_vec(),
            dones: self.dones[start..start + len].to_vec(),
        })
    }
}

/// Token order for a per-step agent permutation.
pub fn permutation_rows(perm: &[usize], n_agents: usize, n_steps: usize) -> Result<Vec<usize>> {
    let mut seen = vec![false; n_agents];
    if perm.len() != n_agents || perm.iter().any(|&p| p >= n_agents || std::mem::replace(&mut seen[p], true)) {
        return Err(SableError::contract(format!("{perm:?} is not a permutation of {n_agents} agents")));
    }
    Ok((0..n_steps)
        .flat_map(|s| perm.iter().map(move |&p| s * n_agents + p))
        .collect())
}

pub fn gather_rows(t: &Tensor, order: &[usize]) -> Tensor {
    Tensor::from_fn(order.len(), t.cols(), |r, c| t.get(order[r], c))
}

/// Differentiable outputs over every token of a trajectory, each `[T, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct JointEval {
    pub log_probs: Var,
    pub entropy: Var,
    pub values: Var,
}

/// A joint policy that acts step by step and re-evaluates whole
/// trajectories for training.
pub trait Policy: Send + Sync {
    type State: Clone + Send + Sync;

    fn n_agents(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn initial_state(&self) -> Self::State;

    /// Acts on one timestep and advances `state` as if the step continues
    /// the episode. Call [`Policy::end_step`] once the done flag is known.
    fn act(
        &self,
        obs: &Tensor,
        timestep: usize,
        state: &mut Self::State,
        mode: ActMode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<ActOutput>;

    /// Applies the episode-end reset to the state after a step.
    fn end_step(&self, state: &mut Self::State, done: bool);

    /// Values for `obs` under `state`, leaving the state untouched.
    fn peek_values(&self, obs: &Tensor, timestep: usize, state: &Self::State) -> Result<Vec<f64>>;

    /// Re-evaluates `traj` from the boundary `state`, processing at most
    /// `time_chunk_steps` timesteps per chunk.
    fn evaluate(
        &self,
        g: &mut Graph,
        traj: &Trajectory,
        state: &Self::State,
        time_chunk_steps: usize,
    ) -> Result<JointEval>;

    /// Bytes held by `state`.
    fn state_bytes(&self, state: &Self::State) -> usize;
}

/// Two-layer perceptron `gelu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        out_std: f64,
    ) -> Result<Self> {
        Ok(Mlp {
            w1: store.add(format!("{prefix}.w1"), normal_init(rng, d_in, d_hidden, 1.0 / (d_in as f64).sqrt()))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, d_hidden]))?,
            w2: store.add(format!("{prefix}.w2"), normal_init(rng, d_hidden, d_out, out_std))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }
}

/// Observation embedding `gelu(o W + b)`.
#[derive(Debug, Clone)]
pub struct ObsEmbedding {
    pub w: ParamId,
    pub b: ParamId,
}

impl ObsEmbedding {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, obs_dim: usize, d_model: usize) -> Result<Self> {
        Ok(ObsEmbedding {
            w: store.add(format!("{prefix}.w"), normal_init(rng, obs_dim, d_model, 1.0 / (obs_dim as f64).sqrt()))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, d_model]))?,
        })
    }

    /// Embeds `obs` and adds the positional rows `pe`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: &Tensor, pe: Tensor) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let o = g.constant(obs.clone());
        let h = g.matmul(o, w)?;
        let h = g.add(h, b)?;
        let h = g.gelu(h);
        let pe = g.constant(pe);
        g.add(h, pe)
    }
}

/// Decoder input embedding: the previous agent's action within the step,
/// or a learned start token for the first agent.
#[derive(Debug, Clone)]
pub struct ActionEmbedding {
    pub w: ParamId,
    pub sos: ParamId,
    pub space: ActionSpace,
}

impl ActionEmbedding {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, space: ActionSpace, d_model: usize) -> Result<Self> {
        let k = space.embed_width();
        Ok(ActionEmbedding {
            w: store.add(format!("{prefix}.w"), normal_init(rng, k, d_model, 1.0 / (k as f64).sqrt()))?,
            sos: store.add(format!("{prefix}.sos"), normal_init(rng, 1, d_model, 1.0))?,
            space,
        })
    }

    /// Encodes one stored action (`width` scalars) as a decoder input row.
    pub fn encode_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        match self.space {
            ActionSpace::Discrete(k) => {
                let a = action[0];
                if a.fract() != 0.0 || a < 0.0 || a >= k as f64 {
                    return Err(SableError::contract(format!("action {a} outside 0..{k}")));
                }
                let mut row = vec![0.0; k];
                row[a as usize] = 1.0;
                Ok(row)
            }
            ActionSpace::Continuous(d) => {
                if action.len() != d {
                    return Err(SableError::contract(format!("{}-wide action for dimension {d}", action.len())));
                }
                Ok(action.to_vec())
            }
        }
    }

    /// Shifted teacher-forcing inputs for `actions` (`[T, width]`): row
    /// `(s, i)` encodes agent `i-1`'s action at step `s`, rows of agent 0
    /// are zero. Returns the inputs and the start-token mask column.
    pub fn shifted_inputs(&self, actions: &Tensor, n_agents: usize) -> Result<(Tensor, Tensor)> {
        let t = actions.rows();
        let k = self.space.embed_width();
        let mut inputs = Tensor::zeros(&[t, k]);
        let mut mask = Tensor::zeros(&[t, 1]);
        for r in 0..t {
            if r % n_agents == 0 {
                mask.set(r, 0, 1.0);
            } else {
                let row = self.encode_action(actions.row_slice(r - 1))?;
                inputs.data_mut()[r * k..(r + 1) * k].copy_from_slice(&row);
            }
        }
        Ok((inputs, mask))
    }

    /// `gelu(inputs W) + mask ⊙ sos + pe`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: Tensor, mask: Tensor, pe: Tensor) -> Result<Var> {
        let (w, sos) = (g.param(store, self.w), g.param(store, self.sos));
        let a = g.constant(inputs);
        let h = g.matmul(a, w)?;
        let h = g.gelu(h);
        let m = g.constant(mask);
        let start = g.mul(m, sos)?;
        let h = g.add(h, start)?;
        let pe = g.constant(pe);
        g.add(h, pe)
    }
}

/// Per-agent action distribution: categorical over `K` actions, or a
/// diagonal Gaussian with a shared learned log standard deviation.
#[derive(Debug, Clone)]
pub struct ActionHead {
    pub mlp: Mlp,
    pub log_std: Option<ParamId>,
    pub space: ActionSpace,
}

impl ActionHead {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, space: ActionSpace, d_model: usize) -> Result<Self> {
        let out = space.embed_width();
        let mlp = Mlp::register(store, rng, &format!("{prefix}.mlp"), d_model, d_model, out, 0.01)?;
        let log_std = match space {
            ActionSpace::Continuous(d) => Some(store.add(format!("{prefix}.log_std"), Tensor::zeros(&[1, d]))?),
            ActionSpace::Discrete(_) => None,
        };
        Ok(ActionHead { mlp, log_std, space })
    }

    /// Log-probabilities of `actions` (`[T, width]`) and the entropies, both `[T, 1]`.
    pub fn log_prob_entropy(&self, g: &mut Graph, store: &ParamStore, y: Var, actions: &Tensor) -> Result<(Var, Var)> {
        let out = self.mlp.forward(g, store, y)?;
        match self.space {
            ActionSpace::Discrete(k) => {
                let idx = actions
                    .data()
                    .iter()
                    .map(|&a| {
                        if a.fract() == 0.0 && a >= 0.0 && a < k as f64 {
                            Ok(a as usize)
                        } else {
                            Err(SableError::contract(format!("action {a} outside 0..{k}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let logp_all = g.log_softmax(out);
                let logp = g.gather_cols(logp_all, &idx)?;
                let p = g.exp(logp_all);
                let plogp = g.mul(p, logp_all)?;
                let s = g.row_sum(plogp);
                let ent = g.scale(s, -1.0);
                Ok((logp, ent))
            }
            ActionSpace::Continuous(_) => {
                let ls = g.param(store, self.log_std.expect("continuous head has log_std"));
                let a = g.constant(actions.clone());
                let diff = g.sub(a, out)?;
                let neg_ls = g.scale(ls, -1.0);
                let inv_std = g.exp(neg_ls);
                let z = g.mul(diff, inv_std)?;
                let z2 = g.square(z);
                let half = g.scale(z2, -0.5);
                let per = g.sub(half, ls)?;
                let s = g.row_sum(per);
                let d = self.space.embed_width() as f64;
                let c = g.constant(Tensor::full(&[actions.rows(), 1], -0.5 * LN_2PI * d));
                let logp = g.add(s, c)?;
                let ls_sum = g.row_sum(ls);
                let c2 = g.constant(Tensor::full(&[actions.rows(), 1], 0.5 * (LN_2PI + 1.0) * d));
                let ent = g.add(c2, ls_sum)?;
                Ok((logp, ent))
            }
        }
    }

    /// Picks one action for the single row `y` and returns it with its
    /// log-probability.
    pub fn choose(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        mode: ActMode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Vec<f64>, f64)> {
        let out = self.mlp.forward(g, store, y)?;
        match self.space {
            ActionSpace::Discrete(_) => {
                let logp = g.log_softmax(out);
                let lp = g.value(logp).data().to_vec();
                let a = match mode {
                    ActMode::Greedy => lp
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0,
                    ActMode::Sample => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = lp.len() - 1;
                        for (i, &v) in lp.iter().enumerate() {
                            acc += v.exp();
                            if u < acc {
                                pick = i;
                                break;
                            }
                        }
                        pick
                    }
                };
                Ok((vec![a as f64], lp[a]))
            }
            ActionSpace::Continuous(d) => {
                let mean = g.value(out).data().to_vec();
                let ls = store.value(self.log_std.expect("continuous head has log_std")).data().to_vec();
                let action: Vec<f64> = match mode {
                    ActMode::Greedy => mean.clone(),
                    ActMode::Sample => (0..d)
                        .map(|c| {
                            let z: f64 = StandardNormal.sample(rng);
                            mean[c] + ls[c].exp() * z
                        })
                        .collect(),
                };
                let logp: f64 = (0..d)
                    .map(|c| {
                        let z = (action[c] - mean[c]) * (-ls[c]).exp();
                        -0.5 * z * z - ls[c] - 0.5 * LN_2PI
                    })
                    .sum();
                Ok((action, logp))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_encoding_basics() {
        let p0 = positional_encode(0, 6);
        assert_eq!(p0.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_ne!(positional_encode(3, 2), positional_encode(4, 2));
        let rows = positional_rows(&[2, 5], 3, 4);
        for a in 0..3 {
            assert_eq!(rows.row_slice(a), positional_encode(2, 4).data());
            assert_eq!(rows.row_slice(3 + a), positional_encode(5, 4).data());
        }
    }

    #[test]
    fn permutation_rows_and_validation() {
        assert_eq!(permutation_rows(&[2, 0, 1], 3, 2).unwrap(), vec![2, 0, 1, 5, 3, 4]);
        assert!(permutation_rows(&[0, 0, 1], 3, 1).is_err());
        assert!(permutation_rows(&[0, 1], 3, 1).is_err());
    }

    fn head(space: ActionSpace, seed: u64) -> (ParamStore, ActionHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = ActionHead::register(&mut store, &mut rng, "head", space, 4).unwrap();
        (store, h)
    }

    #[test]
    fn discrete_probabilities_normalize_and_uniform_entropy_is_log_k() {
        let (mut store, h) = head(ActionSpace::Discrete(5), 1);
        let mut g = Graph::new();
        let y = g.constant(Tensor::from_fn(3, 4, |r, c| (r as f64) - 0.3 * c as f64));
        let out = h.mlp.forward(&mut g, &store, y).unwrap();
        let lp = g.log_softmax(out);
        for r in 0..3 {
            let s: f64 = g.value(lp).row_slice(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        store.value_mut(h.mlp.w2).data_mut().fill(0.0);
        let mut g = Graph::new();
        let y = g.constant(Tensor::ones(&[2, 4]));
        let (_, ent) = h.log_prob_entropy(&mut g, &store, y, &Tensor::zeros(&[2, 1])).unwrap();
        for r in 0..2 {
            assert!((g.value(ent).get(r, 0) - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_head_log_prob_matches_closed_form() {
        let (mut store, h) = head(ActionSpace::Continuous(2), 2);
        store.value_mut(h.log_std.unwrap()).data_mut().copy_from_slice(&[0.3, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let y = g.constant(Tensor::from_fn(1, 4, |_, c| 0.1 * c as f64));
        let (a, lp) = h.choose(&mut g, &store, y, ActMode::Sample, &mut rng).unwrap();
        let acts = Tensor::row(a.clone());
        let (lp2, ent) = h.log_prob_entropy(&mut g, &store, y, &acts).unwrap();
        assert!((g.value(lp2).item() - lp).abs() < 1e-12);
        let want_ent = 0.3 - 0.2 + (LN_2PI + 1.0);
        assert!((g.value(ent).item() - want_ent).abs() < 1e-12);
        let (ag, _) = h.choose(&mut g, &store, y, ActMode::Greedy, &mut rng).unwrap();
        let mean_out = h.mlp.forward(&mut g, &store, y).unwrap();
        assert_eq!(ag, g.value(mean_out).to_vec());
    }

    #[test]
    fn shifted_inputs_use_previous_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let e = ActionEmbedding::register(&mut store, &mut rng, "act", ActionSpace::Discrete(3), 4).unwrap();
        let actions = Tensor::column(vec![2.0, 0.0, 1.0, 1.0]);
        let (inp, mask) = e.shifted_inputs(&actions, 2).unwrap();
        assert_eq!(mask.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(inp.row_slice(0), &[0.0, 0.0, 0.0]);
        assert_eq!(inp.row_slice(1), &[0.0, 0.0, 1.0]);
        assert_eq!(inp.row_slice(3), &[0.0, 1.0, 0.0]);
    }
}
