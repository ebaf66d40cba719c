//! The retention encoder-decoder policy.
//!
//! The encoder embeds every agent's observation, mixes them with
//! self-retention and reads a value per agent. The decoder consumes the
//! previous agent's action, applies self-retention over the action stream,
//! cross-retention onto the encoded observations, and emits the next
//! agent's action distribution.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::decay::{ChunkDecay, DecayArtifacts, DecaySpec, Role};
use crate::envs::ActionSpace;
use crate::error::{Result, SableError};
use crate::params::ParamStore;
use crate::policy::{
    positional_rows, ActMode, ActOutput, ActionEmbedding, ActionHead, JointEval, Mlp, ObsEmbedding, Policy, Trajectory,
};
use crate::retention::{
    close_decoder_step, head_kappas, FeedForward, Mixing, MultiScaleBlock, RetentionState, RetentionSublayer,
    StateRole,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// Hidden state carried across timesteps until an episode ends.
    FullTrajectory,
    /// State reset after every timestep.
    NoMemory,
    /// State reset after every timestep; agents of one step are processed
    /// in groups of this size.
    AgentChunked(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SableConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub kappa_scale: f64,
    pub action_space: ActionSpace,
    pub memory_mode: MemoryMode,
    pub obs_dim: usize,
    pub n_agents: usize,
}

impl SableConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SableError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_blocks == 0 || self.obs_dim == 0 || self.n_agents == 0 {
            return bad("n_blocks, obs_dim and n_agents must be positive".into());
        }
        if !(self.kappa_scale > 0.0 && self.kappa_scale.is_finite()) {
            return bad(format!("kappa_scale {} must be positive", self.kappa_scale));
        }
        if self.action_space.embed_width() == 0 {
            return bad("action space must be non-empty".into());
        }
        if let MemoryMode::AgentChunked(c) = self.memory_mode {
            if c == 0 || !self.n_agents.is_multiple_of(c) {
                return bad(format!("agent chunk {c} must divide {} agents", self.n_agents));
            }
        }
        Ok(())
    }

    pub fn kappas(&self) -> Vec<f64> {
        head_kappas(self.n_heads, self.kappa_scale)
    }

    fn resets_every_step(&self) -> bool {
        !matches!(self.memory_mode, MemoryMode::FullTrajectory)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_ret: RetentionSublayer,
    cross: RetentionSublayer,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    obs_embed: ObsEmbedding,
    act_embed: ActionEmbedding,
    encoder: Vec<MultiScaleBlock>,
    value_head: Mlp,
    decoder: Vec<DecoderBlock>,
    action_head: ActionHead,
}

/// Hidden states of every retention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SableState {
    pub encoder: Vec<RetentionState>,
    pub decoder_self: Vec<RetentionState>,
    pub decoder_cross: Vec<RetentionState>,
}

impl SableState {
    pub fn size_bytes(&self) -> usize {
        self.all().map(RetentionState::size_bytes).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.all().all(RetentionState::is_finite)
    }

    pub fn reset(&mut self) {
        for s in self.encoder.iter_mut().chain(&mut self.decoder_self).chain(&mut self.decoder_cross) {
            s.reset();
        }
    }

    fn all(&self) -> impl Iterator<Item = &RetentionState> {
        self.encoder.iter().chain(&self.decoder_self).chain(&self.decoder_cross)
    }
}

/// Bound copies of a [`SableState`] on one graph.
struct BoundState {
    encoder: Vec<Vec<Var>>,
    decoder_self: Vec<Vec<Var>>,
    decoder_cross: Vec<Vec<Var>>,
}

impl BoundState {
    fn bind(g: &mut Graph, s: &SableState) -> Self {
        BoundState {
            encoder: s.encoder.iter().map(|r| r.bind(g)).collect(),
            decoder_self: s.decoder_self.iter().map(|r| r.bind(g)).collect(),
            decoder_cross: s.decoder_cross.iter().map(|r| r.bind(g)).collect(),
        }
    }

    fn zeros(g: &mut Graph, net: &Sable) -> Self {
        Self::bind(g, &net.initial_state())
    }

    fn write_back(&self, g: &Graph, s: &mut SableState) {
        for (r, v) in s.encoder.iter_mut().zip(&self.encoder) {
            r.store(g, v);
        }
        for (r, v) in s.decoder_self.iter_mut().zip(&self.decoder_self) {
            r.store(g, v);
        }
        for (r, v) in s.decoder_cross.iter_mut().zip(&self.decoder_cross) {
            r.store(g, v);
        }
    }
}

/// One group of tokens evaluated together during training.
struct Segment {
    step_start: usize,
    n_steps: usize,
    agent_start: usize,
    n_agents: usize,
    encoder: Vec<ChunkDecay>,
    decoder: Vec<ChunkDecay>,
    /// States are zeroed before this segment.
    fresh: bool,
}

#[derive(Debug, Clone)]
pub struct Sable {
    pub config: SableConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Sable {
    pub fn new(config: SableConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let kappas = config.kappas();
        let obs_embed = ObsEmbedding::register(&mut store, &mut rng, "obs_embed", config.obs_dim, d)?;
        let act_embed = ActionEmbedding::register(&mut store, &mut rng, "act_embed", config.action_space, d)?;
        let encoder = (0..config.n_blocks)
            .map(|b| MultiScaleBlock::register(&mut store, &mut rng, &format!("enc{b}"), d, kappas.clone()))
            .collect::<Result<Vec<_>>>()?;
        let value_head = Mlp::register(&mut store, &mut rng, "value_head", d, d, 1, 0.01)?;
        let decoder = (0..config.n_blocks)
            .map(|b| {
                Ok(DecoderBlock {
                    self_ret: RetentionSublayer::register(&mut store, &mut rng, &format!("dec{b}.self"), d, kappas.clone())?,
                    cross: RetentionSublayer::register(&mut store, &mut rng, &format!("dec{b}.cross"), d, kappas.clone())?,
                    ffn: FeedForward::register(&mut store, &mut rng, &format!("dec{b}.ffn"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let action_head = ActionHead::register(&mut store, &mut rng, "action_head", config.action_space, d)?;
        Ok(Sable {
            config,
            params: store,
            layout: Layout {
                obs_embed,
                act_embed,
                encoder,
                value_head,
                decoder,
                action_head,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Builds a model for `config` and fills it from the checkpoint at `path`.
    pub fn load(config: SableConfig, path: &Path) -> Result<Self> {
        let mut net = Sable::new(config, 0)?;
        let stored = checkpoint::load(path)?;
        net.params.load_from(&stored)?;
        Ok(net)
    }

    fn d_head(&self) -> usize {
        self.config.d_model / self.config.n_heads
    }

    fn zero_state(&self) -> SableState {
        let (h, dh) = (self.config.n_heads, self.d_head());
        let make = |role| (0..self.config.n_blocks).map(|_| RetentionState::zeros(role, h, dh)).collect();
        SableState {
            encoder: make(StateRole::EncoderSelf),
            decoder_self: make(StateRole::DecoderSelf),
            decoder_cross: make(StateRole::DecoderCross),
        }
    }

    fn check_obs(&self, obs: &Tensor) -> Result<()> {
        if obs.shape() != [self.config.n_agents, self.config.obs_dim] {
            return Err(SableError::dim(
                "sable",
                format!(
                    "observations {:?}, expected [{}, {}]",
                    obs.shape(),
                    self.config.n_agents,
                    self.config.obs_dim
                ),
            ));
        }
        Ok(())
    }

    /// Embeds and encodes the observation rows `rows` of one timestep on
    /// `g`, advancing the encoder states.
    fn encode_rows(&self, g: &mut Graph, obs: &Tensor, timestep: usize, st: &mut BoundState) -> Result<Var> {
        let store = &self.params;
        let pe = positional_rows(&[timestep], obs.rows(), self.config.d_model);
        let mut y = self.layout.obs_embed.forward(g, store, obs, pe)?;
        let groups: Vec<ChunkDecay>;
        let mixing = match self.config.memory_mode {
            MemoryMode::AgentChunked(c) => {
                groups = (0..self.config.n_heads).map(|_| ChunkDecay::agent_group(c, Role::Encoder)).collect();
                Mixing::Chunk(&groups)
            }
            _ => Mixing::EncoderStep { terminal: false },
        };
        for (b, block) in self.layout.encoder.iter().enumerate() {
            y = block.forward(g, store, y, &mixing, &mut st.encoder[b])?;
        }
        Ok(y)
    }

    /// Encodes one timestep and advances the encoder states in `state`.
    /// Agent groups are processed in separate graphs in agent-chunked mode.
    fn encode_step(&self, obs: &Tensor, timestep: usize, state: &mut SableState) -> Result<(Tensor, Vec<f64>)> {
        let n = self.config.n_agents;
        let group = match self.config.memory_mode {
            MemoryMode::AgentChunked(c) => c,
            _ => n,
        };
        let mut parts = Vec::with_capacity(n / group);
        let mut values = Vec::with_capacity(n);
        for a0 in (0..n).step_by(group) {
            let mut g = Graph::new();
            let mut st = BoundState::bind(&mut g, state);
            let rows = if group == n { obs.clone() } else { obs.slice_rows(a0, group)? };
            let enc = self.encode_rows(&mut g, &rows, timestep, &mut st)?;
            let v = self.values_of(&mut g, enc)?;
            values.extend_from_slice(g.value(v).data());
            st.write_back(&g, state);
            parts.push(g.value(enc).clone());
        }
        let enc = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat_rows(&refs)?
        };
        Ok((enc, values))
    }

    fn values_of(&self, g: &mut Graph, enc: Var) -> Result<Var> {
        self.layout.value_head.forward(g, &self.params, enc)
    }

    /// One decoder agent: `input` is the embedded previous action row,
    /// `enc_row` that agent's encoded observation.
    fn decode_agent(&self, g: &mut Graph, input: Var, enc_row: Var, st: &mut BoundState) -> Result<Var> {
        let store = &self.params;
        let mut y = input;
        for (b, block) in self.layout.decoder.iter().enumerate() {
            y = block.self_ret.forward(g, store, y, y, y, &Mixing::DecoderAgent, &mut st.decoder_self[b])?;
            y = block.cross.forward(g, store, y, enc_row, enc_row, &Mixing::DecoderAgent, &mut st.decoder_cross[b])?;
            y = block.ffn.forward(g, store, y)?;
        }
        Ok(y)
    }

    fn close_step(&self, g: &mut Graph, st: &mut BoundState) {
        for (b, block) in self.layout.decoder.iter().enumerate() {
            close_decoder_step(g, &block.self_ret.msr, &mut st.decoder_self[b], false);
            close_decoder_step(g, &block.cross.msr, &mut st.decoder_cross[b], false);
        }
    }

    /// Encoded observations and values of one timestep without touching
    /// `state`.
    pub fn encode(&self, obs: &Tensor, timestep: usize, state: &SableState) -> Result<(Tensor, Vec<f64>)> {
        self.check_obs(obs)?;
        self.encode_step(obs, timestep, &mut state.clone())
    }

    fn segments(&self, traj: &Trajectory, time_chunk_steps: usize) -> Result<Vec<Segment>> {
        let l = traj.n_steps();
        let n = self.config.n_agents;
        let kappas = self.config.kappas();
        let mut out = Vec::new();
        match self.config.memory_mode {
            MemoryMode::AgentChunked(c) => {
                let enc: Vec<ChunkDecay> = kappas.iter().map(|_| ChunkDecay::agent_group(c, Role::Encoder)).collect();
                let dec: Vec<ChunkDecay> = kappas.iter().map(|_| ChunkDecay::agent_group(c, Role::Decoder)).collect();
                for s in 0..l {
                    for a0 in (0..n).step_by(c) {
                        out.push(Segment {
                            step_start: s,
                            n_steps: 1,
                            agent_start: a0,
                            n_agents: c,
                            encoder: enc.clone(),
                            decoder: dec.clone(),
                            fresh: a0 == 0,
                        });
                    }
                }
            }
            mode => {
                if time_chunk_steps == 0 {
                    return Err(SableError::Config("time chunk must be at least one step".into()));
                }
                let mut s0 = 0;
                while s0 < l {
                    let len = time_chunk_steps.min(l - s0);
                    let dones = if mode == MemoryMode::NoMemory {
                        vec![true; len]
                    } else {
                        traj.dones[s0..s0 + len].to_vec()
                    };
                    let mut encoder = Vec::with_capacity(kappas.len());
                    let mut decoder = Vec::with_capacity(kappas.len());
                    for &k in &kappas {
                        let spec = DecaySpec::new(n, k, dones.clone())?;
                        let art = DecayArtifacts::build(&spec)?;
                        encoder.push(art.for_role(Role::Encoder));
                        decoder.push(art.for_role(Role::Decoder));
                    }
                    out.push(Segment {
                        step_start: s0,
                        n_steps: len,
                        agent_start: 0,
                        n_agents: n,
                        encoder,
                        decoder,
                        fresh: false,
                    });
                    s0 += len;
                }
            }
        }
        Ok(out)
    }

    fn segment_rows(&self, seg: &Segment) -> Vec<usize> {
        let n = self.config.n_agents;
        (seg.step_start..seg.step_start + seg.n_steps)
            .flat_map(|s| (seg.agent_start..seg.agent_start + seg.n_agents).map(move |a| s * n + a))
            .collect()
    }
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    Tensor::from_fn(rows.len(), t.cols(), |r, c| t.get(rows[r], c))
}

impl Policy for Sable {
    type State = SableState;

    fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    fn action_space(&self) -> ActionSpace {
        self.config.action_space
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn initial_state(&self) -> SableState {
        self.zero_state()
    }

    fn act(
        &self,
        obs: &Tensor,
        timestep: usize,
        state: &mut SableState,
        mode: ActMode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<ActOutput> {
        self.check_obs(obs)?;
        let n = self.config.n_agents;
        let d = self.config.d_model;
        let store = &self.params;
        let (enc, values) = self.encode_step(obs, timestep, state)?;

        let width = self.config.action_space.width();
        let k = self.config.action_space.embed_width();
        let mut actions = Vec::with_capacity(n * width);
        let mut log_probs = Vec::with_capacity(n);
        let mut prev: Option<Vec<f64>> = None;
        for i in 0..n {
            let mut g = Graph::new();
            let mut st = BoundState::bind(&mut g, state);
            let (inputs, mask) = match &prev {
                None => (Tensor::zeros(&[1, k]), Tensor::scalar(1.0)),
                Some(a) => (Tensor::row(self.layout.act_embed.encode_action(a)?), Tensor::scalar(0.0)),
            };
            let pe = positional_rows(&[timestep], 1, d);
            let inp = self.layout.act_embed.forward(&mut g, store, inputs, mask, pe)?;
            let enc_row = g.constant(enc.slice_rows(i, 1)?);
            let y = self.decode_agent(&mut g, inp, enc_row, &mut st)?;
            let (a, lp) = self.layout.action_head.choose(&mut g, store, y, mode, rng)?;
            st.write_back(&g, state);
            actions.extend_from_slice(&a);
            log_probs.push(lp);
            prev = Some(a);
        }
        let mut g = Graph::new();
        let mut st = BoundState::bind(&mut g, state);
        self.close_step(&mut g, &mut st);
        st.write_back(&g, state);
        if self.config.resets_every_step() {
            state.reset();
        }
        Ok(ActOutput {
            actions,
            log_probs,
            values,
        })
    }

    fn end_step(&self, state: &mut SableState, done: bool) {
        if done || self.config.resets_every_step() {
            state.reset();
        }
    }

    fn peek_values(&self, obs: &Tensor, timestep: usize, state: &SableState) -> Result<Vec<f64>> {
        Ok(self.encode(obs, timestep, state)?.1)
    }

    fn evaluate(&self, g: &mut Graph, traj: &Trajectory, state: &SableState, time_chunk_steps: usize) -> Result<JointEval> {
        traj.validate()?;
        if traj.n_agents != self.config.n_agents || traj.obs.cols() != self.config.obs_dim {
            return Err(SableError::dim(
                "evaluate",
                format!("trajectory of {} agents × {} features", traj.n_agents, traj.obs.cols()),
            ));
        }
        let store = &self.params;
        let n = self.config.n_agents;
        let d = self.config.d_model;
        let (inputs, mask) = self.layout.act_embed.shifted_inputs(&traj.actions, n)?;
        let mut st = BoundState::bind(g, state);
        let mut logps = Vec::new();
        let mut ents = Vec::new();
        let mut vals = Vec::new();
        for seg in self.segments(traj, time_chunk_steps)? {
            if seg.fresh {
                st = BoundState::zeros(g, self);
            }
            let rows = self.segment_rows(&seg);
            let steps: Vec<usize> = traj.timesteps[seg.step_start..seg.step_start + seg.n_steps].to_vec();
            let pe = positional_rows(&steps, seg.n_agents, d);
            let mut x = self.layout.obs_embed.forward(g, store, &take_rows(&traj.obs, &rows), pe.clone())?;
            for (b, block) in self.layout.encoder.iter().enumerate() {
                x = block.forward(g, store, x, &Mixing::Chunk(&seg.encoder), &mut st.encoder[b])?;
            }
            vals.push(self.values_of(g, x)?);
            let mut y = self
                .layout
                .act_embed
                .forward(g, store, take_rows(&inputs, &rows), take_rows(&mask, &rows), pe)?;
            let dec = Mixing::Chunk(&seg.decoder);
            for (b, block) in self.layout.decoder.iter().enumerate() {
                y = block.self_ret.forward(g, store, y, y, y, &dec, &mut st.decoder_self[b])?;
                y = block.cross.forward(g, store, y, x, x, &dec, &mut st.decoder_cross[b])?;
                y = block.ffn.forward(g, store, y)?;
            }
            let (lp, ent) = self
                .layout
                .action_head
                .log_prob_entropy(g, store, y, &take_rows(&traj.actions, &rows))?;
            logps.push(lp);
            ents.push(ent);
        }
        let cat = |g: &mut Graph, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat_rows(v) };
        Ok(JointEval {
            log_probs: cat(g, &logps)?,
            entropy: cat(g, &ents)?,
            values: cat(g, &vals)?,
        })
    }

    fn state_bytes(&self, state: &SableState) -> usize {
        state.size_bytes()
    }
}
