//! Softmax-attention encoder-decoder baseline with the same interface as
//! the retention policy.
//!
//! In its default form the model sees only the current timestep: the
//! encoder attends over all agents of the step, the decoder attends
//! causally over the actions decoded so far and fully over the encoded
//! observations. An episode-context form keeps every past key and value of
//! the encoder instead, which is what a stored-context attention model pays
//! in memory.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decay::{build_encoder_decay, DecaySpec};
use crate::envs::ActionSpace;
use crate::error::{Result, SableError};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::policy::{ActMode, ActOutput, ActionEmbedding, ActionHead, JointEval, Mlp, ObsEmbedding, Policy, Trajectory};
use crate::retention::{SwiGlu, RMS_NORM_EPS};
use crate::tensor::{Graph, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// `softmax(QKᵀ/√d + mask) V` for one head. `mask` is additive: 0 where
/// visible, `-inf` where hidden.
pub fn masked_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d = g.shape(q)[1];
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let s = match mask {
        Some(m) => g.add(s, m)?,
        None => s,
    };
    let p = g.softmax(s);
    g.matmul(p, v)
}

/// Additive mask from a visibility predicate.
pub fn additive_mask(rows: usize, cols: usize, visible: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_fn(rows, cols, |i, j| if visible(i, j) { 0.0 } else { f64::NEG_INFINITY })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfKind {
    Plain,
    SwiGlu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatVariant {
    pub norm: NormKind,
    pub ff: FfKind,
}

/// Every combination of normalization and feed-forward choice.
pub fn ablation_variants() -> [MatVariant; 4] {
    [
        MatVariant { norm: NormKind::Layer, ff: FfKind::Plain },
        MatVariant { norm: NormKind::Rms, ff: FfKind::Plain },
        MatVariant { norm: NormKind::Layer, ff: FfKind::SwiGlu },
        MatVariant { norm: NormKind::Rms, ff: FfKind::SwiGlu },
    ]
}

impl fmt::Display for MatVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let norm = match self.norm {
            NormKind::Layer => "layer",
            NormKind::Rms => "rms",
        };
        let ff = match self.ff {
            FfKind::Plain => "plain",
            FfKind::SwiGlu => "swiglu",
        };
        write!(f, "{norm}+{ff}")
    }
}

impl FromStr for NormKind {
    type Err = SableError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(NormKind::Layer),
            "rms" => Ok(NormKind::Rms),
            o => Err(SableError::Config(format!("unknown norm `{o}`, expected layer or rms"))),
        }
    }
}

impl FromStr for FfKind {
    type Err = SableError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(FfKind::Plain),
            "swiglu" => Ok(FfKind::SwiGlu),
            o => Err(SableError::Config(format!("unknown ff `{o}`, expected plain or swiglu"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    CurrentStep,
    Episode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub variant: MatVariant,
    pub context: Context,
    pub action_space: ActionSpace,
    pub obs_dim: usize,
    pub n_agents: usize,
}

impl MatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(SableError::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_blocks == 0 || self.obs_dim == 0 || self.n_agents == 0 {
            return Err(SableError::Config("n_blocks, obs_dim and n_agents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttnLayer {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    n_heads: usize,
}

impl AttnLayer {
    fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(AttnLayer {
            w_q: store.add(format!("{prefix}.w_q"), normal_init(rng, d, d, std))?,
            w_k: store.add(format!("{prefix}.w_k"), normal_init(rng, d, d, std))?,
            w_v: store.add(format!("{prefix}.w_v"), normal_init(rng, d, d, std))?,
            w_o: store.add(format!("{prefix}.w_o"), normal_init(rng, d, d, std))?,
            n_heads,
        })
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
        let w = g.param(store, w);
        g.matmul(x, w)
    }

    /// Attention of projected queries over projected keys/values.
    fn attend(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = g.shape(q)[1];
        let dh = d / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            heads.push(masked_attention(g, qh, kh, vh, mask)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let w_o = g.param(store, self.w_o);
        g.matmul(cat, w_o)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    kind: NormKind,
    scale: ParamId,
    shift: Option<ParamId>,
}

impl Norm {
    fn register(store: &mut ParamStore, prefix: &str, kind: NormKind, d: usize) -> Result<Self> {
        let scale = store.add(format!("{prefix}.scale"), Tensor::ones(&[1, d]))?;
        let shift = match kind {
            NormKind::Layer => Some(store.add(format!("{prefix}.shift"), Tensor::zeros(&[1, d]))?),
            NormKind::Rms => None,
        };
        Ok(Norm { kind, scale, shift })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.param(store, self.scale);
        match (self.kind, self.shift) {
            (NormKind::Layer, Some(b)) => {
                let b = g.param(store, b);
                g.group_norm(x, 1, s, b, LAYER_NORM_EPS)
            }
            _ => g.rms_norm(x, s, RMS_NORM_EPS),
        }
    }
}

#[derive(Debug, Clone)]
enum Ff {
    Plain(Mlp),
    SwiGlu(SwiGlu),
}

impl Ff {
    fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, kind: FfKind, d: usize) -> Result<Self> {
        Ok(match kind {
            FfKind::Plain => Ff::Plain(Mlp::register(store, rng, prefix, d, 2 * d, d, 1.0 / (2.0 * d as f64).sqrt())?),
            FfKind::SwiGlu => Ff::SwiGlu(SwiGlu::register(store, rng, prefix, d, 2 * d)?),
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Ff::Plain(m) => m.forward(g, store, x),
            Ff::SwiGlu(s) => s.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone)]
struct EncBlock {
    attn: AttnLayer,
    n1: Norm,
    ff: Ff,
    n2: Norm,
}

#[derive(Debug, Clone)]
struct DecBlock {
    self_attn: AttnLayer,
    n1: Norm,
    cross: AttnLayer,
    n2: Norm,
    ff: Ff,
    n3: Norm,
}

fn residual_norm(g: &mut Graph, store: &ParamStore, norm: &Norm, x: Var, f: Var) -> Result<Var> {
    let r = g.add(x, f)?;
    norm.forward(g, store, r)
}

#[derive(Debug, Clone)]
struct Layout {
    obs_embed: ObsEmbedding,
    act_embed: ActionEmbedding,
    encoder: Vec<EncBlock>,
    value_head: Mlp,
    decoder: Vec<DecBlock>,
    action_head: ActionHead,
}

/// Stored encoder keys and values of the current episode, one pair per
/// block. Empty in current-step context.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl KvCache {
    pub fn size_bytes(&self) -> usize {
        self.layers.iter().map(|(k, v)| k.size_bytes() + v.size_bytes()).sum()
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }
}

#[derive(Debug, Clone)]
pub struct MatLite {
    pub config: MatConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl MatLite {
    pub fn new(config: MatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, v) = (config.d_model, config.n_heads, config.variant);
        let obs_embed = ObsEmbedding::register(&mut store, &mut rng, "obs_embed", config.obs_dim, d)?;
        let act_embed = ActionEmbedding::register(&mut store, &mut rng, "act_embed", config.action_space, d)?;
        let mut encoder = Vec::new();
        for b in 0..config.n_blocks {
            let p = format!("enc{b}");
            encoder.push(EncBlock {
                attn: AttnLayer::register(&mut store, &mut rng, &format!("{p}.attn"), d, h)?,
                n1: Norm::register(&mut store, &format!("{p}.n1"), v.norm, d)?,
                ff: Ff::register(&mut store, &mut rng, &format!("{p}.ff"), v.ff, d)?,
                n2: Norm::register(&mut store, &format!("{p}.n2"), v.norm, d)?,
            });
        }
        let value_head = Mlp::register(&mut store, &mut rng, "value_head", d, d, 1, 0.01)?;
        let mut decoder = Vec::new();
        for b in 0..config.n_blocks {
            let p = format!("dec{b}");
            decoder.push(DecBlock {
                self_attn: AttnLayer::register(&mut store, &mut rng, &format!("{p}.self"), d, h)?,
                n1: Norm::register(&mut store, &format!("{p}.n1"), v.norm, d)?,
                cross: AttnLayer::register(&mut store, &mut rng, &format!("{p}.cross"), d, h)?,
                n2: Norm::register(&mut store, &format!("{p}.n2"), v.norm, d)?,
                ff: Ff::register(&mut store, &mut rng, &format!("{p}.ff"), v.ff, d)?,
                n3: Norm::register(&mut store, &format!("{p}.n3"), v.norm, d)?,
            });
        }
        let action_head = ActionHead::register(&mut store, &mut rng, "action_head", config.action_space, d)?;
        Ok(MatLite {
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

    fn check_obs(&self, obs: &Tensor) -> Result<()> {
        if obs.shape() != [self.config.n_agents, self.config.obs_dim] {
            return Err(SableError::dim(
                "mat-lite",
                format!("observations {:?}, expected [{}, {}]", obs.shape(), self.config.n_agents, self.config.obs_dim),
            ));
        }
        Ok(())
    }

    /// Encodes one step. With episode context the step also attends over
    /// `cache`, and the step's keys and values are appended to it.
    fn encode_step(&self, g: &mut Graph, obs: &Tensor, cache: &mut KvCache) -> Result<Var> {
        let store = &self.params;
        let n = self.config.n_agents;
        let zeros = Tensor::zeros(&[n, self.config.d_model]);
        let mut x = self.layout.obs_embed.forward(g, store, obs, zeros)?;
        let episode = self.config.context == Context::Episode;
        if episode && cache.layers.is_empty() {
            let empty = || Tensor::zeros(&[0, self.config.d_model]);
            cache.layers = (0..self.config.n_blocks).map(|_| (empty(), empty())).collect();
        }
        for (b, block) in self.layout.encoder.iter().enumerate() {
            let q = block.attn.project(g, store, x, block.attn.w_q)?;
            let mut k = block.attn.project(g, store, x, block.attn.w_k)?;
            let mut v = block.attn.project(g, store, x, block.attn.w_v)?;
            if episode {
                let (ck, cv) = &cache.layers[b];
                let nk = Tensor::concat_rows(&[ck, g.value(k)])?;
                let nv = Tensor::concat_rows(&[cv, g.value(v)])?;
                let nk = Arc::new(nk);
                let nv = Arc::new(nv);
                k = g.constant_shared(Arc::clone(&nk));
                v = g.constant_shared(Arc::clone(&nv));
                cache.layers[b] = (Arc::unwrap_or_clone(nk), Arc::unwrap_or_clone(nv));
            }
            let a = block.attn.attend(g, store, q, k, v, None)?;
            let y = residual_norm(g, store, &block.n1, x, a)?;
            let f = block.ff.forward(g, store, y)?;
            x = residual_norm(g, store, &block.n2, y, f)?;
        }
        Ok(x)
    }

    /// Stored context bytes for a cache.
    pub fn cache_bytes(&self, cache: &KvCache) -> usize {
        cache.size_bytes()
    }
}

impl Policy for MatLite {
    type State = KvCache;

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

    fn initial_state(&self) -> KvCache {
        KvCache::default()
    }

    fn act(
        &self,
        obs: &Tensor,
        _timestep: usize,
        state: &mut KvCache,
        mode: ActMode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<ActOutput> {
        self.check_obs(obs)?;
        let store = &self.params;
        let n = self.config.n_agents;
        let d = self.config.d_model;
        let mut g = Graph::new();
        let enc = self.encode_step(&mut g, obs, state)?;
        let vals = self.layout.value_head.forward(&mut g, store, enc)?;
        let values = g.value(vals).to_vec();
        let mut cross_kv = Vec::with_capacity(self.layout.decoder.len());
        for block in &self.layout.decoder {
            let k = block.cross.project(&mut g, store, enc, block.cross.w_k)?;
            let v = block.cross.project(&mut g, store, enc, block.cross.w_v)?;
            cross_kv.push((Arc::new(g.value(k).clone()), Arc::new(g.value(v).clone())));
        }
        drop(g);

        let mut self_cache: Vec<(Tensor, Tensor)> = (0..self.layout.decoder.len())
            .map(|_| (Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d])))
            .collect();
        let k_width = self.config.action_space.embed_width();
        let width = self.config.action_space.width();
        let mut actions = Vec::with_capacity(n * width);
        let mut log_probs = Vec::with_capacity(n);
        let mut prev: Option<Vec<f64>> = None;
        for i in 0..n {
            let mut g = Graph::new();
            let (inputs, mask) = match &prev {
                None => (Tensor::zeros(&[1, k_width]), Tensor::scalar(1.0)),
                Some(a) => (Tensor::row(self.layout.act_embed.encode_action(a)?), Tensor::scalar(0.0)),
            };
            let mut y = self.layout.act_embed.forward(&mut g, store, inputs, mask, Tensor::zeros(&[1, d]))?;
            for (b, block) in self.layout.decoder.iter().enumerate() {
                let q = block.self_attn.project(&mut g, store, y, block.self_attn.w_q)?;
                let k = block.self_attn.project(&mut g, store, y, block.self_attn.w_k)?;
                let v = block.self_attn.project(&mut g, store, y, block.self_attn.w_v)?;
                let (ck, cv) = &mut self_cache[b];
                ck.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.value(k).data());
                cv.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.value(v).data());
                let kk = g.constant(ck.slice_rows(0, i + 1)?);
                let vv = g.constant(cv.slice_rows(0, i + 1)?);
                let a = block.self_attn.attend(&mut g, store, q, kk, vv, None)?;
                let y1 = residual_norm(&mut g, store, &block.n1, y, a)?;
                let q2 = block.cross.project(&mut g, store, y1, block.cross.w_q)?;
                let kc = g.constant_shared(Arc::clone(&cross_kv[b].0));
                let vc = g.constant_shared(Arc::clone(&cross_kv[b].1));
                let c = block.cross.attend(&mut g, store, q2, kc, vc, None)?;
                let y2 = residual_norm(&mut g, store, &block.n2, y1, c)?;
                let f = block.ff.forward(&mut g, store, y2)?;
                y = residual_norm(&mut g, store, &block.n3, y2, f)?;
            }
            let (a, lp) = self.layout.action_head.choose(&mut g, store, y, mode, rng)?;
            actions.extend_from_slice(&a);
            log_probs.push(lp);
            prev = Some(a);
        }
        Ok(ActOutput {
            actions,
            log_probs,
            values,
        })
    }

    fn end_step(&self, state: &mut KvCache, done: bool) {
        if done {
            state.layers.clear();
        }
    }

    fn peek_values(&self, obs: &Tensor, _timestep: usize, state: &KvCache) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let mut scratch = state.clone();
        let enc = self.encode_step(&mut g, obs, &mut scratch)?;
        let v = self.layout.value_head.forward(&mut g, &self.params, enc)?;
        Ok(g.value(v).to_vec())
    }

    fn evaluate(&self, g: &mut Graph, traj: &Trajectory, state: &KvCache, time_chunk_steps: usize) -> Result<JointEval> {
        traj.validate()?;
        if traj.n_agents != self.config.n_agents || traj.obs.cols() != self.config.obs_dim {
            return Err(SableError::dim("evaluate", format!("trajectory of {} agents", traj.n_agents)));
        }
        if time_chunk_steps == 0 {
            return Err(SableError::Config("time chunk must be at least one step".into()));
        }
        let episode = self.config.context == Context::Episode;
        if episode && state.tokens() > 0 {
            return Err(SableError::contract(
                "episode-context attention can only be re-evaluated from an empty cache",
            ));
        }
        let store = &self.params;
        let n = self.config.n_agents;
        let d = self.config.d_model;
        let l = traj.n_steps();
        let chunk = if episode { l } else { time_chunk_steps };
        let (inputs, smask) = self.layout.act_embed.shifted_inputs(&traj.actions, n)?;
        let (mut logps, mut ents, mut vals) = (Vec::new(), Vec::new(), Vec::new());
        let mut s0 = 0;
        while s0 < l {
            let len = chunk.min(l - s0);
            let t = len * n;
            let sub = traj.window(s0, len)?;
            let enc_mask = if episode {
                let spec = DecaySpec::new(n, 1.0, sub.dones.clone())?;
                let vis = build_encoder_decay(&spec);
                vis.map(|x| if x > 0.0 { 0.0 } else { f64::NEG_INFINITY })
            } else {
                additive_mask(t, t, |i, j| i / n == j / n)
            };
            let enc_mask = g.constant(enc_mask);
            let dec_mask = g.constant(additive_mask(t, t, |i, j| i / n == j / n && j <= i));
            let cross_mask = g.constant(additive_mask(t, t, |i, j| i / n == j / n));

            let mut x = self.layout.obs_embed.forward(g, store, &sub.obs, Tensor::zeros(&[t, d]))?;
            for block in &self.layout.encoder {
                let q = block.attn.project(g, store, x, block.attn.w_q)?;
                let k = block.attn.project(g, store, x, block.attn.w_k)?;
                let v = block.attn.project(g, store, x, block.attn.w_v)?;
                let a = block.attn.attend(g, store, q, k, v, Some(enc_mask))?;
                let y = residual_norm(g, store, &block.n1, x, a)?;
                let f = block.ff.forward(g, store, y)?;
                x = residual_norm(g, store, &block.n2, y, f)?;
            }
            vals.push(self.layout.value_head.forward(g, store, x)?);
            let inp = inputs.slice_rows(s0 * n, t)?;
            let m = smask.slice_rows(s0 * n, t)?;
            let mut y = self.layout.act_embed.forward(g, store, inp, m, Tensor::zeros(&[t, d]))?;
            for block in &self.layout.decoder {
                let q = block.self_attn.project(g, store, y, block.self_attn.w_q)?;
                let k = block.self_attn.project(g, store, y, block.self_attn.w_k)?;
                let v = block.self_attn.project(g, store, y, block.self_attn.w_v)?;
                let a = block.self_attn.attend(g, store, q, k, v, Some(dec_mask))?;
                let y1 = residual_norm(g, store, &block.n1, y, a)?;
                let q2 = block.cross.project(g, store, y1, block.cross.w_q)?;
                let kc = block.cross.project(g, store, x, block.cross.w_k)?;
                let vc = block.cross.project(g, store, x, block.cross.w_v)?;
                let c = block.cross.attend(g, store, q2, kc, vc, Some(cross_mask))?;
                let y2 = residual_norm(g, store, &block.n2, y1, c)?;
                let f = block.ff.forward(g, store, y2)?;
                y = residual_norm(g, store, &block.n3, y2, f)?;
            }
            let (lp, ent) = self.layout.action_head.log_prob_entropy(g, store, y, &sub.actions)?;
            logps.push(lp);
            ents.push(ent);
            s0 += len;
        }
        let cat = |g: &mut Graph, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat_rows(v) };
        Ok(JointEval {
            log_probs: cat(g, &logps)?,
            entropy: cat(g, &ents)?,
            values: cat(g, &vals)?,
        })
    }

    fn state_bytes(&self, state: &KvCache) -> usize {
        state.size_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: MatVariant, context: Context) -> MatConfig {
        MatConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            variant,
            context,
            action_space: ActionSpace::Discrete(3),
            obs_dim: 2,
            n_agents: 3,
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![0.3, -1.0]));
        let k = g.constant(Tensor::row(vec![2.0, 0.5]));
        let v = g.constant(Tensor::row(vec![4.0, -7.0]));
        let o = masked_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, -7.0]);
    }

    #[test]
    fn uniform_scores_average_visible_rows() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[3, 2]));
        let k = g.constant(Tensor::zeros(&[3, 2]));
        let v = g.constant(Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![6.0, 6.0]]).unwrap());
        let m = g.constant(additive_mask(3, 3, |i, j| j <= i));
        let o = masked_attention(&mut g, q, k, v, Some(m)).unwrap();
        let want = Tensor::from_rows(&[vec![3.0, 0.0], vec![1.5, 1.5], vec![3.0, 3.0]]).unwrap();
        assert!(g.value(o).max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn causal_mask_hides_later_tokens() {
        let build = |last: f64| {
            let mut g = Graph::new();
            let x = Tensor::from_fn(3, 2, |r, c| if r == 2 { last } else { (r + c) as f64 * 0.4 });
            let q = g.constant(x.clone());
            let k = g.constant(x.clone());
            let v = g.constant(x);
            let m = g.constant(additive_mask(3, 3, |i, j| j <= i));
            let o = masked_attention(&mut g, q, k, v, Some(m)).unwrap();
            g.value(o).slice_rows(0, 2).unwrap()
        };
        assert_eq!(build(1.0), build(-9.0));
    }

    #[test]
    fn variants_enumerate_all_four_combinations() {
        let names: Vec<String> = ablation_variants().iter().map(ToString::to_string).collect();
        assert_eq!(names, ["layer+plain", "rms+plain", "layer+swiglu", "rms+swiglu"]);
    }

    #[test]
    fn execution_matches_evaluation_for_every_variant() {
        use rand::SeedableRng;
        for variant in ablation_variants() {
            let net = MatLite::new(cfg(variant, Context::CurrentStep), 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut st = net.initial_state();
            let (mut obs, mut acts, mut lps, mut vals) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for _ in 0..4 {
                let o = normal_init(&mut rng, 3, 2, 1.0);
                let out = net.act(&o, 0, &mut st, ActMode::Sample, &mut rng).unwrap();
                obs.push(o);
                acts.extend(out.actions);
                lps.extend(out.log_probs);
                vals.extend(out.values);
            }
            let refs: Vec<&Tensor> = obs.iter().collect();
            let traj = Trajectory {
                n_agents: 3,
                obs: Tensor::concat_rows(&refs).unwrap(),
                actions: Tensor::new(&[12, 1], acts).unwrap(),
                timesteps: vec![0; 4],
                dones: vec![false; 4],
            };
            for chunk in [1, 2, 4] {
                let mut g = Graph::new();
                let e = net.evaluate(&mut g, &traj, &st, chunk).unwrap();
                let d = g.value(e.log_probs).to_vec().iter().zip(&lps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d < 1e-10, "{variant}: {d}");
                let dv = g.value(e.values).to_vec().iter().zip(&vals).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dv < 1e-10);
            }
        }
    }

    #[test]
    fn episode_cache_grows_and_resets() {
        use rand::SeedableRng;
        let variant = ablation_variants()[0];
        let net = MatLite::new(cfg(variant, Context::Episode), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = net.initial_state();
        let mut sizes = Vec::new();
        for t in 0..4 {
            let o = normal_init(&mut rng, 3, 2, 1.0);
            net.act(&o, t, &mut st, ActMode::Sample, &mut rng).unwrap();
            sizes.push(net.state_bytes(&st));
        }
        assert!(sizes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(st.tokens(), 12);
        net.end_step(&mut st, true);
        assert_eq!(st.tokens(), 0);
    }
}
