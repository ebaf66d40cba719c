//! Retention in its recurrent, parallel and chunkwise forms, the per-step
//! encoder and per-agent decoder recurrences, and the multi-scale layer
//! built on top of them.
//!
//! Every kernel here records onto a [`Graph`], so the same code serves
//! inference (values only) and training (values and gradients). The
//! `retention_*` functions at the bottom wrap the kernels for plain tensors.

use std::sync::Arc;

use rand::Rng;

use crate::decay::ChunkDecay;
use crate::error::{Result, SableError};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const GROUP_NORM_EPS: f64 = 1e-8;
pub const RMS_NORM_EPS: f64 = 1e-6;

/// Multi-scale decay schedule: `κ_h = (1 - 2^-(5+h))^scale`.
pub fn head_kappas(n_heads: usize, kappa_scale: f64) -> Vec<f64> {
    (0..n_heads)
        .map(|h| (1.0 - 2f64.powi(-(5 + h as i32))).powf(kappa_scale))
        .collect()
}

/// One head of `(QKᵀ ⊙ D) V`.
pub fn parallel(g: &mut Graph, q: Var, k: Var, v: Var, decay: Var) -> Result<Var> {
    let s = g.matmul_nt(q, k)?;
    let sd = g.mul(s, decay)?;
    g.matmul(sd, v)
}

/// One head on one chunk, given the state carried from the previous chunk.
/// Returns the chunk output and the state to carry forward.
pub fn chunkwise(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    cd: &ChunkDecay,
    h_prev: Var,
) -> Result<(Var, Var)> {
    let t = g.shape(q)[0];
    if cd.tokens() != t || g.shape(k)[0] != t || g.shape(v)[0] != t {
        return Err(SableError::contract(format!(
            "chunk decay built for {} tokens, got q/k/v with {}/{}/{}",
            cd.tokens(),
            t,
            g.shape(k)[0],
            g.shape(v)[0]
        )));
    }
    let d = g.constant_shared(Arc::clone(&cd.decay));
    let inner = parallel(g, q, k, v, d)?;
    let xi = g.constant_shared(Arc::clone(&cd.xi));
    let qh = g.matmul(q, h_prev)?;
    let cross = g.mul(qh, xi)?;
    let out = g.add(inner, cross)?;

    let zeta = g.constant_shared(Arc::clone(&cd.zeta));
    let vz = g.mul(v, zeta)?;
    let kv = g.matmul_tn(k, vz)?;
    let h_new = if cd.carry == 0.0 {
        kv
    } else {
        let carried = g.scale(h_prev, cd.carry);
        g.add(kv, carried)?
    };
    Ok((out, h_new))
}

/// Single-token recurrence: `h_s = κ h_{s-1} + kᵀv`, output `q h_s`.
pub fn recurrent_token(g: &mut Graph, q: Var, k: Var, v: Var, h: Var, kappa: f64) -> Result<(Var, Var)> {
    if g.shape(q)[0] != 1 {
        return Err(SableError::dim("recurrent_token", format!("expected one token, got {:?}", g.shape(q))));
    }
    let kv = g.matmul_tn(k, v)?;
    let decayed = g.scale(h, kappa);
    let h_new = g.add(decayed, kv)?;
    let out = g.matmul(q, h_new)?;
    Ok((out, h_new))
}

/// One timestep of the encoder: `h_t = δ(κ h_{t-1} + K_tᵀ V_t)`, output
/// `Q_t (κ h_{t-1} + K_tᵀ V_t)`. All agents of the step mix fully.
pub fn encoder_step(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    h: Var,
    kappa: f64,
    terminal: bool,
) -> Result<(Var, Var)> {
    let kv = g.matmul_tn(k, v)?;
    let decayed = g.scale(h, kappa);
    let pre = g.add(decayed, kv)?;
    let out = g.matmul(q, pre)?;
    let h_new = if terminal {
        let shape = g.shape(pre).to_vec();
        g.constant(Tensor::zeros(&shape))
    } else {
        pre
    };
    Ok((out, h_new))
}

/// One agent inside a decoder timestep: `ĥ_i = ĥ_{i-1} + k_iᵀ v_i`, output
/// `q_i ĥ_i`. No decay is applied between agents of one step.
pub fn decoder_agent_step(g: &mut Graph, q: Var, k: Var, v: Var, h_hat: Var) -> Result<(Var, Var)> {
    if g.shape(q)[0] != 1 {
        return Err(SableError::dim(
            "decoder_agent_step",
            format!("expected one agent token, got {:?}", g.shape(q)),
        ));
    }
    let kv = g.matmul_tn(k, v)?;
    let h_new = g.add(h_hat, kv)?;
    let out = g.matmul(q, h_new)?;
    Ok((out, h_new))
}

/// Closes a decoder timestep: `h_t = δ(κ ĥ_N)`.
pub fn decoder_step_end(g: &mut Graph, h_hat: Var, kappa: f64, terminal: bool) -> Var {
    if terminal {
        let shape = g.shape(h_hat).to_vec();
        g.constant(Tensor::zeros(&shape))
    } else {
        g.scale(h_hat, kappa)
    }
}

/// Enforces in-order agent decoding within a timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentCursor {
    n_agents: usize,
    next: usize,
}

impl AgentCursor {
    pub fn new(n_agents: usize) -> Self {
        AgentCursor { n_agents, next: 0 }
    }

    /// Index the next call must use.
    pub fn expected(&self) -> usize {
        self.next
    }

    /// Accepts `agent` (0-based) if it is next in order. Returns true when it
    /// was the step's last agent, after which the cursor rewinds.
    pub fn advance(&mut self, agent: usize) -> Result<bool> {
        if agent != self.next {
            return Err(SableError::contract(format!(
                "decoded agent {agent} out of order, expected {}",
                self.next
            )));
        }
        self.next += 1;
        if self.next == self.n_agents {
            self.next = 0;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateRole {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

/// Per-head hidden matrices of one retention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionState {
    pub role: StateRole,
    pub heads: Vec<Tensor>,
}

impl RetentionState {
    pub fn zeros(role: StateRole, n_heads: usize, d_head: usize) -> Self {
        RetentionState {
            role,
            heads: (0..n_heads).map(|_| Tensor::zeros(&[d_head, d_head])).collect(),
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.heads.iter().map(Tensor::size_bytes).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(Tensor::is_finite)
    }

    pub fn reset(&mut self) {
        for h in &mut self.heads {
            h.data_mut().fill(0.0);
        }
    }

    /// Places every head on `g` as a constant.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.heads.iter().map(|h| g.constant(h.clone())).collect()
    }

    /// Reads head values back from `g`.
    pub fn store(&mut self, g: &Graph, vars: &[Var]) {
        for (h, &v) in self.heads.iter_mut().zip(vars) {
            *h = g.value(v).clone();
        }
    }
}

/// How the heads of a layer mix their tokens on this call.
pub enum Mixing<'a> {
    /// Chunkwise form with one decay object per head.
    Chunk(&'a [ChunkDecay]),
    /// One encoder timestep.
    EncoderStep { terminal: bool },
    /// One decoder agent; the step is closed separately.
    DecoderAgent,
}

/// Parameters of one multi-scale retention layer.
#[derive(Debug, Clone)]
pub struct MsrParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_g: ParamId,
    pub w_o: ParamId,
    pub gn_scale: ParamId,
    pub gn_shift: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
    pub kappas: Vec<f64>,
}

impl MsrParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        kappas: Vec<f64>,
    ) -> Result<Self> {
        let n_heads = kappas.len();
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(SableError::Config(format!(
                "{n_heads} heads do not divide d_model {d_model}"
            )));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = |store: &mut ParamStore, name: &str| {
            store.add(format!("{prefix}.{name}"), normal_init(rng, d_model, d_model, std))
        };
        let w_q = w(store, "w_q")?;
        let w_k = w(store, "w_k")?;
        let w_v = w(store, "w_v")?;
        let w_g = w(store, "w_g")?;
        let w_o = w(store, "w_o")?;
        let gn_scale = store.add(format!("{prefix}.gn_scale"), Tensor::ones(&[1, d_model]))?;
        let gn_shift = store.add(format!("{prefix}.gn_shift"), Tensor::zeros(&[1, d_model]))?;
        Ok(MsrParams {
            w_q,
            w_k,
            w_v,
            w_g,
            w_o,
            gn_scale,
            gn_shift,
            n_heads,
            d_model,
            kappas,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn zero_state(&self, role: StateRole) -> RetentionState {
        RetentionState::zeros(role, self.n_heads, self.d_head())
    }
}

/// Multi-scale retention: per-head retention, group norm over heads, swish
/// gate driven by `xk`, output projection. `state` holds one hidden matrix
/// per head and is advanced in place.
pub fn multi_scale_retention(
    g: &mut Graph,
    store: &ParamStore,
    p: &MsrParams,
    xq: Var,
    xk: Var,
    xv: Var,
    mixing: &Mixing<'_>,
    state: &mut [Var],
) -> Result<Var> {
    if g.shape(xk)[0] != g.shape(xv)[0] {
        return Err(SableError::dim(
            "multi_scale_retention",
            format!("key rows {} vs value rows {}", g.shape(xk)[0], g.shape(xv)[0]),
        ));
    }
    if state.len() != p.n_heads {
        return Err(SableError::contract(format!(
            "{} head states for {} heads",
            state.len(),
            p.n_heads
        )));
    }
    let (w_q, w_k, w_v) = (g.param(store, p.w_q), g.param(store, p.w_k), g.param(store, p.w_v));
    let q_all = g.matmul(xq, w_q)?;
    let q_all = g.scale(q_all, 1.0 / (p.d_head() as f64).sqrt());
    let k_all = g.matmul(xk, w_k)?;
    let v_all = g.matmul(xv, w_v)?;
    let dh = p.d_head();
    let mut outs = Vec::with_capacity(p.n_heads);
    for (h, &kappa) in p.kappas.iter().enumerate() {
        let q = g.slice_cols(q_all, h * dh, dh)?;
        let k = g.slice_cols(k_all, h * dh, dh)?;
        let v = g.slice_cols(v_all, h * dh, dh)?;
        let (out, h_new) = match mixing {
            Mixing::Chunk(decays) => {
                let cd = decays.get(h).ok_or_else(|| {
                    SableError::contract(format!("no chunk decay for head {h}"))
                })?;
                chunkwise(g, q, k, v, cd, state[h])?
            }
            Mixing::EncoderStep { terminal } => encoder_step(g, q, k, v, state[h], kappa, *terminal)?,
            Mixing::DecoderAgent => decoder_agent_step(g, q, k, v, state[h])?,
        };
        state[h] = h_new;
        outs.push(out);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let (gs, gb) = (g.param(store, p.gn_scale), g.param(store, p.gn_shift));
    let normed = g.group_norm(cat, p.n_heads, gs, gb, GROUP_NORM_EPS)?;
    let w_g = g.param(store, p.w_g);
    let gate_pre = g.matmul(xk, w_g)?;
    let gate = g.swish(gate_pre);
    let gated = g.mul(gate, normed)?;
    let w_o = g.param(store, p.w_o);
    g.matmul(gated, w_o)
}

/// Closes a decoder timestep for every head of a layer.
pub fn close_decoder_step(g: &mut Graph, p: &MsrParams, state: &mut [Var], terminal: bool) {
    for (h, &kappa) in p.kappas.iter().enumerate() {
        state[h] = decoder_step_end(g, state[h], kappa, terminal);
    }
}

/// Retention sublayer with its residual and norm: `rms(xq + MSR(xq, xk, xv))`.
#[derive(Debug, Clone)]
pub struct RetentionSublayer {
    pub msr: MsrParams,
    pub norm: ParamId,
}

impl RetentionSublayer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        kappas: Vec<f64>,
    ) -> Result<Self> {
        let msr = MsrParams::register(store, rng, &format!("{prefix}.msr"), d_model, kappas)?;
        let norm = store.add(format!("{prefix}.norm"), Tensor::ones(&[1, d_model]))?;
        Ok(RetentionSublayer { msr, norm })
    }

    /// Cross form: query stream `xq`, key/value streams `xk`, `xv`. Passing
    /// the same stream three times gives self-retention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xk: Var,
        xv: Var,
        mixing: &Mixing<'_>,
        state: &mut [Var],
    ) -> Result<Var> {
        let r = multi_scale_retention(g, store, &self.msr, xq, xk, xv, mixing, state)?;
        let res = g.add(xq, r)?;
        let scale = g.param(store, self.norm);
        g.rms_norm(res, scale, RMS_NORM_EPS)
    }
}

/// Gated feed-forward: `(swish(x W1) ⊙ (x W2)) W3`.
#[derive(Debug, Clone)]
pub struct SwiGlu {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

impl SwiGlu {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        let s_in = 1.0 / (d_model as f64).sqrt();
        let s_out = 1.0 / (d_ff as f64).sqrt();
        Ok(SwiGlu {
            w1: store.add(format!("{prefix}.w1"), normal_init(rng, d_model, d_ff, s_in))?,
            w2: store.add(format!("{prefix}.w2"), normal_init(rng, d_model, d_ff, s_in))?,
            w3: store.add(format!("{prefix}.w3"), normal_init(rng, d_ff, d_model, s_out))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, w2, w3) = (g.param(store, self.w1), g.param(store, self.w2), g.param(store, self.w3));
        let a = g.matmul(x, w1)?;
        let a = g.swish(a);
        let b = g.matmul(x, w2)?;
        let ab = g.mul(a, b)?;
        g.matmul(ab, w3)
    }
}

/// Feed-forward sublayer: `rms(x + SwiGLU(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub ff: SwiGlu,
    pub norm: ParamId,
}

impl FeedForward {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
    ) -> Result<Self> {
        let ff = SwiGlu::register(store, rng, &format!("{prefix}.swiglu"), d_model, 2 * d_model)?;
        let norm = store.add(format!("{prefix}.norm"), Tensor::ones(&[1, d_model]))?;
        Ok(FeedForward { ff, norm })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.ff.forward(g, store, x)?;
        let res = g.add(x, f)?;
        let scale = g.param(store, self.norm);
        g.rms_norm(res, scale, RMS_NORM_EPS)
    }
}

/// Full retention block: self-retention sublayer then feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct MultiScaleBlock {
    pub retention: RetentionSublayer,
    pub ffn: FeedForward,
}

impl MultiScaleBlock {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        kappas: Vec<f64>,
    ) -> Result<Self> {
        Ok(MultiScaleBlock {
            retention: RetentionSublayer::register(store, rng, &format!("{prefix}.ret"), d_model, kappas)?,
            ffn: FeedForward::register(store, rng, &format!("{prefix}.ffn"), d_model)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mixing: &Mixing<'_>,
        state: &mut [Var],
    ) -> Result<Var> {
        let y = self.retention.forward(g, store, x, x, x, mixing, state)?;
        self.ffn.forward(g, store, y)
    }
}

fn check_head(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows() {
        return Err(SableError::dim(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(())
}

/// Single-head recurrent retention on plain tensors. Returns the output row
/// and the new state.
pub fn retention_recurrent(q: &Tensor, k: &Tensor, v: &Tensor, h: &Tensor, kappa: f64) -> Result<(Tensor, Tensor)> {
    check_head("retention_recurrent", q, k, v)?;
    let mut g = Graph::new();
    let (qv, kv, vv, hv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), g.constant(h.clone()));
    let (o, hn) = recurrent_token(&mut g, qv, kv, vv, hv, kappa)?;
    Ok((g.value(o).clone(), g.value(hn).clone()))
}

/// Single-head parallel retention on plain tensors.
pub fn retention_parallel(q: &Tensor, k: &Tensor, v: &Tensor, decay: &Tensor) -> Result<Tensor> {
    check_head("retention_parallel", q, k, v)?;
    if decay.shape() != [q.rows(), k.rows()] {
        return Err(SableError::dim(
            "retention_parallel",
            format!("decay {:?} for {} tokens", decay.shape(), q.rows()),
        ));
    }
    let mut g = Graph::new();
    let (qv, kv, vv, dv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), g.constant(decay.clone()));
    let o = parallel(&mut g, qv, kv, vv, dv)?;
    Ok(g.value(o).clone())
}

/// Single-head chunkwise retention on plain tensors.
pub fn retention_chunkwise(q: &Tensor, k: &Tensor, v: &Tensor, cd: &ChunkDecay, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    check_head("retention_chunkwise", q, k, v)?;
    let mut g = Graph::new();
    let (qv, kv, vv, hv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), g.constant(h_prev.clone()));
    let (o, hn) = chunkwise(&mut g, qv, kv, vv, cd, hv)?;
    Ok((g.value(o).clone(), g.value(hn).clone()))
}
