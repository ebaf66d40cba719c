//! Decay matrices and chunk-boundary weights for agent-timestep sequences.
//!
//! Tokens are laid out timestep-major: token `i` belongs to timestep `i / N`
//! and agent `i % N`. All agents of one timestep share the same decay, and a
//! termination flag on timestep `t` severs every path from tokens at steps
//! `<= t` to tokens at steps `> t`.
//!
//! Two state conventions exist for carrying a hidden state across chunks:
//! the encoder keeps `h_t = κ h_{t-1} + KᵀV` (decay applied on entry), while
//! the decoder keeps `h_t = κ ĥ_N` (decay applied on exit). They produce the
//! same outputs but need different boundary weights, both built here.

use std::sync::Arc;

use crate::error::{Result, SableError};
use crate::tensor::Tensor;

/// Shape and termination pattern of one chunk of agent-timestep tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DecaySpec {
    pub n_agents: usize,
    pub n_timesteps: usize,
    pub kappa: f64,
    /// `terminations[t]` is true when the episode ends at timestep `t`.
    pub terminations: Vec<bool>,
}

impl DecaySpec {
    pub fn new(n_agents: usize, kappa: f64, terminations: Vec<bool>) -> Result<Self> {
        let spec = DecaySpec {
            n_agents,
            n_timesteps: terminations.len(),
            kappa,
            terminations,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_terminations(n_agents: usize, n_timesteps: usize, kappa: f64) -> Result<Self> {
        Self::new(n_agents, kappa, vec![false; n_timesteps])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_timesteps == 0 {
            return Err(SableError::contract("decay spec needs at least one agent and one timestep"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(SableError::contract(format!(
                "decay rate {} outside (0, 1]",
                self.kappa
            )));
        }
        if self.terminations.len() != self.n_timesteps {
            return Err(SableError::contract(format!(
                "{} termination flags for {} timesteps",
                self.terminations.len(),
                self.n_timesteps
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.n_agents * self.n_timesteps
    }

    pub fn first_termination(&self) -> Option<usize> {
        self.terminations.iter().position(|&d| d)
    }

    /// The sub-chunk covering timesteps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<DecaySpec> {
        if start + len > self.n_timesteps {
            return Err(SableError::contract(format!(
                "window {start}+{len} exceeds {} timesteps",
                self.n_timesteps
            )));
        }
        DecaySpec::new(
            self.n_agents,
            self.kappa,
            self.terminations[start..start + len].to_vec(),
        )
    }

    /// True when some termination lies in `from..to` (timesteps).
    fn terminates_between(&self, from: usize, to: usize) -> bool {
        self.terminations[from..to].iter().any(|&d| d)
    }

    fn chunk_steps(&self, chunk_tokens: usize) -> Result<usize> {
        if chunk_tokens == 0 || !chunk_tokens.is_multiple_of(self.n_agents) {
            return Err(SableError::contract(format!(
                "chunk of {chunk_tokens} tokens is not a whole number of {}-agent timesteps",
                self.n_agents
            )));
        }
        let steps = chunk_tokens / self.n_agents;
        if steps > self.n_timesteps {
            return Err(SableError::contract(format!(
                "chunk of {steps} timesteps exceeds the {} described",
                self.n_timesteps
            )));
        }
        Ok(steps)
    }
}

fn masked_decay(spec: &DecaySpec, causal: impl Fn(usize, usize) -> bool) -> Tensor {
    let n = spec.n_agents;
    let t = spec.tokens();
    // prefix count of terminations lets each pair test the mask in O(1)
    let mut ends_before = vec![0usize; spec.n_timesteps + 1];
    for (s, &d) in spec.terminations.iter().enumerate() {
        ends_before[s + 1] = ends_before[s] + usize::from(d);
    }
    Tensor::from_fn(t, t, |i, j| {
        if !causal(i, j) {
            return 0.0;
        }
        let (ti, tj) = (i / n, j / n);
        // a termination at step s with tj <= s < ti sits between the two tokens
        if ends_before[ti] - ends_before[tj] > 0 {
            return 0.0;
        }
        spec.kappa.powi((ti - tj) as i32)
    })
}

/// Decoder decay: token-causal, per-timestep decay, termination-masked.
pub fn build_decoder_decay(spec: &DecaySpec) -> Tensor {
    masked_decay(spec, |i, j| i >= j)
}

/// Encoder decay: full `N×N` blocks within each timestep, causal across
/// timesteps, termination-masked.
pub fn build_encoder_decay(spec: &DecaySpec) -> Tensor {
    let n = spec.n_agents;
    masked_decay(spec, |i, j| i / n >= j / n)
}

/// Weight of the carried (encoder-convention) state for every token of the
/// first `chunk_tokens` tokens: `κ^(step+1)` up to and including the first
/// terminal timestep, zero afterwards.
pub fn build_xi(spec: &DecaySpec, chunk_tokens: usize) -> Result<Tensor> {
    boundary_in(spec, chunk_tokens, 1)
}

/// Weight of each token's `KᵀV` in the (encoder-convention) state at chunk
/// end: the last row of the chunk's masked decay matrix. A termination on the
/// final timestep zeroes every entry, since the state after it is reset.
pub fn build_zeta(spec: &DecaySpec, chunk_tokens: usize) -> Result<Tensor> {
    boundary_out(spec, chunk_tokens, 0)
}

/// `κ^(timesteps)` when the chunk has no termination, otherwise 0.
pub fn chunk_carry_factor(spec: &DecaySpec, timesteps_per_chunk: usize) -> Result<f64> {
    if timesteps_per_chunk == 0 || timesteps_per_chunk > spec.n_timesteps {
        return Err(SableError::contract(format!(
            "chunk of {timesteps_per_chunk} timesteps for a spec of {}",
            spec.n_timesteps
        )));
    }
    if spec.terminates_between(0, timesteps_per_chunk) {
        Ok(0.0)
    } else {
        Ok(spec.kappa.powi(timesteps_per_chunk as i32))
    }
}

fn boundary_in(spec: &DecaySpec, chunk_tokens: usize, offset: i32) -> Result<Tensor> {
    spec.validate()?;
    let steps = spec.chunk_steps(chunk_tokens)?;
    let first_end = spec.terminations[..steps].iter().position(|&d| d);
    let n = spec.n_agents;
    Ok(Tensor::column(
        (0..chunk_tokens)
            .map(|j| {
                let s = j / n;
                match first_end {
                    Some(td) if s > td => 0.0,
                    _ => spec.kappa.powi(s as i32 + offset),
                }
            })
            .collect(),
    ))
}

fn boundary_out(spec: &DecaySpec, chunk_tokens: usize, offset: i32) -> Result<Tensor> {
    spec.validate()?;
    let steps = spec.chunk_steps(chunk_tokens)?;
    let n = spec.n_agents;
    Ok(Tensor::column(
        (0..chunk_tokens)
            .map(|j| {
                let s = j / n;
                if spec.terminates_between(s, steps) {
                    0.0
                } else {
                    spec.kappa.powi((steps - 1 - s) as i32 + offset)
                }
            })
            .collect(),
    ))
}

/// Which hidden-state convention a chunk is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

/// Everything chunkwise retention needs for one head on one chunk.
#[derive(Debug, Clone)]
pub struct ChunkDecay {
    pub decay: Arc<Tensor>,
    pub xi: Arc<Tensor>,
    pub zeta: Arc<Tensor>,
    pub carry: f64,
}

impl ChunkDecay {
    pub fn tokens(&self) -> usize {
        self.decay.rows()
    }

    /// Weights for a group of `agents` tokens inside one timestep of a
    /// memoryless model: no decay between groups, causal (decoder) or full
    /// (encoder) mixing within the group.
    pub fn agent_group(agents: usize, role: Role) -> ChunkDecay {
        let decay = match role {
            Role::Encoder => Tensor::ones(&[agents, agents]),
            Role::Decoder => Tensor::from_fn(agents, agents, |i, j| if i >= j { 1.0 } else { 0.0 }),
        };
        ChunkDecay {
            decay: Arc::new(decay),
            xi: Arc::new(Tensor::ones(&[agents, 1])),
            zeta: Arc::new(Tensor::ones(&[agents, 1])),
            carry: 1.0,
        }
    }
}

/// All decay objects for one chunk.
#[derive(Debug, Clone)]
pub struct DecayArtifacts {
    pub d_encoder: Arc<Tensor>,
    pub d_decoder: Arc<Tensor>,
    /// ξ for the encoder state convention.
    pub xi: Arc<Tensor>,
    /// ζ for the encoder state convention.
    pub zeta: Arc<Tensor>,
    /// ξ for the decoder convention (`κ^step`).
    pub xi_decoder: Arc<Tensor>,
    /// ζ for the decoder convention (`κ^(steps-step)`).
    pub zeta_decoder: Arc<Tensor>,
    pub chunk_carry_power: f64,
}

impl DecayArtifacts {
    pub fn build(spec: &DecaySpec) -> Result<Self> {
        spec.validate()?;
        let t = spec.tokens();
        Ok(DecayArtifacts {
            d_encoder: Arc::new(build_encoder_decay(spec)),
            d_decoder: Arc::new(build_decoder_decay(spec)),
            xi: Arc::new(build_xi(spec, t)?),
            zeta: Arc::new(build_zeta(spec, t)?),
            xi_decoder: Arc::new(boundary_in(spec, t, 0)?),
            zeta_decoder: Arc::new(boundary_out(spec, t, 1)?),
            chunk_carry_power: chunk_carry_factor(spec, spec.n_timesteps)?,
        })
    }

    pub fn for_role(&self, role: Role) -> ChunkDecay {
        match role {
            Role::Encoder => ChunkDecay {
                decay: Arc::clone(&self.d_encoder),
                xi: Arc::clone(&self.xi),
                zeta: Arc::clone(&self.zeta),
                carry: self.chunk_carry_power,
            },
            Role::Decoder => ChunkDecay {
                decay: Arc::clone(&self.d_decoder),
                xi: Arc::clone(&self.xi_decoder),
                zeta: Arc::clone(&self.zeta_decoder),
                carry: self.chunk_carry_power,
            },
        }
    }

    /// Builds only what `role` needs.
    pub fn chunk(spec: &DecaySpec, role: Role) -> Result<ChunkDecay> {
        spec.validate()?;
        let t = spec.tokens();
        let carry = chunk_carry_factor(spec, spec.n_timesteps)?;
        Ok(match role {
            Role::Encoder => ChunkDecay {
                decay: Arc::new(build_encoder_decay(spec)),
                xi: Arc::new(build_xi(spec, t)?),
                zeta: Arc::new(build_zeta(spec, t)?),
                carry,
            },
            Role::Decoder => ChunkDecay {
                decay: Arc::new(build_decoder_decay(spec)),
                xi: Arc::new(boundary_in(spec, t, 0)?),
                zeta: Arc::new(boundary_out(spec, t, 1)?),
                carry,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exponent_matrix(t: &Tensor, kappa: f64) -> Vec<Vec<Option<i32>>> {
        (0..t.rows())
            .map(|i| {
                (0..t.cols())
                    .map(|j| {
                        let v = t.get(i, j);
                        if v == 0.0 {
                            None
                        } else {
                            Some((v.ln() / kappa.ln()).round() as i32)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_agent_reduces_to_standard_retention_decay() {
        let spec = DecaySpec::without_terminations(1, 5, 0.7).unwrap();
        let d = build_decoder_decay(&spec);
        for s in 0..5 {
            for m in 0..5 {
                let want = if s >= m { 0.7f64.powi((s - m) as i32) } else { 0.0 };
                assert!((d.get(s, m) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_kappa_gives_lower_triangular_ones() {
        let spec = DecaySpec::without_terminations(3, 3, 1.0).unwrap();
        let d = build_decoder_decay(&spec);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(d.get(i, j), if i >= j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_agent_encoder_by_hand() {
        let spec = DecaySpec::without_terminations(2, 2, 0.5).unwrap();
        let want = Tensor::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.5, 0.5, 1.0, 1.0],
            vec![0.5, 0.5, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(build_encoder_decay(&spec), want);
    }

    #[test]
    fn xi_zeta_small_cases() {
        let spec = DecaySpec::without_terminations(1, 3, 0.5).unwrap();
        assert_eq!(build_xi(&spec, 3).unwrap().data(), &[0.5, 0.25, 0.125]);
        assert_eq!(build_zeta(&spec, 3).unwrap().data(), &[0.25, 0.5, 1.0]);
        let ones = DecaySpec::without_terminations(2, 3, 1.0).unwrap();
        assert!(build_zeta(&ones, 6).unwrap().data().iter().all(|&z| z == 1.0));

        let first = DecaySpec::new(2, 0.5, vec![true, false, false]).unwrap();
        assert_eq!(build_xi(&first, 6).unwrap().data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn indivisible_chunk_is_contract_error() {
        let spec = DecaySpec::without_terminations(3, 4, 0.9).unwrap();
        assert!(matches!(build_xi(&spec, 7), Err(SableError::Contract(_))));
        assert!(matches!(build_zeta(&spec, 5), Err(SableError::Contract(_))));
    }

    #[test]
    fn carry_factor() {
        let spec = DecaySpec::without_terminations(3, 4, 0.9).unwrap();
        assert!((chunk_carry_factor(&spec, 4).unwrap() - 0.6561).abs() < 1e-15);
        let ended = DecaySpec::new(3, 0.9, vec![false, false, true, false]).unwrap();
        assert_eq!(chunk_carry_factor(&ended, 4).unwrap(), 0.0);
        let unit = DecaySpec::without_terminations(2, 4, 1.0).unwrap();
        assert_eq!(chunk_carry_factor(&unit, 4).unwrap(), 1.0);
    }

    #[test]
    fn invalid_kappa_rejected() {
        assert!(DecaySpec::new(2, -0.5, vec![false]).is_err());
        assert!(DecaySpec::new(2, 0.0, vec![false]).is_err());
        assert!(DecaySpec::new(2, 1.5, vec![false]).is_err());
    }

    #[test]
    fn terminal_final_step_zeroes_zeta() {
        let spec = DecaySpec::new(2, 0.5, vec![false, true]).unwrap();
        assert!(build_zeta(&spec, 4).unwrap().data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn decoder_convention_is_shifted_by_one_step() {
        let spec = DecaySpec::new(2, 0.8, vec![false, false, true, false]).unwrap();
        let art = DecayArtifacts::build(&spec).unwrap();
        for j in 0..8 {
            let (x, xd) = (art.xi.data()[j], art.xi_decoder.data()[j]);
            assert!((x - 0.8 * xd).abs() < 1e-15);
            let (z, zd) = (art.zeta.data()[j], art.zeta_decoder.data()[j]);
            assert!((zd - 0.8 * z).abs() < 1e-15);
        }
    }

    fn spec_strategy() -> impl Strategy<Value = DecaySpec> {
        (1usize..=6, 1usize..=16, prop::sample::select(vec![0.3, 0.5, 0.8, 1.0]))
            .prop_flat_map(|(n, l, k)| {
                prop::collection::vec(prop::bool::weighted(0.2), l)
                    .prop_map(move |d| DecaySpec::new(n, k, d).unwrap())
            })
    }

    proptest! {
        #[test]
        fn matrices_satisfy_structural_invariants(spec in spec_strategy()) {
            let n = spec.n_agents;
            let dec = build_decoder_decay(&spec);
            let enc = build_encoder_decay(&spec);
            let t = spec.tokens();
            for i in 0..t {
                for j in 0..t {
                    for m in [&dec, &enc] {
                        let v = m.get(i, j);
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                    if j > i { prop_assert_eq!(dec.get(i, j), 0.0); }
                    if j / n > i / n { prop_assert_eq!(enc.get(i, j), 0.0); }
                    if i / n == j / n { prop_assert_eq!(enc.get(i, j), 1.0); }
                    // termination mask
                    for (td, &d) in spec.terminations.iter().enumerate() {
                        if d && i >= n * (td + 1) && n * (td + 1) > j {
                            prop_assert_eq!(dec.get(i, j), 0.0);
                            prop_assert_eq!(enc.get(i, j), 0.0);
                        }
                    }
                }
            }
            // agents of one timestep see identical block-aggregated rows
            for i in 0..t {
                let i2 = (i / n) * n;
                for blk in 0..spec.n_timesteps {
                    let a: f64 = (0..n).map(|k| enc.get(i, blk * n + k)).sum();
                    let b: f64 = (0..n).map(|k| enc.get(i2, blk * n + k)).sum();
                    prop_assert_eq!(a, b);
                }
            }
            let xi = build_xi(&spec, t).unwrap();
            if let Some(td) = spec.first_termination() {
                for j in n * (td + 1)..t { prop_assert_eq!(xi.data()[j], 0.0); }
            }
            let zeta = build_zeta(&spec, t).unwrap();
            let last = spec.n_timesteps - 1;
            if !spec.terminations[last] {
                for j in 0..t {
                    prop_assert_eq!(zeta.data()[j], enc.get(t - 1, j));
                }
            }
        }
    }

    #[test]
    fn exponents_match_timestep_difference() {
        let spec = DecaySpec::new(3, 0.5, vec![false, true, false, false]).unwrap();
        let e = exponent_matrix(&build_encoder_decay(&spec), 0.5);
        assert_eq!(e[3][2], Some(1));
        assert_eq!(e[3][0], Some(1));
        assert_eq!(e[6][5], None);
    }
}
