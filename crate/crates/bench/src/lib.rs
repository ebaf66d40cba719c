//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sable_core::attention::{ablation_variants, Context, MatConfig, MatLite};
use sable_core::envs::ActionSpace;
use sable_core::params::normal_init;
use sable_core::sable::{MemoryMode, Sable, SableConfig};
use sable_core::Tensor;

pub const OBS_DIM: usize = 5;

/// Query, key and value rows drawn from a standard normal.
pub fn qkv(tokens: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        normal_init(&mut rng, tokens, d, 1.0),
        normal_init(&mut rng, tokens, d, 1.0),
        normal_init(&mut rng, tokens, d, 1.0),
    )
}

pub fn observations(n_agents: usize, seed: u64) -> Tensor {
    normal_init(&mut ChaCha8Rng::seed_from_u64(seed), n_agents, OBS_DIM, 1.0)
}

pub fn sable(n_agents: usize, mode: MemoryMode) -> Sable {
    Sable::new(
        SableConfig {
            d_model: 32,
            n_heads: 1,
            n_blocks: 1,
            kappa_scale: 1.0,
            action_space: ActionSpace::Discrete(3),
            memory_mode: mode,
            obs_dim: OBS_DIM,
            n_agents,
        },
        0,
    )
    .expect("valid bench config")
}

pub fn mat_lite(n_agents: usize) -> MatLite {
    MatLite::new(
        MatConfig {
            d_model: 32,
            n_heads: 1,
            n_blocks: 1,
            variant: ablation_variants()[0],
            context: Context::CurrentStep,
            action_space: ActionSpace::Discrete(3),
            obs_dim: OBS_DIM,
            n_agents,
        },
        0,
    )
    .expect("valid bench config")
}
