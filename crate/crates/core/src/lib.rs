//! Retention-based encoder-decoder policies for cooperative multi-agent
//! reinforcement learning.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod decay;
pub mod envs;
pub mod error;
pub mod params;
pub mod policy;
pub mod retention;
pub mod sable;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Result, SableError};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::{AllocationMeter, Graph, Tensor, Var};
