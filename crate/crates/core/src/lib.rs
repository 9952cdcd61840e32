//! Teacher/student signalling games with randomized communication channels.
//!
//! Agents are small recurrent networks trained by differentiable self-play.
//! Message mutation and channel permutation randomize the protocol an agent
//! is exposed to during training, and the evaluation module measures how well
//! independently trained agents cooperate when they meet for the first time.

pub mod agent;
pub mod analysis;
pub mod autodiff;
pub mod channel;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod optim;
pub mod rollout;
pub mod seeds;
pub mod tensor;
pub mod training;

pub use agent::{Activation, PolicyConfig, PolicyParams};
pub use channel::{ChannelConfig, ChannelMode, Mutation, Permutation, TemperatureSchedule};
pub use env::{EpisodeTrace, ObservationSpace};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use training::{LossSet, TrainConfig};
