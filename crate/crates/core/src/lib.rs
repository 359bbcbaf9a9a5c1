//! Reward-driven post-training for autoregressive multi-view diffusion world models.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nft;
pub mod oracle;
pub mod ops;
pub mod rewards;
pub mod rng;
pub mod rollout;
pub mod tensor;
pub mod trainer;
pub mod world;
pub mod world_model;

pub use error::{Error, Result};
pub use config::TrainConfig;
pub use denoiser::{Conditioning, DenoiserLayout, DenoiserParams, Gradients};
pub use diffusion::{SamplerConfig, SigmaDistribution};
pub use eval::{EloState, PairedResult, Vote};
pub use nft::{ReferencePolicy, Reduction};
pub use rewards::{GroupRewards, MetricRow, MetricWeights, Scorer};
pub use rollout::{PrefixStrategy, SelectionPolicy, StepReport};
pub use tensor::{Clip, ClipShape, NoisyClip};
pub use trainer::PosttrainState;
pub use world::{Dataset, Episode, WorldConfig};
pub use world_model::{DiffusionModel, HistoryBuffer, ModelConfig};
