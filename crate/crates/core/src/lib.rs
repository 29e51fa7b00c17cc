//! Attention-map reuse laboratory for diffusion sampling.
//!
//! A tiny conditional ε-prediction denoiser with tap points on its self- and
//! cross-attention maps, a DDIM / second-order multistep sampler that honours
//! a per-step reuse strategy, the HURRY and PHAST strategy constructions with
//! an exhaustive oracle, perturbation-decay analysis and a per-call latency
//! model.

pub mod analysis;
pub mod compare;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod reuse;
pub mod sampler;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use metrics::{psnr, CostModel, CostTally};
pub use model::{AttentionSite, ModelWeights, PromptSpec};
pub use reuse::{Precision, ReuseConfig, ReuseTarget, StrategyVector};
pub use sampler::{NoiseSchedule, SampleResult, SamplerConfig, Solver};
pub use tensor::{DenseArray, SeededRng, Shape};
