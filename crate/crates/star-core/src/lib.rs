//! Cross-domain semantic skill transfer, end to end: paired synthetic
//! environments, scripted skill data, a skill-embedding VAE with
//! semantic and execution priors, KL-based cross-domain state matching,
//! and a hierarchical hybrid-action RL trainer with its baselines.

pub mod ckpt;
pub mod data;
pub mod env;
pub mod matching;
pub mod rl;
pub mod rng;
pub mod skillmodel;
pub mod tensor;

pub use env::{Domain, EnvPair, EnvSpec, SimEnv, SkillTable};
pub use tensor::{Graph, ParamSet, Tensor};
