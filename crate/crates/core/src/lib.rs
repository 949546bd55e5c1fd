//! Desk-scale tactile reinforcement learning workbench.
//!
//! The crate trains PPO agents jointly with self-supervised auxiliary
//! objectives (tactile reconstruction, full reconstruction, latent forward
//! dynamics, tactile forward dynamics) on vectorized 2D contact environments
//! where the agent senses the world only through proprioception and binary
//! contact flags. It also ships the separated auxiliary memory, a
//! representation-analysis suite (KSG mutual information, PCA, tactile
//! prediction metrics), and a training/evaluation/sweep harness.
//!
//! Module map:
//! - [`numerics`]: matrices, reverse-mode autodiff for MLPs, Adam, EMA,
//!   running normalization statistics.
//! - [`envs`]: Find-2D / Bounce-2D / Orbit-2D vectorized contact environments.
//! - [`agent`]: shared observation encoder, Gaussian policy, value function.
//! - [`ppo`]: rollout collection, GAE, the clipped PPO update.
//! - [`ssl`]: the four auxiliary objectives and their networks.
//! - [`auxmem`]: the separated auxiliary memory ring.
//! - [`analysis`]: KSG mutual information, PCA, classification metrics,
//!   latent trajectory export.
//! - [`harness`]: run configs, training/eval/sweep drivers, checkpoints,
//!   metrics logging.

pub mod agent;
pub mod analysis;
pub mod auxmem;
pub mod envs;
pub mod harness;
pub mod numerics;
pub mod ppo;
pub mod ssl;
