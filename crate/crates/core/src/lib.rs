//! A desk-scale laboratory for studying what RL post-training actually
//! changes in a reasoning model.
//!
//! The pipeline trains a small character-level transformer on synthetic
//! modular-arithmetic chains, trains an RL teacher from it with group
//! relative policy optimization, and then dissects the difference:
//!
//! * token-level divergence taxonomy (where do base and teacher disagree,
//!   and how deep in the base's ranking does the teacher's choice sit?),
//! * counterfactual decoding probes (oracle / random / entropy-gated token
//!   substitution),
//! * compression of the teacher's correction into a tiny low-rank adapter
//!   by top-k KL distillation, and
//! * an RL-free procedure that reproduces the teacher from the base model
//!   alone: advantage-weighted updates at high-entropy decision tokens,
//!   plus a KL anchor to the base everywhere else.
//!
//! Everything is seeded and single-threaded; a rerun with the same config
//! produces bit-identical artifacts.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod divergence;
pub mod error;
pub mod optim;
pub mod grpo;
pub mod infer;
pub mod intervention;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod reasonmaxxer;
pub mod report;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod tasks;
pub mod tol;

pub use error::{Error, Result};
