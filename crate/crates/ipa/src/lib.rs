//! Inference-time policy adapters: steer a frozen language model by fusing
//! its next-token distribution with a small adapter policy trained by
//! reinforcement learning, then decode from the normalized product.
//!
//! Everything runs at desk scale on synthetic character-level corpora: a
//! minimal tensor/autodiff core, a small transformer LM, the tailored
//! (product-of-experts) policy, Quark- and PPO-style adapter training,
//! programmatic rewards and metrics, sequence-level distillation for
//! approximate policies, and an experiment harness with a CLI.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod dist;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod par;
pub mod recipe;
pub mod report;
pub mod reward;
pub mod rl;
pub mod tailor;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, VariantManifest};
pub use decode::{sample_sequence, DecoderKind, DecoderSpec, NextTokenPolicy};
pub use dist::{kl_divergence, product_of_experts, Distribution};
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use lm::{train_mle, LmConfig, LmParams, MleConfig, Policy, Role};
pub use rl::{collect_rollouts, train, Algorithm, DataPool, Rollout, TrainConfig, TrainLog};
pub use tailor::{assemble_variant, IpaVariant, PolicySampler, TailoredPolicy};
pub use tape::{GradMap, Tape, Var};
pub use tensor::{Element, Tensor};
pub use vocab::Vocab;
