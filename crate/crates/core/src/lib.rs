//! Episodic few-shot classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode differentiation, Adam/RAdam and the
//!   orthonormal-basis kernels.
//! * [`embeddings`]: identity, MLP and small convolutional backbones.
//! * [`heads`]: Baseline, Baseline++, MatchingNet, ProtoNet, RelationNet and
//!   SubspaceNet classification rules.
//! * [`episodes`]: datasets, augmentation, synthetic domain shift and
//!   N-way K-shot sampling.
//! * [`training`]: pre-training, episodic meta-training and fine-tuning.
//! * [`evaluation`]: meta-testing with confidence intervals, confusion
//!   matrices and per-class precision.

// NaN must fail validation, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod embeddings;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod numerics;
pub mod training;

pub use checkpoint::{fingerprint, Checkpoint};
pub use embeddings::{build_backbone, Backbone, BackboneConfig};
pub use episodes::{DatasetTable, Episode, Item, ShiftConfig};
pub use error::{Error, Result};
pub use evaluation::{format_cell, meta_test, EvalReport, MetaTestConfig};
pub use heads::{HeadConfig, HeadKind, HeadState, SupportSet};
pub use numerics::{OptimizerConfig, OptimizerKind, ParamSet, Tensor};
pub use training::{fine_tune, meta_train, pretrain_baseline, Phase, TrainLog, TrainSchedule};
