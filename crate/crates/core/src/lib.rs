//! Orthogonally regularized groups of low-rank adapters on a frozen vision
//! transformer, with the training, evaluation and diagnostic machinery around
//! them.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod numerics;
pub mod pego;
pub mod report;
pub mod trainer;
pub mod vit;

pub use data::{DataConfig, Domain, DomainDataset, Sample, SampleId};
pub use error::{PegoError, Result};
pub use numerics::{Matrix, Rng};
pub use pego::{
    final_loss, inject_groups, loss_diversify, loss_or, loss_preserve, merge_all, strip_adapters, AdaptedLinear,
    LoraGroup, LoraModule, Objective,
};
pub use trainer::TrainConfig;
pub use vit::{init_vit, VitConfig, VitModel};
