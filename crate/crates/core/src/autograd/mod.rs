//! Reverse-mode differentiation of the model and its objective.
//!
//! The forward pass is written once against [`Ops`]; [`Eager`] evaluates it
//! directly and [`Tape`] records it for [`Tape::backward`].

mod check;
mod eager;
pub mod ops;
mod tape;

pub use check::{
    backward, backward_with, central_difference, finite_diff, grad_check, gradcheck_fixture, l1_arguments,
    GradCheckReport, GradientSet, ParamRef, Probe, REL_ERROR_FLOOR,
};
pub use eager::Eager;
pub use ops::Ops;
pub use tape::{is_adapter_trainable, Fault, NodeId, Tape, Trainable};
