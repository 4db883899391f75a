//! Task-aware mixture-of-experts on a toy autoregressive transformer.
//!
//! The crate builds, trains, and analyzes a small transformer whose FFN
//! sublayers are replaced by a task-aware MoE layer: a hard task router
//! splits tokens between two expert groups, a dynamic-assignment router
//! picks top-k experts inside the chosen group, and an always-on shared
//! expert (scaled by a learnable alpha) carries cross-task knowledge.
//! Training runs in two stages: per-task expert specialization first, then
//! MoE assembly plus low-rank-adapter fine-tuning on a mixed dual-task
//! stream.
//!
//! Everything sits on a self-contained float64 tensor engine with
//! reverse-mode autodiff ([`tensor`]), exercised end to end on a synthetic
//! dual-task benchmark ([`tasks`]) that pits order-invariant abstraction
//! against order-sensitive detail preservation.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `tamoe` binary for the full experiment pipelines.

pub mod anyres;
pub mod checkpoint;
pub mod error;
pub mod lora;
pub mod moe;
pub mod optim;
pub mod router;
pub mod tasks;
pub mod training;
pub mod transformer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{backward, grad_check, ComputationTape, Tensor};
