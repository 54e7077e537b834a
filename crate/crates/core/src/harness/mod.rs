//! Synthetic data, training, evaluation, attention export and ablations.

pub mod ablation;
pub mod data;
pub mod eval;
pub mod export;
pub mod optim;
pub mod train;
