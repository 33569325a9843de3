//! Reverse-mode differentiation over the shift primitives.

mod grad_check;
mod sgd;
mod tape;
mod train;

pub use grad_check::{
    check_gradients, check_gradients_with_step, grad_check, grad_check_all, grad_check_with_step, GradCheckReport,
    GradOp, Objective, GRAD_TOLERANCE,
};
pub use sgd::{Sgd, SgdConfig};
pub use tape::{GradTape, Gradients, Seed};
pub use train::{synthetic_dataset, train_toy, CurvePoint, ToyDataset, TrainConfig, TrainingCurve};
