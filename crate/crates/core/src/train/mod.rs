//! Optimisation, checkpoints, the training loop and evaluation.

pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use eval::{load_model, evaluate, evaluate_csv, predict_mask, predict_probabilities};
pub use optim::{poly_lr, sgd_step, total_iterations, OptimizerState};
pub use trainer::{EpochRecord, TrainConfig, Trainer};
