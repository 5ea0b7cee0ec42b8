//! The two desk-scale benchmark tasks — next-token language modelling and
//! 2-D grid classification — plus the shared transformer backbone, data
//! generators, training steps and evaluation routines.

pub mod backbone;
pub mod corpus;
pub mod grid2d;
pub mod lm;
pub mod train;

pub use corpus::Corpus;
pub use grid2d::{synth2d_generate, GridClassifier, GridClassifierConfig, GridDataset, GridSample};
pub use lm::{base_window, TinyLm, TinyLmConfig};
pub use train::{
    eval_accuracy, eval_accuracy_at_resolution, eval_perplexity, grid_train_step, lm_train_step,
    RegConfig, StepMetrics,
};
