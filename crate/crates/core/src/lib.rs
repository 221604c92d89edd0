//! One-shot sparsification of small feedforward networks.
//!
//! Each prunable weight matrix is scored by the absolute error of a
//! low-rank non-negative factorization of `|W|`. A single scaling factor
//! turns per-layer score statistics into thresholds, and a bisection over
//! that factor hits a requested global sparsity. The resulting masks are
//! fixed for the rest of the run: gradients and weights are re-masked on
//! every training step so the zero count never moves.
//!
//! Module map:
//!
//! * [`matrix`] dense row-major `f64` matrices and summary statistics
//! * [`nmf`] multiplicative-update factorization and reconstruction scores
//! * [`masking`] thresholds, masks, sparsity accounting and the gamma search
//! * [`network`] maskable linear/conv layers with manual backprop
//! * [`trainer`] SGD with momentum, step schedule, masked training loop
//! * [`pipeline`] config, datasets, checkpoints and the end-to-end run
//!
//! Data-parallel inner loops (row blocks of matrix products, per-layer
//! scoring, per-sample convolution) go through [`parallel::Exec`]. With the
//! `parallel` feature disabled everything runs sequentially, and results
//! are bit-identical either way.

pub mod error;
pub mod masking;
pub mod matrix;
pub mod network;
pub mod nmf;
pub mod parallel;
pub mod pipeline;
pub mod seed;
pub mod trainer;

pub use error::{OngError, Result};
pub use masking::{
    GammaSearchConfig, GammaSearchResult, Mask, MaskSet, SparsityReport, ThresholdConfig,
    ThresholdType,
};
pub use matrix::{ElementwiseOp, Matrix, Stats};
pub use network::{LayerKind, LayerSpec, MaskedLayer, Network, Node};
pub use nmf::{NmfConfig, NmfResult, ScoreMatrix, ScoreSet};
pub use parallel::Exec;
pub use trainer::{EpochMetrics, OptimizerState, TrainConfig};
