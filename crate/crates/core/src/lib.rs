//! Triadic co-training on paired embedding views.
//!
//! Two dropout-MLP students learn from each other's mutual-information
//! filtered pseudo-labels, an entropy-guided L∞ generator produces hard
//! examples in embedding space, and a sigmoid-parameterised teacher adapts
//! the filter threshold and loss weights from one-step unrolled
//! meta-gradients on a labeled validation batch.
//!
//! The [`game`] module checks the equilibrium conditions of the resulting
//! three-player game empirically on finite strategy grids.

pub mod data;
pub mod engine;
mod error;
pub mod game;
pub mod generator;
pub mod gradcheck;
pub mod numerics;
pub mod persist;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod uncertainty;

pub use error::{Error, Result};

pub use data::{BatchPlan, Split, TwoViewDataset};
pub use engine::{
    EvalMetrics, StepReport, TeacherMode, TrainConfig, Trainer, TrainingReport,
};
pub use generator::{AscentRule, PerturbConfig, Perturbation};
pub use numerics::{DenseMatrix, ProbVector};
pub use student::{DropoutMask, OptimizerState, StudentGrads, StudentParams};
pub use teacher::{StrategyHistory, StrategyTriple, TeacherStrategy};
pub use uncertainty::{FilterDirection, UncertaintyEstimate};
