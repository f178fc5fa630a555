//! Identification and estimation of a mixing matrix `A` in `A Y = ε` from
//! zero restrictions on higher-order moment or cumulant tensors of `ε`.

pub mod datagen;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod partitions;
pub mod restrictions;
pub mod statistics;
pub mod tensor;

pub use error::{Error, Result};
pub use datagen::{ErrorModel, MixingLaw, ScenarioConfig, ScenarioSummary};
pub use estimator::{EstimationOptions, EstimationResult, RestrictionSpec, Weighting};
pub use inference::TestResult;
pub use metrics::ErrorMetrics;
pub use restrictions::{make_pattern, PatternKind, ZeroPattern};
pub use statistics::{DataMatrix, StatKind, TensorFamily};
pub use tensor::{Matrix, MultiIndex, SymmetricTensor};
