//! Linear and generalized linear mixed models with corrected conditional
//! AIC and stepwise random-effect selection.

pub mod caic;
pub mod data;
pub mod design;
pub mod error;
pub mod estimation;
pub mod formula;
pub mod optim;
pub mod scalar;
pub mod sparse;
pub mod stepwise;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use caic::{caic, caic_with, CaicOptions, CaicResult, GConvention};
pub use data::{load_csv, Dataset};
pub use estimation::{fit_glmm, fit_lmm, fit_model, Family, FitOptions, FittedModel};
pub use formula::{parse_formula, ModelFormula};
pub use stepwise::{step_caic, Direction, StepConfig, StepOutcome};

/// Sparse column-compressed matrix in double precision.
pub type CscMatrix = sparse::CscMatrix<f64>;
/// Sparse Cholesky factor in double precision.
pub type CholeskyFactor = sparse::CholeskyFactor<f64>;
/// Truncated polynomial basis in double precision.
pub type SmoothBasis = design::SmoothBasis<f64>;
pub type SimplexOptions = optim::SimplexOptions<f64>;
pub type Minimum = optim::Minimum<f64>;
