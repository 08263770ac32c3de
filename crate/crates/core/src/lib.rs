//! Prospective sample size design for IPTW marginal structural models.
//!
//! A pilot dataset is analysed with the stacked propensity + MSM estimating
//! equations, its sandwich large-sample variance factor is stabilized by
//! bootstrap, and the stabilized value is converted into a sample size. The
//! [`powersim`] module validates the procedure by simulation.
//!
//! Numerical routines are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod data;
pub mod design;
pub mod error;
pub mod linalg;
pub mod msm;
pub mod powersim;
pub mod propensity;
pub mod quadrature;
pub mod rng;
pub mod sandwich;
pub mod scalar;
pub mod scenarios;
pub mod stabilize;

pub use data::{Dataset, DiagnosticFlag, Diagnostics, Observation, OutcomeKind};
pub use design::{normal_quantile, rct_sample_size, rct_variance, required_n, se_target, DesignInputs, RctParams};
pub use error::{Error, Result};
pub use msm::Link;
pub use propensity::{Estimand, PsSpec};
pub use rng::Stream;
pub use scalar::Scalar;
pub use scenarios::{PropensityMode, Scenario};
pub use stabilize::{StabilityFunctional, UcbSpec};

pub type DatasetF64 = data::Dataset<f64>;
pub type DatasetF32 = data::Dataset<f32>;
pub type StackedFitF64 = sandwich::StackedFit<f64>;
pub type StackedFitF32 = sandwich::StackedFit<f32>;
pub type PsFitF64 = propensity::PsFit<f64>;
pub type MsmFitF64 = msm::MsmFit<f64>;
pub type MatrixF64 = linalg::Matrix<f64>;
pub type BootstrapDistributionF64 = stabilize::BootstrapDistribution<f64>;
