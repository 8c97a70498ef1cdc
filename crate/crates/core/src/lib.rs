//! Residual confounding from causal-effect covariability.
//!
//! * [`graph`]: causal diagrams, d-separation and backdoor blocking.
//! * [`scm`]: population structural models with per-unit random coefficients.
//! * [`binary`]: the exact two-level mixture example with odds-ratio summaries.
//! * [`linear`]: the random-coefficient bivariate Gaussian model.
//! * [`mle`]: maximum-likelihood fitting, likelihood-ratio test and bootstrap.
//! * [`empirics`]: data ingestion and per-level moment curves.

pub mod binary;
pub mod empirics;
pub mod graph;
pub mod linear;
pub mod mle;
pub mod report;
pub mod rng;
pub mod scm;
pub mod simplex;

pub use binary::{ContingencyTable, MixtureExampleSpec, ReportMode, SummaryMeasures};
pub use empirics::{Binning, Dataset, MomentCurve, Row};
pub use graph::{CausalDag, Orientation, Path, Step};
pub use linear::{ConditionalMoments, CovarianceParams, LinearModelParams};
pub use mle::{BootstrapSummary, FitConfig, FitResult, LrtResult};
pub use report::KvReport;
pub use scm::{Assignment, SampledPopulation, ScmSpec};
