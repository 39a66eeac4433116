//! Low-resolution robustness toolkit.
//!
//! * [`results`]: accuracy tables and their file formats
//! * [`metrics`]: γ, Γ, SAR, WAR, ACC and Spearman correlation
//! * [`weights`]: WAR dataset weights and their optimization
//! * [`degrade`]: bicubic low-resolution simulation
//! * [`zeroshot`]: template-averaged zero-shot classification
//! * [`vit`]: tiny vision transformer with additive LR token banks
//! * [`analysis`]: layer similarity, feature export, reports

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod degrade;
pub mod error;
pub mod image;
pub mod metrics;
pub mod results;
pub mod vit;
pub mod weights;
pub mod zeroshot;

pub use error::{Error, Result};
pub use image::Image;
pub use metrics::{AggregateScores, RobustnessConfig, RobustnessScores};
pub use results::{AccuracyRecord, DatasetMeta, ModelMeta, ResultsTable};
pub use weights::{Bounds, GammaMatrix, Objective, WeightVector};
