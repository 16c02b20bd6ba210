//! Contrastive image–report alignment for synthetic 3D brain MRI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod autograd;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod interpret;
pub mod model;
pub mod params;
pub mod peft;
pub mod synthcohort;
pub mod textenc;
pub mod textkit;
pub mod trainer;
pub mod transformer;
pub mod vision;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use synthcohort::{Biomarker, CohortConfig, Diagnosis, Grid, Split, Volume3D};
pub use trainer::{ExperimentConfig, TrainConfig};
