//! Confederated learning: training disease-risk classifiers on health data
//! separated by individual, by data type and by identity.
//!
//! A seeded synthetic cohort is partitioned into single-type silos plus one
//! central analyzer. The central analyzer trains conditional GANs that let
//! each silo fill in the data types it lacks, and the task model is then
//! trained by federated averaging across all silos.

pub mod cohort;
pub mod experiment;
pub mod imputation;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod silo;
pub mod train;

pub use cohort::{CodeVector, Cohort, CohortConfig, DataType, DiseaseSpec, PersonId, PersonRecord, TypeTriple};
pub use experiment::{ExperimentConfig, Method, RunManifest};
pub use imputation::{CganModel, ImputedView, LabelClassifier, StepOneModels};
pub use metrics::{MetricsReport, SplitPlan};
pub use nn::{ArchSpec, Batch, Mode, ModelParams, OutputActivation};
pub use silo::{ParamMessage, Silo, SiloKind, SiloNetwork};
pub use train::{TaskModel, TrainConfig};
