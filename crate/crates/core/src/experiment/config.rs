use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::cohort::{CohortConfig, DataType};
use crate::imputation::{Binarize, LabelMode, StepOneHyper, ViewOptions};
use crate::metrics::SplitPlan;
use crate::train::TrainConfig;

/// The four compared training regimes, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Centralized,
    CentralOnly,
    FederatedSingleType,
    Confederated,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Centralized,
        Method::CentralOnly,
        Method::FederatedSingleType,
        Method::Confederated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::CentralOnly => "central_only",
            Method::FederatedSingleType => "federated_single_type",
            Method::Confederated => "confederated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub central_region: u32,
    pub label_mode: LabelMode,
    /// How imputed code probabilities become codes.
    pub vectors: Binarize,
    /// How inferred label probabilities become labels.
    pub labels: Binarize,
    /// Data types run as single-type federated baselines.
    pub single_types: Vec<DataType>,
}

impl Default for Topology {
    fn default() -> Self {
        let view = ViewOptions::default();
        Topology {
            central_region: DESK_CENTRAL_REGION,
            label_mode: view.label_mode,
            vectors: view.vectors,
            labels: view.labels,
            single_types: vec![DataType::Diag],
        }
    }
}

impl Topology {
    pub fn view_options(&self) -> ViewOptions {
        ViewOptions {
            label_mode: self.label_mode,
            vectors: self.vectors,
            labels: self.labels,
        }
    }
}

/// The desk region whose 7% share is closest to the original central site's.
pub const DESK_CENTRAL_REGION: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed. Every component seed is derived from it.
    pub seed: u64,
    pub cohort: CohortConfig,
    pub topology: Topology,
    pub models: StepOneHyper,
    pub training: TrainConfig,
    pub evaluation: SplitPlan,
    pub methods: Vec<Method>,
    /// Candidate central regions for `sweep`.
    pub sweep: Vec<u32>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperScale,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper-scale" => Some(Preset::PaperScale),
            _ => None,
        }
    }

    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::PaperScale => ExperimentConfig::paper_scale(),
        }
    }
}

/// Component seeds, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub cohort: u64,
    pub split: u64,
    pub partition: u64,
    pub step_one: u64,
    pub training: u64,
}

impl Seeds {
    pub fn from_run(run: u64) -> Seeds {
        use crate::rng::derive;
        Seeds {
            run,
            cohort: run,
            split: derive(run, 1),
            partition: derive(run, 2),
            step_one: derive(run, 3),
            training: derive(run, 4),
        }
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 42,
            cohort: CohortConfig::desk(),
            topology: Topology::default(),
            models: StepOneHyper::default(),
            training: TrainConfig::default(),
            evaluation: SplitPlan::default(),
            methods: Method::ALL.to_vec(),
            sweep: (0..CohortConfig::desk().n_regions as u32).collect(),
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// 82,143 people over 34 regions with California as the central analyzer.
    pub fn paper_scale() -> Self {
        let cohort = CohortConfig::paper_scale();
        let sweep = (0..cohort.n_regions as u32).collect();
        ExperimentConfig {
            cohort,
            topology: Topology {
                central_region: 3,
                ..Topology::default()
            },
            sweep,
            output_dir: PathBuf::from("runs/paper-scale"),
            ..ExperimentConfig::desk()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config in TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_run(self.seed)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |field: &str, m: String| Err(ExperimentError::Config(format!("{field}: {m}")));
        if let Err(e) = self.cohort.validate() {
            return bad("cohort", e.to_string());
        }
        if let Err(e) = self.training.validate() {
            return bad("training", e.to_string());
        }
        if let Err(e) = self.evaluation.validate() {
            return bad("evaluation", e.to_string());
        }
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required".into());
        }
        let regions = self.cohort.n_regions as u32;
        if self.topology.central_region >= regions {
            return bad(
                "topology.central_region",
                format!("region {} does not exist ({regions} regions)", self.topology.central_region),
            );
        }
        if self.methods.contains(&Method::FederatedSingleType) && self.topology.single_types.is_empty() {
            return bad("topology.single_types", "empty while federated_single_type is requested".into());
        }
        if self.cohort.diseases.is_empty() {
            return bad("cohort.diseases", "at least one disease is required".into());
        }
        Ok(())
    }

    /// Requested methods, deduplicated, in table order.
    pub fn ordered_methods(&self) -> Vec<Method> {
        Method::ALL.into_iter().filter(|m| self.methods.contains(m)).collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
