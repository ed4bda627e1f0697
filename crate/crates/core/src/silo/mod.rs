//! Silo topology.
//!
//! A cohort is split into one central analyzer, which holds linked records
//! for its region, and one clinic, pharmacy and lab silo for every other
//! region. A silo holds a single data type under identifiers that only mean
//! something inside that silo. Models leave a silo only as [`ParamMessage`]s.

mod audit;
mod message;

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{isolation_audit, AuditFinding, AuditReport, AuditRule, AuditTrail};
pub use message::{MessageKind, ParamMessage, Sender, HEADER_LEN};

use crate::cohort::{CodeVector, DataType, PersonRecord, TypeTriple};
use crate::imputation::ImputedView;
use crate::metrics::{Split, Splits};
use crate::nn::Batch;
use crate::rng;
use crate::train::InputLayout;

#[derive(Debug, Error, PartialEq)]
pub enum SiloError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("view does not match silo {silo}: {msg}")]
    Misaligned { silo: u32, msg: String },
    #[error("malformed message: {0}")]
    Message(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiloKind {
    Clinic,
    Pharmacy,
    Lab,
}

impl SiloKind {
    pub const ALL: [SiloKind; 3] = [SiloKind::Clinic, SiloKind::Pharmacy, SiloKind::Lab];

    pub fn data_type(self) -> DataType {
        match self {
            SiloKind::Clinic => DataType::Diag,
            SiloKind::Pharmacy => DataType::Med,
            SiloKind::Lab => DataType::Lab,
        }
    }

    pub fn for_type(t: DataType) -> SiloKind {
        match t {
            DataType::Diag => SiloKind::Clinic,
            DataType::Med => SiloKind::Pharmacy,
            DataType::Lab => SiloKind::Lab,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SiloKind::Clinic => "clinic",
            SiloKind::Pharmacy => "pharmacy",
            SiloKind::Lab => "lab",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiloId(pub u32);

impl std::fmt::Display for SiloId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "silo-{}", self.0)
    }
}

/// Silo-scoped record identifier, drawn at random per record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct SiloRecord {
    pub local_id: LocalId,
    pub data_type: DataType,
    pub x: CodeVector,
    /// Only clinics know outcomes.
    pub true_labels: Option<Vec<bool>>,
    /// Silo-internal validation row.
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Silo {
    id: SiloId,
    kind: SiloKind,
    region: u32,
    records: Vec<SiloRecord>,
}

impl Silo {
    /// Builds a silo as given; [`isolation_audit`] is what checks it.
    pub fn new(id: SiloId, kind: SiloKind, region: u32, records: Vec<SiloRecord>) -> Self {
        Silo { id, kind, region, records }
    }

    pub fn id(&self) -> SiloId {
        self.id
    }

    pub fn kind(&self) -> SiloKind {
        self.kind
    }

    pub fn region(&self) -> u32 {
        self.region
    }

    pub fn records(&self) -> &[SiloRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// The one site with linked, all-type records.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralAnalyzer {
    pub region: u32,
    pub train: Vec<PersonRecord>,
    pub validation: Vec<PersonRecord>,
}

impl CentralAnalyzer {
    pub fn head_count(&self) -> usize {
        self.train.len() + self.validation.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiloNetwork {
    pub central: CentralAnalyzer,
    pub silos: Vec<Silo>,
    pub vocab_sizes: TypeTriple<usize>,
    pub n_regions: usize,
}

impl SiloNetwork {
    /// S, the silo count.
    pub fn silo_count(&self) -> usize {
        self.silos.len()
    }

    /// N, records summed over all silos.
    pub fn total_records(&self) -> usize {
        self.silos.iter().map(Silo::len).sum()
    }

    pub fn silos_of(&self, kind: SiloKind) -> impl Iterator<Item = &Silo> {
        self.silos.iter().filter(move |s| s.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub n_regions: usize,
    pub central_region: u32,
    pub vocab_sizes: TypeTriple<usize>,
    pub silo_validation_fraction: f64,
    pub seed: u64,
}

const STREAM_PARTITION: u64 = 0x5041_5254;

/// Partition with no held-out people: the whole central region trains.
pub fn partition(records: &[PersonRecord], spec: &PartitionSpec) -> Result<SiloNetwork, SiloError> {
    let splits = Splits {
        assignment: vec![Split::Train; records.len()],
    };
    partition_with_splits(records, &splits, spec)
}

/// Test people are left out entirely. Central-region people go to the
/// central analyzer; everyone else is split by data type into their
/// region's three silos under fresh local ids.
pub fn partition_with_splits(records: &[PersonRecord], splits: &Splits, spec: &PartitionSpec) -> Result<SiloNetwork, SiloError> {
    if splits.assignment.len() != records.len() {
        return Err(SiloError::InvalidTopology("split assignment does not cover the cohort".into()));
    }
    if spec.central_region as usize >= spec.n_regions {
        return Err(SiloError::InvalidTopology(format!(
            "central region {} outside 0..{}",
            spec.central_region, spec.n_regions
        )));
    }
    if let Some(r) = records.iter().find(|r| r.region as usize >= spec.n_regions) {
        return Err(SiloError::InvalidTopology(format!("record in unknown region {}", r.region)));
    }
    let mut central = CentralAnalyzer {
        region: spec.central_region,
        train: Vec::new(),
        validation: Vec::new(),
    };
    let mut by_region: Vec<Vec<&PersonRecord>> = vec![Vec::new(); spec.n_regions];
    for (r, split) in records.iter().zip(&splits.assignment) {
        match (r.region == spec.central_region, split) {
            (_, Split::Test) => {}
            (true, Split::Train) => central.train.push(r.clone()),
            (true, Split::Validation) => central.validation.push(r.clone()),
            (false, Split::Validation) => {
                return Err(SiloError::InvalidTopology(
                    "validation people must come from the central region".into(),
                ))
            }
            (false, Split::Train) => by_region[r.region as usize].push(r),
        }
    }

    let mut r = rng::rng(rng::derive(spec.seed, STREAM_PARTITION));
    // lives only for the duration of partitioning, to keep ids disjoint
    let mut used = HashSet::new();
    let mut silos = Vec::with_capacity(3 * (spec.n_regions - 1));
    for (region, people) in by_region.iter().enumerate() {
        if region as u32 == spec.central_region {
            continue;
        }
        for kind in SiloKind::ALL {
            let t = kind.data_type();
            let mut recs: Vec<SiloRecord> = people
                .iter()
                .filter_map(|p| {
                    p.x[t].as_ref().map(|x| SiloRecord {
                        local_id: LocalId(0),
                        data_type: t,
                        x: x.clone(),
                        true_labels: (kind == SiloKind::Clinic).then(|| p.labels.clone()),
                        holdout: false,
                    })
                })
                .collect();
            recs.shuffle(&mut r);
            for rec in &mut recs {
                rec.local_id = loop {
                    let id = r.random::<u64>();
                    if used.insert(id) {
                        break LocalId(id);
                    }
                };
            }
            let n_holdout = (spec.silo_validation_fraction * recs.len() as f64).round() as usize;
            for rec in recs.iter_mut().take(n_holdout) {
                rec.holdout = true;
            }
            silos.push(Silo::new(SiloId(silos.len() as u32), kind, region as u32, recs));
        }
    }
    Ok(SiloNetwork {
        central,
        silos,
        vocab_sizes: spec.vocab_sizes,
        n_regions: spec.n_regions,
    })
}

/// Which rows of a silo go into mini-batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    pub disease: usize,
    pub batch_size: usize,
    /// Also use silo-internal validation rows.
    pub include_holdout: bool,
    pub seed: u64,
}

/// Shuffled mini-batches of `(layout inputs, disease label)` from a silo's
/// imputed view.
pub fn silo_batches<'a>(
    silo: &'a Silo,
    view: &'a ImputedView,
    layout: &'a InputLayout,
    plan: BatchPlan,
) -> Result<impl Iterator<Item = Batch> + 'a, SiloError> {
    let misaligned = |msg: String| SiloError::Misaligned { silo: silo.id.0, msg };
    if view.silo() != silo.id {
        return Err(misaligned(format!("view belongs to {}", view.silo())));
    }
    if view.records().len() != silo.records.len() {
        return Err(misaligned(format!(
            "{} view rows for {} records",
            view.records().len(),
            silo.records.len()
        )));
    }
    for (v, s) in view.records().iter().zip(&silo.records) {
        if v.local_id() != s.local_id {
            return Err(misaligned("local ids out of order".into()));
        }
        for &t in layout.types() {
            if v.vector(t).is_none() {
                return Err(misaligned(format!("view lacks {t} vectors")));
            }
        }
        if plan.disease >= v.labels().len() {
            return Err(misaligned(format!("no label for disease {}", plan.disease)));
        }
    }
    if plan.batch_size == 0 {
        return Err(misaligned("batch size must be positive".into()));
    }
    let mut rows: Vec<usize> = (0..silo.records.len())
        .filter(|&i| plan.include_holdout || !silo.records[i].holdout)
        .collect();
    rows.shuffle(&mut rng::rng(plan.seed));
    let width = layout.width();
    let chunks: Vec<Vec<usize>> = rows.chunks(plan.batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |chunk| {
        let mut inputs = Array2::zeros((chunk.len(), width));
        let mut targets = Array2::zeros((chunk.len(), 1));
        for (k, &i) in chunk.iter().enumerate() {
            let rec = &view.records()[i];
            layout.write_row(|t| rec.vector(t), inputs.row_mut(k).as_slice_mut().expect("standard layout"));
            targets[(k, 0)] = f64::from(rec.labels()[plan.disease].0);
        }
        Batch { inputs, targets }
    }))
}
