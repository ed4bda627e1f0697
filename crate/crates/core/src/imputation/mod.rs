//! Step one (central cGANs and label classifiers) and step two (silo-local
//! completion of missing data types and labels).

mod cgan;
mod classifier;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cgan::{generate, impute, train_cgan, train_cgan_with_init, CganEpoch, CganHyper, CganModel, CganWarning};
pub use classifier::{train_label_classifier, ClassifierHyper, LabelClassifier};

use crate::cohort::{CodeVector, DataType, PersonRecord, TypeTriple};
use crate::nn::NnError;
use crate::rng;
use crate::silo::{LocalId, Silo, SiloId, SiloKind};

#[derive(Debug, Error, PartialEq)]
pub enum ImputeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("input width {found}, model expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("no central records with {src} to train {src}->{tgt}")]
    NoSourceRows { src: DataType, tgt: DataType },
    #[error("{what}: single-class labels ({positives} positive of {n})")]
    DegenerateLabels { what: String, n: usize, positives: usize },
    #[error("missing step-one model: {0}")]
    MissingModel(String),
    #[error("invalid hyperparameters: {0}")]
    Config(String),
}

/// Dense 0/1 matrix with one row per vector.
pub(crate) fn dense_rows(vectors: &[&CodeVector], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((vectors.len(), width));
    for (mut row, v) in m.rows_mut().into_iter().zip(vectors) {
        for &i in v.indices() {
            row[i as usize] = 1.0;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Clinics train on their outcome labels; other silos infer them.
    ClinicsTrue,
    /// Every silo, clinics included, uses inferred labels.
    InferredEverywhere,
}

/// How generator or classifier probabilities become binary values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// 1 iff p > 0.5.
    Threshold,
    /// 1 with probability p.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewOptions {
    pub label_mode: LabelMode,
    pub vectors: Binarize,
    pub labels: Binarize,
}

impl Default for ViewOptions {
    fn default() -> Self {
        ViewOptions {
            label_mode: LabelMode::ClinicsTrue,
            vectors: Binarize::Threshold,
            labels: Binarize::Bernoulli,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    Observed,
    Imputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    True,
    Inferred,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedRecord {
    local_id: LocalId,
    x: TypeTriple<Option<(CodeVector, VectorSource)>>,
    labels: Vec<(bool, LabelSource)>,
}

impl ImputedRecord {
    pub fn local_id(&self) -> LocalId {
        self.local_id
    }

    pub fn vector(&self, t: DataType) -> Option<&CodeVector> {
        self.x[t].as_ref().map(|(v, _)| v)
    }

    pub fn source(&self, t: DataType) -> Option<VectorSource> {
        self.x[t].as_ref().map(|(_, s)| *s)
    }

    pub fn labels(&self) -> &[(bool, LabelSource)] {
        &self.labels
    }
}

/// A silo's records completed for training, aligned with the silo's record
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedView {
    silo: SiloId,
    records: Vec<ImputedRecord>,
}

impl ImputedView {
    pub fn silo(&self) -> SiloId {
        self.silo
    }

    pub fn records(&self) -> &[ImputedRecord] {
        &self.records
    }
}

/// Everything step one produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOneModels {
    pub cgans: Vec<CganModel>,
    pub classifiers: Vec<LabelClassifier>,
}

impl StepOneModels {
    pub fn cgan(&self, src: DataType, tgt: DataType) -> Result<&CganModel, ImputeError> {
        self.cgans
            .iter()
            .find(|c| c.src == src && c.tgt == tgt)
            .ok_or_else(|| ImputeError::MissingModel(format!("generator {src}->{tgt}")))
    }

    pub fn classifier(&self, src: DataType, disease: usize) -> Result<&LabelClassifier, ImputeError> {
        self.classifiers
            .iter()
            .find(|c| c.src == src && c.disease == disease)
            .ok_or_else(|| ImputeError::MissingModel(format!("classifier {src}:{disease}")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepOneHyper {
    pub cgan: CganHyper,
    pub classifier: ClassifierHyper,
}

const TAG_CGAN: u64 = 0x4347;
const TAG_CLASSIFIER: u64 = 0x434c;

/// Trains the six directed generators and one classifier per (type,
/// disease) on the central analyzer's training records.
pub fn train_step_one(
    central: &[PersonRecord],
    vocab: &TypeTriple<usize>,
    n_diseases: usize,
    hyper: &StepOneHyper,
    seed: u64,
) -> Result<StepOneModels, ImputeError> {
    let pairs: Vec<(DataType, DataType)> = DataType::ALL
        .iter()
        .flat_map(|&s| DataType::ALL.iter().filter(move |&&t| t != s).map(move |&t| (s, t)))
        .collect();
    let cgans = pairs
        .par_iter()
        .map(|&(s, t)| {
            let seed = rng::derive_path(seed, &[TAG_CGAN, s.index() as u64, t.index() as u64]);
            train_cgan(central, s, t, (vocab[s], vocab[t]), &hyper.cgan, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(DataType, usize)> = DataType::ALL.iter().flat_map(|&t| (0..n_diseases).map(move |d| (t, d))).collect();
    let classifiers = jobs
        .par_iter()
        .map(|&(t, d)| {
            let seed = rng::derive_path(seed, &[TAG_CLASSIFIER, t.index() as u64, d as u64]);
            train_label_classifier(central, t, d, vocab[t], &hyper.classifier, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StepOneModels { cgans, classifiers })
}

fn binarize_vector(probs: &[f64], how: Binarize, seed: u64) -> CodeVector {
    match how {
        Binarize::Threshold => CodeVector::from_threshold(probs, 0.5),
        Binarize::Bernoulli => {
            let mut r = rng::rng(seed);
            let idx = probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| r.random::<f64>() < p)
                .map(|(i, _)| i as u32)
                .collect();
            CodeVector::new(probs.len() as u32, idx).expect("ascending in-range indices")
        }
    }
}

fn binarize_label(p: f64, how: Binarize, seed: u64) -> bool {
    match how {
        Binarize::Threshold => p > 0.5,
        Binarize::Bernoulli => rng::rng(seed).random::<f64>() < p,
    }
}

/// Per-record seed for the noise of generator `tgt` (and, one level down,
/// its Bernoulli draws).
pub fn z_seed(seed: u64, silo: SiloId, record: usize, tgt: DataType) -> u64 {
    rng::derive_path(seed, &[u64::from(silo.0), record as u64, tgt.index() as u64])
}

fn label_seed(seed: u64, silo: SiloId, record: usize, disease: usize) -> u64 {
    rng::derive_path(seed, &[u64::from(silo.0), record as u64, 0x4c42_0000 + disease as u64])
}

fn labels_for(
    silo: &Silo,
    models: &StepOneModels,
    n_diseases: usize,
    options: &ViewOptions,
    seed: u64,
) -> Result<Vec<Vec<(bool, LabelSource)>>, ImputeError> {
    let t = silo.kind().data_type();
    let use_true = silo.kind() == SiloKind::Clinic && options.label_mode == LabelMode::ClinicsTrue;
    let mut out: Vec<Vec<(bool, LabelSource)>> = vec![Vec::with_capacity(n_diseases); silo.len()];
    if use_true {
        for (o, r) in out.iter_mut().zip(silo.records()) {
            let labels = r
                .true_labels
                .as_ref()
                .ok_or_else(|| ImputeError::MissingModel(format!("true labels in {}", silo.id())))?;
            o.extend(labels.iter().map(|&l| (l, LabelSource::True)));
        }
        return Ok(out);
    }
    let xs: Vec<&CodeVector> = silo.records().iter().map(|r| &r.x).collect();
    for d in 0..n_diseases {
        let probs = models.classifier(t, d)?.predict(&xs)?;
        for (i, (o, p)) in out.iter_mut().zip(probs).enumerate() {
            o.push((
                binarize_label(p, options.labels, label_seed(seed, silo.id(), i, d)),
                LabelSource::Inferred,
            ));
        }
    }
    Ok(out)
}

/// Step two inside one silo: generate the two missing data types from the
/// observed one and attach true or inferred labels.
pub fn build_imputed_view(
    silo: &Silo,
    models: &StepOneModels,
    n_diseases: usize,
    options: &ViewOptions,
    seed: u64,
) -> Result<ImputedView, ImputeError> {
    let src = silo.kind().data_type();
    let labels = labels_for(silo, models, n_diseases, options, seed)?;
    let mut x: Vec<TypeTriple<Option<(CodeVector, VectorSource)>>> = silo
        .records()
        .iter()
        .map(|r| {
            let mut triple = TypeTriple::default();
            triple[src] = Some((r.x.clone(), VectorSource::Observed));
            triple
        })
        .collect();
    if !silo.is_empty() {
        let srcs: Vec<&CodeVector> = silo.records().iter().map(|r| &r.x).collect();
        for tgt in DataType::ALL.into_iter().filter(|&t| t != src) {
            let cgan = models.cgan(src, tgt)?;
            if let Some(v) = srcs.iter().find(|v| v.vocab_size() as usize != cgan.src_width()) {
                return Err(ImputeError::Width {
                    expected: cgan.src_width(),
                    found: v.vocab_size() as usize,
                });
            }
            let seeds: Vec<u64> = (0..srcs.len()).map(|i| z_seed(seed, silo.id(), i, tgt)).collect();
            let probs = generate(cgan, &dense_rows(&srcs, cgan.src_width()), &seeds)?;
            for (i, row) in probs.rows().into_iter().enumerate() {
                let v = binarize_vector(row.as_slice().expect("standard layout"), options.vectors, rng::derive(seeds[i], 1));
                x[i][tgt] = Some((v, VectorSource::Imputed));
            }
        }
    }
    Ok(ImputedView {
        silo: silo.id(),
        records: silo
            .records()
            .iter()
            .zip(x)
            .zip(labels)
            .map(|((r, x), labels)| ImputedRecord {
                local_id: r.local_id,
                x,
                labels,
            })
            .collect(),
    })
}

/// Observed vectors plus labels only; what a single-type federated run
/// trains on.
pub fn build_label_view(
    silo: &Silo,
    models: &StepOneModels,
    n_diseases: usize,
    options: &ViewOptions,
    seed: u64,
) -> Result<ImputedView, ImputeError> {
    let src = silo.kind().data_type();
    let labels = labels_for(silo, models, n_diseases, options, seed)?;
    Ok(ImputedView {
        silo: silo.id(),
        records: silo
            .records()
            .iter()
            .zip(labels)
            .map(|(r, labels)| {
                let mut x = TypeTriple::default();
                x[src] = Some((r.x.clone(), VectorSource::Observed));
                ImputedRecord {
                    local_id: r.local_id,
                    x,
                    labels,
                }
            })
            .collect(),
    })
}
