//! Seeded synthetic cohort.
//!
//! Each person has a latent vector `h ~ N(0, I)`. For every data type, the
//! number of codes is Poisson with the configured mean and the codes are drawn
//! without replacement with weights `popularity_j * exp(loading_j · h)`, so the
//! three data types are correlated through `h`. Disease outcomes come from a
//! threshold on the number of disease signal codes present plus scaled
//! standard-logistic follow-up noise, with the threshold placed at the
//! empirical quantile that matches the target prevalence.

mod config;
mod io;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{CohortConfig, DiseaseSpec, ORIGINAL_REGION_COUNTS};
pub use io::{read_cohort, write_cohort};

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),
    #[error("invalid code vector: {0}")]
    InvalidVector(String),
    #[error("cannot calibrate disease '{disease}' to prevalence {target}: best achievable {achieved:.4}")]
    Calibration { disease: String, target: f64, achieved: f64 },
    #[error("empty cohort")]
    Empty,
    #[error("cohort file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// One of the three data types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataType {
    Diag,
    Med,
    Lab,
}

impl DataType {
    pub const ALL: [DataType; 3] = [DataType::Diag, DataType::Med, DataType::Lab];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::Diag => "diag",
            DataType::Med => "med",
            DataType::Lab => "lab",
        }
    }

    pub fn parse(s: &str) -> Option<DataType> {
        DataType::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl std::fmt::Display for DataType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per data type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeTriple<T> {
    pub diag: T,
    pub med: T,
    pub lab: T,
}

impl<T> TypeTriple<T> {
    pub fn new(diag: T, med: T, lab: T) -> Self {
        TypeTriple { diag, med, lab }
    }

    pub fn from_fn(mut f: impl FnMut(DataType) -> T) -> Self {
        TypeTriple {
            diag: f(DataType::Diag),
            med: f(DataType::Med),
            lab: f(DataType::Lab),
        }
    }

    pub fn get(&self, t: DataType) -> &T {
        match t {
            DataType::Diag => &self.diag,
            DataType::Med => &self.med,
            DataType::Lab => &self.lab,
        }
    }

    pub fn get_mut(&mut self, t: DataType) -> &mut T {
        match t {
            DataType::Diag => &mut self.diag,
            DataType::Med => &mut self.med,
            DataType::Lab => &mut self.lab,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(DataType, &T) -> U) -> TypeTriple<U> {
        TypeTriple::from_fn(|t| f(t, self.get(t)))
    }
}

impl<T> std::ops::Index<DataType> for TypeTriple<T> {
    type Output = T;
    fn index(&self, t: DataType) -> &T {
        self.get(t)
    }
}

impl<T> std::ops::IndexMut<DataType> for TypeTriple<T> {
    fn index_mut(&mut self, t: DataType) -> &mut T {
        self.get_mut(t)
    }
}

/// Sparse multi-hot vector over one code vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeVector {
    vocab_size: u32,
    indices: Vec<u32>,
}

impl CodeVector {
    /// `indices` must be sorted, unique and below `vocab_size`.
    pub fn new(vocab_size: u32, indices: Vec<u32>) -> Result<Self, CohortError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CohortError::InvalidVector("indices must be sorted and unique".into()));
        }
        if indices.last().is_some_and(|&i| i >= vocab_size) {
            return Err(CohortError::InvalidVector(format!(
                "index out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(CodeVector { vocab_size, indices })
    }

    pub fn from_unsorted(vocab_size: u32, mut indices: Vec<u32>) -> Result<Self, CohortError> {
        indices.sort_unstable();
        indices.dedup();
        CodeVector::new(vocab_size, indices)
    }

    pub fn empty(vocab_size: u32) -> Self {
        CodeVector {
            vocab_size,
            indices: Vec::new(),
        }
    }

    /// Codes whose value is strictly above `threshold` (so 0.5 maps to absent
    /// at the default threshold).
    pub fn from_threshold(values: &[f64], threshold: f64) -> Self {
        CodeVector {
            vocab_size: values.len() as u32,
            indices: values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > threshold)
                .map(|(i, _)| i as u32)
                .collect(),
        }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, code: u32) -> bool {
        self.indices.binary_search(&code).is_ok()
    }

    /// Writes the dense 0/1 form into `out` (which must be `vocab_size` long).
    pub fn write_dense(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.vocab_size as usize);
        out.fill(0.0);
        for &i in &self.indices {
            out[i as usize] = 1.0;
        }
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab_size as usize];
        self.write_dense(&mut v);
        v
    }
}

/// Opaque identifier that exists only inside the generator and the central
/// analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PersonId(pub u64);

impl std::fmt::Display for PersonId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub person_id: PersonId,
    pub region: u32,
    pub x: TypeTriple<Option<CodeVector>>,
    pub labels: Vec<bool>,
}

impl PersonRecord {
    pub fn vector(&self, t: DataType) -> Option<&CodeVector> {
        self.x[t].as_ref()
    }

    pub fn is_fully_paired(&self) -> bool {
        DataType::ALL.iter().all(|&t| self.x[t].is_some())
    }

    /// Writes the dense vector of type `t` into `out`; absent types are zeros.
    pub fn write_dense(&self, t: DataType, out: &mut [f64]) {
        match &self.x[t] {
            Some(v) => v.write_dense(out),
            None => out.fill(0.0),
        }
    }
}

/// Generated people plus the per-disease intercepts found by calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PersonRecord>,
    pub intercepts: Vec<f64>,
}

// Stream tags; fixed so consumers can replay individual streams.
pub const STREAM_WORLD: u64 = 0x574f_524c;
pub const STREAM_PEOPLE: u64 = 0x5045_4f50;
pub const STREAM_IDS: u64 = 0x4944_5331;
pub const STREAM_MASK: u64 = 0x4d41_534b;
/// Follow-up draws for disease `d` use tag `STREAM_FOLLOW_UP + d`.
pub const STREAM_FOLLOW_UP: u64 = 0x464f_4c00;

/// Code popularity and latent loadings shared by the whole cohort.
struct World {
    log_popularity: TypeTriple<Vec<f64>>,
    /// Row-major `(vocab, latent_dim)`.
    loadings: TypeTriple<Vec<f64>>,
}

impl World {
    fn new(config: &CohortConfig) -> World {
        let mut r = rng::rng(rng::derive(config.seed, STREAM_WORLD));
        let d = config.latent_dim;
        let scale = config.latent_strength / (d as f64).sqrt();
        let mut log_popularity = TypeTriple::<Vec<f64>>::default();
        let mut loadings = TypeTriple::<Vec<f64>>::default();
        for t in DataType::ALL {
            let v = config.vocab_sizes[t];
            log_popularity[t] = (0..v).map(|j| -config.popularity_exponent * ((j + 1) as f64).ln()).collect();
            loadings[t] = (0..v * d).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
        }
        World { log_popularity, loadings }
    }

    fn draw_codes<R: Rng>(&self, config: &CohortConfig, t: DataType, h: &[f64], r: &mut R) -> CodeVector {
        let vocab = config.vocab_sizes[t];
        let poisson = Poisson::new(config.mean_codes[t]).expect("validated mean");
        let k = (poisson.sample(r) as usize).min(vocab);
        let d = h.len();
        let loads = &self.loadings[t];
        // Gumbel-top-k: sampling k codes without replacement ∝ weight.
        let mut keys: Vec<(f64, u32)> = (0..vocab)
            .map(|j| {
                let dot: f64 = loads[j * d..(j + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum();
                let u = open_unit(r);
                (self.log_popularity[t][j] + dot - (-u.ln()).ln(), j as u32)
            })
            .collect();
        if k == 0 {
            return CodeVector::empty(vocab as u32);
        }
        if k < vocab {
            keys.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        }
        let chosen = keys[..k].iter().map(|(_, j)| *j).collect();
        CodeVector::from_unsorted(vocab as u32, chosen).expect("indices in range")
    }
}

/// Count of a disease's signal codes present across the given vectors.
pub fn signal_score(disease: &DiseaseSpec, x: &TypeTriple<Option<CodeVector>>) -> f64 {
    DataType::ALL
        .iter()
        .map(|&t| match &x[t] {
            Some(v) => disease.signal_codes[t].iter().filter(|&&c| v.contains(c)).count(),
            None => 0,
        })
        .sum::<usize>() as f64
}

/// Threshold rule turning a signal score and a follow-up draw into an outcome.
pub fn label_outcome(score: f64, intercept: f64, noise_level: f64, follow_up_draw: f64) -> bool {
    score + intercept + noise_level * follow_up_draw > 0.0
}

/// Uniform draw on (0, 1): the standard `[0, 1)` draw with 0 lifted to the
/// smallest positive normal.
pub fn open_unit<R: Rng + ?Sized>(r: &mut R) -> f64 {
    r.random::<f64>().max(f64::MIN_POSITIVE)
}

/// Standard-logistic variate from an open-interval uniform.
pub fn standard_logistic(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Intercept placing the positive fraction of `latent` as close as the data
/// allow to `target`; returns `(intercept, achieved_fraction)`.
fn calibrate_intercept(latent: &[f64], target: f64) -> (f64, f64) {
    let n = latent.len();
    let mut sorted: Vec<f64> = latent.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = (target * n as f64).round() as usize;
    let intercept = if m == 0 {
        -(sorted[0] + 1.0)
    } else if m >= n {
        -(sorted[n - 1] - 1.0)
    } else {
        -(sorted[m - 1] + sorted[m]) / 2.0
    };
    let achieved = latent.iter().filter(|&&v| v + intercept > 0.0).count() as f64 / n as f64;
    (intercept, achieved)
}

const CALIBRATION_TOLERANCE: f64 = 0.02;

pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort, CohortError> {
    config.validate()?;
    let n = config.n_people;
    if n == 0 {
        return Ok(Cohort {
            records: Vec::new(),
            intercepts: vec![0.0; config.diseases.len()],
        });
    }
    let world = World::new(config);
    let mut people = rng::rng(rng::derive(config.seed, STREAM_PEOPLE));
    let mut ids = rng::rng(rng::derive(config.seed, STREAM_IDS));
    let cumulative: Vec<f64> = config
        .region_weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();

    let mut seen_ids = std::collections::HashSet::with_capacity(n);
    let mut full: Vec<(PersonId, u32, TypeTriple<Option<CodeVector>>)> = Vec::with_capacity(n);
    let mut h = vec![0.0; config.latent_dim];
    for _ in 0..n {
        let u: f64 = people.random();
        let region = cumulative.iter().position(|&c| u < c).unwrap_or(config.n_regions - 1) as u32;
        for v in h.iter_mut() {
            *v = people.sample(StandardNormal);
        }
        let x = TypeTriple::from_fn(|t| Some(world.draw_codes(config, t, &h, &mut people)));
        let id = loop {
            let candidate = PersonId(ids.random());
            if seen_ids.insert(candidate) {
                break candidate;
            }
        };
        full.push((id, region, x));
    }

    let mut labels = vec![Vec::with_capacity(config.diseases.len()); n];
    let mut intercepts = Vec::with_capacity(config.diseases.len());
    for (d, disease) in config.diseases.iter().enumerate() {
        let mut follow = rng::rng(rng::derive(config.seed, STREAM_FOLLOW_UP + d as u64));
        let latent: Vec<f64> = full
            .iter()
            .map(|(_, _, x)| {
                let u = open_unit(&mut follow);
                signal_score(disease, x) + disease.noise_level * standard_logistic(u)
            })
            .collect();
        let (intercept, achieved) = calibrate_intercept(&latent, disease.target_prevalence);
        if (achieved - disease.target_prevalence).abs() > CALIBRATION_TOLERANCE.max(1.0 / n as f64) {
            return Err(CohortError::Calibration {
                disease: disease.name.clone(),
                target: disease.target_prevalence,
                achieved,
            });
        }
        for (i, v) in latent.iter().enumerate() {
            labels[i].push(v + intercept > 0.0);
        }
        intercepts.push(intercept);
    }

    // Unpaired people lose one or two data types after outcomes are fixed.
    let mut mask = rng::rng(rng::derive(config.seed, STREAM_MASK));
    let records = full
        .into_iter()
        .zip(labels)
        .map(|((person_id, region, mut x), labels)| {
            if mask.random::<f64>() < config.unpaired_fraction {
                let missing = mask.random_range(1..=2);
                for i in index::sample(&mut mask, 3, missing) {
                    x[DataType::ALL[i]] = None;
                }
            }
            PersonRecord {
                person_id,
                region,
                x,
                labels,
            }
        })
        .collect();
    Ok(Cohort { records, intercepts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_people: usize,
    /// Mean code count among people who have the type.
    pub mean_codes: TypeTriple<f64>,
    pub type_coverage: TypeTriple<f64>,
    pub prevalence: Vec<f64>,
    pub region_histogram: BTreeMap<u32, usize>,
    pub unpaired_fraction: f64,
}

pub fn cohort_stats(records: &[PersonRecord]) -> Result<CohortStats, CohortError> {
    if records.is_empty() {
        return Err(CohortError::Empty);
    }
    let n = records.len() as f64;
    let mut sums = TypeTriple::<f64>::default();
    let mut present = TypeTriple::<usize>::default();
    let n_diseases = records[0].labels.len();
    let mut positives = vec![0usize; n_diseases];
    let mut regions = BTreeMap::new();
    let mut unpaired = 0usize;
    for r in records {
        for t in DataType::ALL {
            if let Some(v) = &r.x[t] {
                sums[t] += v.count() as f64;
                present[t] += 1;
            }
        }
        for (p, &l) in positives.iter_mut().zip(&r.labels) {
            *p += usize::from(l);
        }
        *regions.entry(r.region).or_insert(0) += 1;
        unpaired += usize::from(!r.is_fully_paired());
    }
    Ok(CohortStats {
        n_people: records.len(),
        mean_codes: TypeTriple::from_fn(|t| if present[t] == 0 { 0.0 } else { sums[t] / present[t] as f64 }),
        type_coverage: TypeTriple::from_fn(|t| present[t] as f64 / n),
        prevalence: positives.iter().map(|&p| p as f64 / n).collect(),
        region_histogram: regions,
        unpaired_fraction: unpaired as f64 / n,
    })
}

/// Observation-window features of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub person_id: PersonId,
    pub region: u32,
    pub x: TypeTriple<Option<CodeVector>>,
}

/// Follow-up-window outcomes of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub person_id: PersonId,
    pub labels: Vec<bool>,
}

/// Splits records into the feature window and the label window. The views
/// share only the person identifier; feature rows carry no outcome field and
/// label rows carry no codes.
pub fn split_windows(records: &[PersonRecord], config: &CohortConfig) -> Result<(Vec<FeatureRow>, Vec<LabelRow>), CohortError> {
    let mut features = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        if r.labels.len() != config.diseases.len() {
            return Err(CohortError::InvalidConfig(format!(
                "record {} has {} labels, config declares {} diseases",
                r.person_id,
                r.labels.len(),
                config.diseases.len()
            )));
        }
        for t in DataType::ALL {
            if let Some(v) = &r.x[t] {
                if v.vocab_size() as usize != config.vocab_sizes[t] {
                    return Err(CohortError::InvalidVector(format!(
                        "record {} {t} vector has vocabulary {}",
                        r.person_id,
                        v.vocab_size()
                    )));
                }
            }
        }
        features.push(FeatureRow {
            person_id: r.person_id,
            region: r.region,
            x: r.x.clone(),
        });
        labels.push(LabelRow {
            person_id: r.person_id,
            labels: r.labels.clone(),
        });
    }
    Ok((features, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize) -> CohortConfig {
        let mut c = CohortConfig::desk();
        c.n_people = n;
        c
    }

    #[test]
    fn code_vector_invariants() {
        assert!(CodeVector::new(5, vec![1, 3]).is_ok());
        assert!(CodeVector::new(5, vec![3, 1]).is_err());
        assert!(CodeVector::new(5, vec![1, 1]).is_err());
        assert!(CodeVector::new(5, vec![5]).is_err());
        let v = CodeVector::from_threshold(&[0.5, 0.51, 0.0, 0.9], 0.5);
        assert_eq!(v.indices(), &[1, 3]);
        assert_eq!(v.dense(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_config_gives_empty_cohort() {
        let cohort = generate_cohort(&small_config(0)).unwrap();
        assert!(cohort.records.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let c = small_config(300);
        assert_eq!(generate_cohort(&c).unwrap(), generate_cohort(&c).unwrap());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(generate_cohort(&c).unwrap(), generate_cohort(&other).unwrap());
    }

    #[test]
    fn every_record_satisfies_invariants() {
        let c = small_config(500);
        let cohort = generate_cohort(&c).unwrap();
        for r in &cohort.records {
            assert!(DataType::ALL.iter().any(|&t| r.x[t].is_some()));
            assert_eq!(r.labels.len(), c.diseases.len());
            assert!((r.region as usize) < c.n_regions);
            for t in DataType::ALL {
                if let Some(v) = &r.x[t] {
                    assert_eq!(v.vocab_size() as usize, c.vocab_sizes[t]);
                    assert!(CodeVector::new(v.vocab_size(), v.indices().to_vec()).is_ok());
                }
            }
        }
    }

    #[test]
    fn stats_on_hand_built_records() {
        let rec = PersonRecord {
            person_id: PersonId(1),
            region: 2,
            x: TypeTriple::new(Some(CodeVector::new(10, vec![1, 4, 7]).unwrap()), None, None),
            labels: vec![true, true],
        };
        let s = cohort_stats(std::slice::from_ref(&rec)).unwrap();
        assert_eq!(s.mean_codes.diag, 3.0);
        assert_eq!(s.prevalence, vec![1.0, 1.0]);
        assert_eq!(s.unpaired_fraction, 1.0);
        assert_eq!(s.region_histogram.get(&2), Some(&1));
        assert_eq!(cohort_stats(&[]), Err(CohortError::Empty));
    }

    #[test]
    fn stats_match_brute_force_recount() {
        let cohort = generate_cohort(&small_config(400)).unwrap();
        let s = cohort_stats(&cohort.records).unwrap();
        for t in DataType::ALL {
            let mut total = 0usize;
            let mut have = 0usize;
            for r in &cohort.records {
                if let Some(v) = r.vector(t) {
                    total += v.dense().iter().filter(|&&x| x == 1.0).count();
                    have += 1;
                }
            }
            assert!((s.mean_codes[t] - total as f64 / have as f64).abs() < 1e-12);
        }
        for d in 0..3 {
            let pos = cohort.records.iter().filter(|r| r.labels[d]).count();
            assert_eq!(s.prevalence[d], pos as f64 / 400.0);
        }
        let region_total: usize = s.region_histogram.values().sum();
        assert_eq!(region_total, 400);
    }

    #[test]
    fn zero_noise_without_signal_is_negative() {
        let disease = DiseaseSpec {
            name: "x".into(),
            target_prevalence: 0.1,
            signal_codes: TypeTriple::new(vec![0], vec![], vec![]),
            noise_level: 0.0,
        };
        let x = TypeTriple::new(Some(CodeVector::new(10, vec![3]).unwrap()), None, None);
        let score = signal_score(&disease, &x);
        assert_eq!(score, 0.0);
        assert!(!label_outcome(score, -0.5, 0.0, 123.0));
    }

    #[test]
    fn infeasible_calibration_is_reported() {
        let mut c = small_config(200);
        // codes that never occur and no noise: every latent value ties at 0
        let last = (c.vocab_sizes.diag - 1) as u32;
        c.diseases[0].signal_codes = TypeTriple::new(vec![last], vec![], vec![]);
        c.diseases[0].noise_level = 0.0;
        c.popularity_exponent = 8.0;
        assert!(matches!(generate_cohort(&c), Err(CohortError::Calibration { .. })));
    }

    #[test]
    fn split_windows_keeps_person_alignment() {
        let c = small_config(50);
        let cohort = generate_cohort(&c).unwrap();
        let (f, l) = split_windows(&cohort.records, &c).unwrap();
        assert_eq!(f.len(), l.len());
        for ((fr, lr), r) in f.iter().zip(&l).zip(&cohort.records) {
            assert_eq!(fr.person_id, lr.person_id);
            assert_eq!(fr.x, r.x);
            assert_eq!(lr.labels, r.labels);
        }
    }
}
