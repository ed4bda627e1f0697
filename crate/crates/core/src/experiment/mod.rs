//! Configuration-driven runs: cohort export, the four-method comparison,
//! the central-region sweep and report consolidation.

mod config;
mod output;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ExperimentConfig, Method, Preset, Seeds, Topology, DESK_CENTRAL_REGION};
pub use output::{FileEntry, RunManifest, SkippedRegion, MANIFEST_FILE};

use crate::cohort::{cohort_stats, generate_cohort, write_cohort, Cohort, CohortError, CohortStats, DataType};
use crate::imputation::{train_step_one, ImputeError, ImputedView};
use crate::metrics::{format_table, make_splits, MetricError, MetricsReport, Split, Splits};
use crate::rng;
use crate::silo::{partition_with_splits, AuditReport, AuditTrail, PartitionSpec, SiloError, SiloNetwork};
use crate::train::{
    prepare_views, run_central_only, run_centralized, run_federated, run_single_type_federated, History, InputLayout, StepTwo, TrainConfig,
    TrainError,
};
use output::OutputDir;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Silo(#[from] SiloError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{method} / {disease}: {message}")]
    Method { method: String, disease: String, message: String },
    #[error("run directory {dir} is incomplete; missing: {}", missing.join(", "))]
    MissingFiles { dir: String, missing: Vec<String> },
}

const TAG_TRAIN_METHOD: u64 = 0x4d54_4844;

/// Cohort, split and silo network for one central region.
pub struct World {
    pub cohort: Cohort,
    pub splits: Splits,
    pub network: SiloNetwork,
}

pub fn build_world(cfg: &ExperimentConfig, cohort: Cohort, central_region: u32) -> Result<World, ExperimentError> {
    let seeds = cfg.seeds();
    let plan = crate::metrics::SplitPlan {
        seed: seeds.split,
        ..cfg.evaluation.clone()
    };
    let splits = make_splits(&cohort.records, central_region, &plan)?;
    let spec = PartitionSpec {
        n_regions: cfg.cohort.n_regions,
        central_region,
        vocab_sizes: cfg.cohort.vocab_sizes,
        silo_validation_fraction: cfg.evaluation.silo_validation_fraction,
        seed: seeds.partition,
    };
    let network = partition_with_splits(&cohort.records, &splits, &spec)?;
    Ok(World { cohort, splits, network })
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Cohort, ExperimentError> {
    let mut cc = cfg.cohort.clone();
    cc.seed = cfg.seeds().cohort;
    Ok(generate_cohort(&cc)?)
}

/// Everything a run produced, before it is written out.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub reports: Vec<MetricsReport>,
    /// `(method label, disease, history)`.
    pub histories: Vec<(String, String, History)>,
    pub audit: AuditReport,
    pub timings_ms: BTreeMap<String, u64>,
    pub n_central: usize,
}

impl RunResult {
    pub fn summary(&self) -> String {
        format_table(&self.reports)
    }

    pub fn mean(&self, method: &str, f: impl Fn(&MetricsReport) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.reports.iter().filter(|r| r.method == method).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn single_type_label(t: DataType) -> String {
    format!("{}:{t}", Method::FederatedSingleType.name())
}

fn train_config(cfg: &ExperimentConfig, method: Method, disease: usize) -> TrainConfig {
    TrainConfig {
        seed: rng::derive_path(cfg.seeds().training, &[TAG_TRAIN_METHOD, method as u64, disease as u64]),
        use_silo_holdout: cfg.evaluation.final_fit,
        ..cfg.training.clone()
    }
}

/// Trains and evaluates the requested methods on every disease.
pub fn run_methods(cfg: &ExperimentConfig, world: &World, methods: &[Method]) -> Result<RunResult, ExperimentError> {
    let network = &world.network;
    let records = &world.cohort.records;
    let test = world.splits.select(records, Split::Test);
    let names: Vec<&str> = cfg.cohort.diseases.iter().map(|d| d.name.as_str()).collect();
    let n_diseases = names.len();
    let mut trail = AuditTrail::new(network);
    let mut timings = BTreeMap::new();
    let mut reports = Vec::new();
    let mut histories = Vec::new();

    let needs_step_one = methods.contains(&Method::Confederated)
        || (methods.contains(&Method::FederatedSingleType)
            && (cfg.topology.single_types.iter().any(|&t| t != DataType::Diag)
                || cfg.topology.label_mode != crate::imputation::LabelMode::ClinicsTrue));
    let t0 = Instant::now();
    let models = if needs_step_one {
        let m = train_step_one(
            &network.central.train,
            &cfg.cohort.vocab_sizes,
            n_diseases,
            &cfg.models,
            cfg.seeds().step_one,
        )?;
        timings.insert("step_one".to_owned(), t0.elapsed().as_millis() as u64);
        m
    } else {
        crate::imputation::StepOneModels {
            cgans: Vec::new(),
            classifiers: Vec::new(),
        }
    };
    let step = StepTwo {
        models: &models,
        n_diseases,
        options: cfg.topology.view_options(),
    };
    let pooled: Vec<_> = world.splits.select(records, Split::Train).into_iter().cloned().collect();
    let layout = InputLayout::all(&cfg.cohort.vocab_sizes);

    let views: Vec<ImputedView> = if methods.contains(&Method::Confederated) {
        let t0 = Instant::now();
        let v = prepare_views(network, &step, cfg.seeds().training, &mut trail)?;
        timings.insert("step_two".to_owned(), t0.elapsed().as_millis() as u64);
        v
    } else {
        Vec::new()
    };

    for &method in methods {
        let labels: Vec<String> = match method {
            Method::FederatedSingleType => cfg.topology.single_types.iter().map(|&t| single_type_label(t)).collect(),
            m => vec![m.name().to_owned()],
        };
        for (li, label) in labels.iter().enumerate() {
            let t0 = Instant::now();
            for (d, &disease) in names.iter().enumerate() {
                let tc = train_config(cfg, method, d);
                let fitted = match method {
                    Method::Centralized => run_centralized(&pooled, &network.central.validation, &layout, d, &tc),
                    Method::CentralOnly => run_central_only(network, d, &tc),
                    Method::FederatedSingleType => {
                        run_single_type_federated(network, cfg.topology.single_types[li], &step, d, &tc, &mut trail)
                    }
                    Method::Confederated => {
                        let participants: Vec<(usize, &ImputedView)> = views.iter().enumerate().collect();
                        run_federated(network, &participants, &layout, d, &tc, &mut trail)
                    }
                };
                let context = |message: String| ExperimentError::Method {
                    method: label.clone(),
                    disease: disease.to_owned(),
                    message,
                };
                let (model, history) = fitted.map_err(|e| context(e.to_string()))?;
                let scores = model.scores(&test).map_err(|e| context(e.to_string()))?;
                let truth: Vec<bool> = test.iter().map(|r| r.labels[d]).collect();
                let report = MetricsReport::from_scores(label, disease, &scores, &truth).map_err(|e| context(e.to_string()))?;
                log::info!("{label} {disease}: AUCROC {:.4} AUCPR {:.4}", report.aucroc, report.aucpr);
                reports.push(report);
                histories.push((label.clone(), disease.to_owned(), history));
            }
            timings.insert(label.clone(), t0.elapsed().as_millis() as u64);
        }
    }
    Ok(RunResult {
        reports,
        histories,
        audit: trail.finish(),
        timings_ms: timings,
        n_central: network.central.head_count(),
    })
}

/// Generates the cohort and runs the configured methods.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let world = build_world(cfg, generate(cfg)?, cfg.topology.central_region)?;
    run_methods(cfg, &world, &cfg.ordered_methods())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub region: u32,
    pub n_central: usize,
    pub confed_mean_aucroc: f64,
    pub confed_mean_aucpr: f64,
    pub central_only_mean_aucroc: f64,
    pub central_only_mean_aucpr: f64,
}

pub const SWEEP_HEADER: &str = "region,n_central,confed_mean_aucroc,confed_mean_aucpr,central_only_mean_aucroc,central_only_mean_aucpr";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.region, r.n_central, r.confed_mean_aucroc, r.confed_mean_aucpr, r.central_only_mean_aucroc, r.central_only_mean_aucpr
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SkippedRegion>,
    /// Isolation audit of each completed region's run.
    pub audits: Vec<(u32, AuditReport)>,
    pub timings_ms: BTreeMap<String, u64>,
}

/// Confederated and central-only runs with each sweep region as the central
/// analyzer, on one shared cohort.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(ExperimentError::Config("sweep: no candidate regions".into()));
    }
    let cohort = generate(cfg)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut timings = BTreeMap::new();
    let mut audits = Vec::new();
    for &region in &cfg.sweep {
        let skip = |reason: String| {
            log::warn!("sweep: skipping region {region}: {reason}");
            SkippedRegion { region, reason }
        };
        if region as usize >= cfg.cohort.n_regions {
            skipped.push(skip(format!("region does not exist ({} regions)", cfg.cohort.n_regions)));
            continue;
        }
        let t0 = Instant::now();
        let world = match build_world(cfg, cohort.clone(), region) {
            Ok(w) => w,
            Err(e) => {
                skipped.push(skip(e.to_string()));
                continue;
            }
        };
        let result = match run_methods(cfg, &world, &[Method::CentralOnly, Method::Confederated]) {
            Ok(r) => r,
            Err(e) => {
                skipped.push(skip(e.to_string()));
                continue;
            }
        };
        let mean = |m: Method, f: fn(&MetricsReport) -> f64| result.mean(m.name(), f).unwrap_or(f64::NAN);
        rows.push(SweepRow {
            region,
            n_central: result.n_central,
            confed_mean_aucroc: mean(Method::Confederated, |r| r.aucroc),
            confed_mean_aucpr: mean(Method::Confederated, |r| r.aucpr),
            central_only_mean_aucroc: mean(Method::CentralOnly, |r| r.aucroc),
            central_only_mean_aucpr: mean(Method::CentralOnly, |r| r.aucpr),
        });
        timings.insert(format!("region_{region}"), t0.elapsed().as_millis() as u64);
        audits.push((region, result.audit));
    }
    Ok(SweepResult {
        rows,
        skipped,
        audits,
        timings_ms: timings,
    })
}

/// Plain-language cohort summary: size, codes per person and prevalences.
pub fn describe_cohort(stats: &CohortStats, disease_names: &[String]) -> String {
    let mut s = format!(
        "{} people, {:.1}% missing at least one data type\n",
        stats.n_people,
        100.0 * stats.unpaired_fraction
    );
    s.push_str(&format!(
        "mean codes per person: {:.1} diagnoses, {:.1} medications, {:.1} lab tests\n",
        stats.mean_codes.diag, stats.mean_codes.med, stats.mean_codes.lab
    ));
    for (name, p) in disease_names.iter().zip(&stats.prevalence) {
        s.push_str(&format!("prevalence {name}: {:.2}%\n", 100.0 * p));
    }
    s
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub stats: CohortStats,
    pub summary: String,
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateOutcome, ExperimentError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let cohort = generate(cfg)?;
    let stats = cohort_stats(&cohort.records)?;
    let names: Vec<String> = cfg.cohort.diseases.iter().map(|d| d.name.clone()).collect();
    let mut dir = OutputDir::create(out)?;
    let mut buf = Vec::new();
    write_cohort(&mut buf, &cohort.records, &cfg.cohort.vocab_sizes, &names)?;
    dir.write("cohort.tsv", &buf)?;
    dir.write("cohort_stats.json", &json_pretty(&stats))?;
    dir.write("config.toml", cfg.to_toml().as_bytes())?;
    let summary = describe_cohort(&stats, &names);
    let mut timings = BTreeMap::new();
    timings.insert("generate".to_owned(), t0.elapsed().as_millis() as u64);
    dir.finish(RunManifest::new("generate", cfg, timings, Vec::new()))?;
    Ok(GenerateOutcome { stats, summary })
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult, ExperimentError> {
    let t0 = Instant::now();
    let mut result = run_experiment(cfg)?;
    result.timings_ms.insert("total".to_owned(), t0.elapsed().as_millis() as u64);
    let mut dir = OutputDir::create(out)?;
    dir.write("config.toml", cfg.to_toml().as_bytes())?;
    for r in &result.reports {
        dir.write(&format!("reports/{}.json", file_stem(&r.method, &r.disease)), &json_pretty(r))?;
    }
    for (method, disease, h) in &result.histories {
        dir.write(
            &format!("histories/{}.jsonl", file_stem(method, disease)),
            h.to_json_lines_untimed().as_bytes(),
        )?;
    }
    dir.write("summary.txt", result.summary().as_bytes())?;
    dir.write("audit.txt", result.audit.to_text().as_bytes())?;
    dir.write("audit.jsonl", result.audit.to_json_lines().as_bytes())?;
    dir.finish(RunManifest::new("run", cfg, result.timings_ms.clone(), Vec::new()))?;
    Ok(result)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepResult, ExperimentError> {
    let result = run_sweep(cfg)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("config.toml", cfg.to_toml().as_bytes())?;
    dir.write("sweep.csv", sweep_csv(&result.rows).as_bytes())?;
    dir.finish(RunManifest::new("sweep", cfg, result.timings_ms.clone(), result.skipped.clone()))?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub text: String,
    /// Names of the isolation rules with recorded violations.
    pub audit_failures: Vec<String>,
}

impl ReportOutcome {
    pub fn passed(&self) -> bool {
        self.audit_failures.is_empty()
    }
}

/// Merges a run directory's reports into one document. Missing files are an
/// error listing every one of them.
pub fn cmd_report(dir: &Path) -> Result<ReportOutcome, ExperimentError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let missing_manifest = || ExperimentError::MissingFiles {
        dir: dir.display().to_string(),
        missing: vec![MANIFEST_FILE.to_owned()],
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| missing_manifest())?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Io(format!("{}: {e}", manifest_path.display())))?;
    let missing: Vec<String> = manifest
        .files
        .iter()
        .filter(|f| !dir.join(&f.path).is_file())
        .map(|f| f.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ExperimentError::MissingFiles {
            dir: dir.display().to_string(),
            missing,
        });
    }
    let read = |p: &str| std::fs::read_to_string(dir.join(p)).map_err(|e| ExperimentError::Io(format!("{p}: {e}")));
    let mut reports = Vec::new();
    for f in manifest.files.iter().filter(|f| f.path.starts_with("reports/")) {
        let r: MetricsReport = serde_json::from_str(&read(&f.path)?).map_err(|e| ExperimentError::Io(format!("{}: {e}", f.path)))?;
        reports.push(r);
    }
    let order = |m: &str| {
        Method::ALL
            .iter()
            .position(|x| m == x.name() || m.starts_with(&format!("{}:", x.name())))
            .unwrap_or(Method::ALL.len())
    };
    reports.sort_by_key(|r| order(&r.method));

    let mut out = format!("{} run, config {}\n\n", manifest.command, manifest.config_hash);
    if !reports.is_empty() {
        out.push_str(&format_table(&reports));
        out.push('\n');
    }
    if manifest.files.iter().any(|f| f.path == "sweep.csv") {
        out.push_str("central-region sweep\n");
        out.push_str(&read("sweep.csv")?);
        out.push('\n');
    }
    for s in &manifest.skipped_regions {
        out.push_str(&format!("skipped region {}: {}\n", s.region, s.reason));
    }
    let mut audit_failures = Vec::new();
    if manifest.files.iter().any(|f| f.path == "audit.jsonl") {
        for line in read("audit.jsonl")?.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| ExperimentError::Io(format!("audit.jsonl: {e}")))?;
            if let Some(rule) = v.get("rule_name").and_then(|r| r.as_str()) {
                let detail = v.get("detail").and_then(|d| d.as_str()).unwrap_or("");
                out.push_str(&format!("AUDIT FAILURE rule {rule}: {detail}\n"));
                if !audit_failures.iter().any(|r| r == rule) {
                    audit_failures.push(rule.to_owned());
                }
            }
        }
        if audit_failures.is_empty() {
            out.push_str("isolation audit: PASS\n");
        }
    }
    Ok(ReportOutcome { text: out, audit_failures })
}

fn file_stem(method: &str, disease: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!("{}__{}", clean(method), clean(disease))
}

fn json_pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}
