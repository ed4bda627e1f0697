//! Step three and the baselines.
//!
//! Every method trains one binary model per disease and picks the round with
//! the lowest BCE on the central analyzer's validation people.

mod fedavg;

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fedavg::{fedavg_aggregate, Aggregation};

use crate::cohort::{CodeVector, DataType, PersonRecord, TypeTriple};
use crate::imputation::{build_imputed_view, build_label_view, ImputeError, ImputedView, StepOneModels, ViewOptions};
use crate::metrics::MetricError;
use crate::nn::{self, backward, forward, ArchSpec, Batch, Loss, Mode, ModelParams, NnError, OutputActivation};
use crate::rng;
use crate::silo::{silo_batches, AuditTrail, BatchPlan, MessageKind, ParamMessage, Sender, Silo, SiloError, SiloKind, SiloNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Silo(#[from] SiloError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{what}: single-class labels ({positives} positive of {n})")]
    DegenerateLabels { what: String, n: usize, positives: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Which data types feed a model, concatenated in `DataType::ALL` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    types: Vec<DataType>,
    widths: TypeTriple<usize>,
}

impl InputLayout {
    pub fn all(vocab: &TypeTriple<usize>) -> Self {
        InputLayout {
            types: DataType::ALL.to_vec(),
            widths: *vocab,
        }
    }

    pub fn single(t: DataType, vocab: &TypeTriple<usize>) -> Self {
        InputLayout {
            types: vec![t],
            widths: *vocab,
        }
    }

    pub fn types(&self) -> &[DataType] {
        &self.types
    }

    pub fn width(&self) -> usize {
        self.types.iter().map(|&t| self.widths[t]).sum()
    }

    /// Writes one row; types `get` returns `None` for stay zero.
    pub fn write_row<'v>(&self, get: impl Fn(DataType) -> Option<&'v CodeVector>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width());
        out.fill(0.0);
        let mut offset = 0;
        for &t in &self.types {
            if let Some(v) = get(t) {
                for &i in v.indices() {
                    out[offset + i as usize] = 1.0;
                }
            }
            offset += self.widths[t];
        }
    }

    pub fn matrix(&self, records: &[&PersonRecord]) -> Array2<f64> {
        let mut m = Array2::zeros((records.len(), self.width()));
        for (mut row, r) in m.rows_mut().into_iter().zip(records) {
            self.write_row(|t| r.x[t].as_ref(), row.as_slice_mut().expect("standard layout"));
        }
        m
    }
}

/// One disease's classifier with its input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub disease: usize,
    pub layout: InputLayout,
    pub params: ModelParams,
}

impl TaskModel {
    pub fn scores(&self, records: &[&PersonRecord]) -> Result<Vec<f64>, TrainError> {
        let x = self.layout.matrix(records);
        Ok(forward(&self.params, x.view(), Mode::Eval, 0)?.column(0).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub dropout: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_rounds: usize,
    pub aggregate: Aggregation,
    /// Also train on silo-internal validation rows. Experiments take this
    /// from the evaluation plan's `final_fit`.
    #[serde(skip)]
    pub use_silo_holdout: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![32],
            batch_norm: false,
            dropout: 0.0,
            local_epochs: 1,
            batch_size: 64,
            lr: 0.3,
            patience: 3,
            max_rounds: 200,
            aggregate: Aggregation::Weighted,
            use_silo_holdout: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive");
        }
        Ok(())
    }

    pub fn arch(&self, input_width: usize) -> ArchSpec {
        let mut sizes = vec![input_width];
        sizes.extend(&self.hidden);
        sizes.push(1);
        ArchSpec::mlp(&sizes, OutputActivation::Sigmoid)
            .with_batch_norm(self.batch_norm)
            .with_dropout(self.dropout)
    }
}

/// Patience-based stopping: stop once `patience` consecutive observations
/// fail to improve on the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(f64, usize)>,
    since_best: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            since_best: 0,
            seen: 0,
        }
    }

    /// Records a loss; true when it is a new strict minimum.
    pub fn observe(&mut self, loss: f64) -> bool {
        let idx = self.seen;
        self.seen += 1;
        if self.best.is_none_or(|(b, _)| loss < b) {
            self.best = Some((loss, idx));
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    /// Zero-based index of the best observation.
    pub fn best_index(&self) -> Option<usize> {
        self.best.map(|(_, i)| i)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(l, _)| l)
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub silo_count: usize,
    pub validation_loss: f64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rounds: Vec<RoundRecord>,
    /// One-based round of the returned model.
    pub best_round: usize,
}

impl History {
    pub fn to_json_lines(&self) -> String {
        self.rounds
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct") + "\n")
            .collect()
    }

    /// Same lines with the wall time zeroed, for byte comparisons.
    pub fn to_json_lines_untimed(&self) -> String {
        self.rounds
            .iter()
            .map(|r| {
                serde_json::to_string(&RoundRecord {
                    wall_time_ms: 0,
                    ..r.clone()
                })
                .expect("plain struct")
                    + "\n"
            })
            .collect()
    }
}

/// Federated state at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub t: usize,
    pub theta: ModelParams,
    pub local: Vec<ModelParams>,
    pub validation_loss_history: Vec<f64>,
}

/// One BCE mini-batch step (train mode), carrying batch-norm running
/// statistics forward.
pub fn sgd_batch_step(
    params: &ModelParams,
    inputs: Array2<f64>,
    targets: Array2<f64>,
    lr: f64,
    seed: u64,
) -> Result<(ModelParams, f64), NnError> {
    let batch = Batch::new(inputs, targets)?;
    let b = backward(params, &batch, Loss::Bce, Mode::Train, seed)?;
    let next = nn::sgd_step(params, &b.grads, lr)?.with_running_stats(&b.trace);
    Ok((next, b.loss))
}

/// Eval-mode BCE.
pub fn bce_on(params: &ModelParams, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64, NnError> {
    let out = forward(params, inputs.view(), Mode::Eval, 0)?;
    Ok(Loss::Bce.value(&out.view(), &targets.view()))
}

fn label_matrix(records: &[&PersonRecord], disease: usize) -> Array2<f64> {
    Array2::from_shape_fn((records.len(), 1), |(i, _)| f64::from(records[i].labels[disease]))
}

fn check_labels(what: &str, labels: ArrayView2<f64>) -> Result<(), TrainError> {
    let n = labels.nrows();
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 || positives == n {
        return Err(TrainError::DegenerateLabels {
            what: what.to_owned(),
            n,
            positives,
        });
    }
    Ok(())
}

/// Result of one silo's local work.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ModelParams,
    /// Rows trained on; 0 means the silo sat the round out.
    pub n: usize,
}

/// `local_epochs` of mini-batch SGD on the silo's completed records,
/// starting from `theta`.
pub fn local_train(
    theta: &ModelParams,
    silo: &Silo,
    view: &ImputedView,
    layout: &InputLayout,
    disease: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<LocalUpdate, TrainError> {
    let mut params = theta.clone();
    let mut n = 0;
    for epoch in 0..config.local_epochs {
        let plan = BatchPlan {
            disease,
            batch_size: config.batch_size,
            include_holdout: config.use_silo_holdout,
            seed: rng::derive(seed, epoch as u64),
        };
        n = 0;
        for (b, batch) in silo_batches(silo, view, layout, plan)?.enumerate() {
            n += batch.rows();
            params = sgd_batch_step(
                &params,
                batch.inputs,
                batch.targets,
                config.lr,
                rng::derive_path(seed, &[epoch as u64, b as u64, 1]),
            )?
            .0;
        }
    }
    Ok(LocalUpdate { params, n })
}

/// Central validation data in a layout.
struct Validation {
    x: Array2<f64>,
    y: Array2<f64>,
}

impl Validation {
    fn new(records: &[PersonRecord], layout: &InputLayout, disease: usize) -> Result<Self, TrainError> {
        if records.is_empty() {
            return Err(TrainError::Config("central validation set is empty".into()));
        }
        let refs: Vec<&PersonRecord> = records.iter().collect();
        Ok(Validation {
            x: layout.matrix(&refs),
            y: label_matrix(&refs, disease),
        })
    }

    fn loss(&self, params: &ModelParams) -> Result<f64, TrainError> {
        Ok(bce_on(params, &self.x, &self.y)?)
    }
}

const TAG_INIT: u64 = 0x494e_4954;
const TAG_ROUND: u64 = 0x524e_4400;
const TAG_SHIP: u64 = 0x5348_4950;

/// Sends the step-one models a silo needs through parameter messages and
/// returns what arrived.
fn ship_step_one(models: &StepOneModels, trail: &mut AuditTrail) -> Result<StepOneModels, TrainError> {
    let mut received = models.clone();
    for c in &mut received.cgans {
        let m = ParamMessage::with_role(0, Sender::Central, MessageKind::Generator, &c.generator, &c.role());
        trail.observe(&m);
        c.generator = ParamMessage::decode(&m.encode())?.params()?;
    }
    for c in &mut received.classifiers {
        let m = ParamMessage::with_role(0, Sender::Central, MessageKind::Classifier, &c.model, &c.role());
        trail.observe(&m);
        c.model = ParamMessage::decode(&m.encode())?.params()?;
    }
    Ok(received)
}

/// What silos need for step two.
#[derive(Debug, Clone, Copy)]
pub struct StepTwo<'a> {
    pub models: &'a StepOneModels,
    pub n_diseases: usize,
    pub options: ViewOptions,
}

/// Step two for every silo. Views carry labels for all diseases.
pub fn prepare_views(network: &SiloNetwork, step: &StepTwo<'_>, seed: u64, trail: &mut AuditTrail) -> Result<Vec<ImputedView>, TrainError> {
    use rayon::prelude::*;
    let received = ship_step_one(step.models, trail)?;
    let seed = rng::derive(seed, TAG_SHIP);
    network
        .silos
        .par_iter()
        .map(|s| build_imputed_view(s, &received, step.n_diseases, &step.options, seed).map_err(TrainError::from))
        .collect()
}

/// Observed-type views for the silos of one kind.
pub fn prepare_label_views(
    network: &SiloNetwork,
    kind: SiloKind,
    step: &StepTwo<'_>,
    seed: u64,
    trail: &mut AuditTrail,
) -> Result<Vec<(usize, ImputedView)>, TrainError> {
    let received = ship_step_one(step.models, trail)?;
    let seed = rng::derive(seed, TAG_SHIP);
    network
        .silos
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind() == kind)
        .map(|(i, s)| Ok((i, build_label_view(s, &received, step.n_diseases, &step.options, seed)?)))
        .collect()
}

/// Federated averaging over the given silos (indices into the network)
/// with their views.
pub fn run_federated(
    network: &SiloNetwork,
    participants: &[(usize, &ImputedView)],
    layout: &InputLayout,
    disease: usize,
    config: &TrainConfig,
    trail: &mut AuditTrail,
) -> Result<(TaskModel, History), TrainError> {
    use rayon::prelude::*;
    config.validate()?;
    let validation = Validation::new(&network.central.validation, layout, disease)?;
    let mut state = RoundState {
        t: 0,
        theta: ModelParams::init(config.arch(layout.width()), rng::derive(config.seed, TAG_INIT))?,
        local: Vec::new(),
        validation_loss_history: Vec::new(),
    };
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = state.theta.clone();
    let mut history = History::default();
    let start = Instant::now();
    while state.t < config.max_rounds {
        state.t += 1;
        let broadcast = ParamMessage::new(state.t as u64, Sender::Central, MessageKind::GlobalModel, &state.theta);
        trail.observe(&broadcast);
        let wire = broadcast.encode();
        let round_seed = rng::derive_path(config.seed, &[TAG_ROUND, state.t as u64]);
        let replies: Vec<(Vec<u8>, usize)> = participants
            .par_iter()
            .map(|&(i, view)| {
                let silo = &network.silos[i];
                let theta = ParamMessage::decode(&wire)?.params()?;
                let seed = rng::derive(round_seed, u64::from(silo.id().0));
                let up = local_train(&theta, silo, view, layout, disease, config, seed)?;
                let reply = ParamMessage::new(state.t as u64, Sender::Silo(silo.id()), MessageKind::LocalUpdate, &up.params);
                Ok((reply.encode(), up.n))
            })
            .collect::<Result<_, TrainError>>()?;
        let mut counts = Vec::with_capacity(replies.len());
        state.local.clear();
        for (bytes, n) in replies {
            let msg = ParamMessage::decode(&bytes)?;
            trail.observe(&msg);
            state.local.push(msg.params()?);
            counts.push(n);
        }
        if counts.iter().all(|&n| n == 0) {
            return Err(TrainError::Config("no participating silo has training rows".into()));
        }
        state.theta = fedavg_aggregate(&state.local, &counts, config.aggregate)?;
        let loss = validation.loss(&state.theta)?;
        state.validation_loss_history.push(loss);
        history.rounds.push(RoundRecord {
            round: state.t,
            silo_count: participants.len(),
            validation_loss: loss,
            wall_time_ms: start.elapsed().as_millis() as u64,
        });
        if stopper.observe(loss) {
            best = state.theta.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    history.best_round = stopper.best_index().map_or(0, |i| i + 1);
    Ok((
        TaskModel {
            disease,
            layout: layout.clone(),
            params: best,
        },
        history,
    ))
}

/// Steps two and three: complete every silo's records, then federate over
/// all silos.
pub fn run_confederated(
    network: &SiloNetwork,
    step: &StepTwo<'_>,
    disease: usize,
    config: &TrainConfig,
    trail: &mut AuditTrail,
) -> Result<(TaskModel, History), TrainError> {
    let views = prepare_views(network, step, config.seed, trail)?;
    let participants: Vec<(usize, &ImputedView)> = views.iter().enumerate().collect();
    let layout = InputLayout::all(&network.vocab_sizes);
    run_federated(network, &participants, &layout, disease, config, trail)
}

/// Federated averaging over one silo kind with that type as the only input.
pub fn run_single_type_federated(
    network: &SiloNetwork,
    data_type: DataType,
    step: &StepTwo<'_>,
    disease: usize,
    config: &TrainConfig,
    trail: &mut AuditTrail,
) -> Result<(TaskModel, History), TrainError> {
    let kind = SiloKind::for_type(data_type);
    let views = prepare_label_views(network, kind, step, config.seed, trail)?;
    let participants: Vec<(usize, &ImputedView)> = views.iter().map(|(i, v)| (*i, v)).collect();
    let layout = InputLayout::single(data_type, &network.vocab_sizes);
    run_federated(network, &participants, &layout, disease, config, trail)
}

/// Ordinary mini-batch training on pooled records, one epoch per round.
pub fn run_centralized(
    train: &[PersonRecord],
    validation: &[PersonRecord],
    layout: &InputLayout,
    disease: usize,
    config: &TrainConfig,
) -> Result<(TaskModel, History), TrainError> {
    config.validate()?;
    let refs: Vec<&PersonRecord> = train.iter().collect();
    let x = layout.matrix(&refs);
    let y = label_matrix(&refs, disease);
    check_labels("centralized training set", y.view())?;
    let validation = Validation::new(validation, layout, disease)?;
    let mut theta = ModelParams::init(config.arch(layout.width()), rng::derive(config.seed, TAG_INIT))?;
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = theta.clone();
    let mut history = History::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..refs.len()).collect();
    for t in 1..=config.max_rounds {
        let round_seed = rng::derive_path(config.seed, &[TAG_ROUND, t as u64]);
        order.shuffle(&mut rng::rng(round_seed));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let seed = rng::derive(round_seed, b as u64 + 1);
            theta = sgd_batch_step(&theta, x.select(Axis(0), chunk), y.select(Axis(0), chunk), config.lr, seed)?.0;
        }
        let loss = validation.loss(&theta)?;
        history.rounds.push(RoundRecord {
            round: t,
            silo_count: 1,
            validation_loss: loss,
            wall_time_ms: start.elapsed().as_millis() as u64,
        });
        if stopper.observe(loss) {
            best = theta.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    history.best_round = stopper.best_index().map_or(0, |i| i + 1);
    Ok((
        TaskModel {
            disease,
            layout: layout.clone(),
            params: best,
        },
        history,
    ))
}

/// Centralized training restricted to the central analyzer's own records.
pub fn run_central_only(network: &SiloNetwork, disease: usize, config: &TrainConfig) -> Result<(TaskModel, History), TrainError> {
    let layout = InputLayout::all(&network.vocab_sizes);
    run_centralized(&network.central.train, &network.central.validation, &layout, disease, config)
}
