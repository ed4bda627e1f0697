//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use confed::cohort::{generate_cohort, CodeVector, CohortConfig, DataType, PersonId, PersonRecord, TypeTriple};
use confed::imputation::{build_label_view, ImputedView, StepOneModels, ViewOptions};
use confed::nn::{backward, forward, sgd_step, ArchSpec, Batch, Loss, Mode, ModelParams, OutputActivation};
use confed::silo::{CentralAnalyzer, LocalId, Silo, SiloId, SiloKind, SiloNetwork, SiloRecord};
use confed::train::{fedavg_aggregate, local_train, Aggregation, InputLayout, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- metrics ----

/// O(n²) pair counting.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Precision at each positive, walking down the ranking one threshold at a
/// time; a tie group is entered negatives first.
pub fn rank_walk_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut seen = 0.0;
    let mut hits = 0.0;
    let mut ap = 0.0;
    for s in distinct {
        let negs = scores.iter().zip(labels).filter(|(&x, &l)| x == s && !l).count();
        let poss = scores.iter().zip(labels).filter(|(&x, &l)| x == s && l).count();
        seen += negs as f64;
        for _ in 0..poss {
            seen += 1.0;
            hits += 1.0;
            ap += hits / seen;
        }
    }
    ap / n_pos
}

pub fn random_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..=200);
    // coarse grid so ties are common
    let levels = r.random_range(2..50);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

// ---- gradients ----

const STEP: f64 = 1e-5;

/// Loss computed straight from a forward pass, independent of backprop.
fn loss_at(params: &ModelParams, batch: &Batch, loss: Loss, mode: Mode) -> f64 {
    let out = forward(params, batch.inputs.view(), mode, 3).unwrap();
    loss.value(&out.view(), &batch.targets.view())
}

/// Worst relative error of backprop against central differences. The
/// denominator is floored at 1e-4 so rounding noise on near-zero gradients
/// does not dominate.
pub fn max_relative_error(params: &ModelParams, batch: &Batch, loss: Loss, mode: Mode) -> f64 {
    let analytic = backward(params, batch, loss, mode, 3).unwrap().grads;
    let mask = params.arch().trainable_mask();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        if !mask[i] {
            assert_eq!(analytic[i], 0.0);
            continue;
        }
        let mut plus = params.values().to_vec();
        let mut minus = params.values().to_vec();
        plus[i] += STEP;
        minus[i] -= STEP;
        let plus = ModelParams::new(params.arch().clone(), plus).unwrap();
        let minus = ModelParams::new(params.arch().clone(), minus).unwrap();
        let numeric = (loss_at(&plus, batch, loss, mode) - loss_at(&minus, batch, loss, mode)) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// A small random network, batch and loss. Cycles through the three losses,
/// both output activations, batch norm on and off, train and eval mode.
pub fn random_case(rng: &mut ChaCha8Rng, case: usize) -> (ModelParams, Batch, Loss, Mode) {
    let depth = rng.random_range(2..5);
    let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..6)).collect();
    let loss = [Loss::Bce, Loss::L1, Loss::SquaredError][case % 3];
    let output = if loss == Loss::Bce || case.is_multiple_of(2) {
        OutputActivation::Sigmoid
    } else {
        OutputActivation::Identity
    };
    let bn = case % 4 >= 2;
    let mode = if case % 5 == 4 { Mode::Eval } else { Mode::Train };
    let mut arch = ArchSpec::mlp(&sizes, output).with_batch_norm(bn);
    arch.leaky_slope = 0.01;
    let mut params = ModelParams::init(arch.clone(), case as u64).unwrap().into_values();
    // perturb biases / bn params away from their init values
    for v in params.iter_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    for layer in arch.layout() {
        if let Some(b) = layer.batch_norm {
            for j in 0..layer.out_dim {
                params[b.running_var + j] = rng.random_range(0.5..2.0);
            }
        }
    }
    let params = ModelParams::new(arch, params).unwrap();
    let rows = rng.random_range(3..7);
    let inputs = Array2::from_shape_fn((rows, sizes[0]), |_| rng.random_range(-1.5..1.5));
    let out_w = *sizes.last().unwrap();
    let targets = Array2::from_shape_fn((rows, out_w), |_| match loss {
        Loss::Bce => f64::from(rng.random_bool(0.5)),
        _ => rng.random_range(-1.0..1.0),
    });
    (params, Batch::new(inputs, targets).unwrap(), loss, mode)
}

/// Worst relative error over `cases` random networks.
pub fn gradient_sweep(cases: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for case in 0..cases {
        let (params, batch, loss, mode) = random_case(&mut rng, case);
        let err = max_relative_error(&params, &batch, loss, mode);
        if err >= worst.0 {
            worst = (
                err,
                format!(
                    "case {case}: {:?} {loss:?} bn={:?} mode={mode:?}",
                    params.arch().layer_sizes,
                    params.arch().batch_norm
                ),
            );
        }
    }
    worst
}

// ---- records ----

pub fn record(i: usize, x: TypeTriple<Option<CodeVector>>, labels: Vec<bool>) -> PersonRecord {
    PersonRecord {
        person_id: PersonId(i as u64),
        region: 0,
        x,
        labels,
    }
}

pub fn random_vector(r: &mut impl Rng, vocab: u32, density: f64) -> CodeVector {
    let idx = (0..vocab).filter(|_| r.random::<f64>() < density).collect();
    CodeVector::new(vocab, idx).unwrap()
}

/// Med vector is a copy of the diag vector.
pub fn copy_dataset(n: usize, vocab: u32, seed: u64) -> Vec<PersonRecord> {
    let mut r = confed::rng::rng(seed);
    (0..n)
        .map(|i| {
            let v = random_vector(&mut r, vocab, 0.1);
            record(i, TypeTriple::new(Some(v.clone()), Some(v), None), vec![false])
        })
        .collect()
}

// ---- federated averaging ----

/// `k` clinic silos holding the same `n` people, and a central analyzer
/// validating on those people too.
pub struct IdenticalSilos {
    pub network: SiloNetwork,
    pub views: Vec<ImputedView>,
    pub records: Vec<PersonRecord>,
}

pub fn identical_silos(k: usize, n: usize, seed: u64) -> IdenticalSilos {
    let mut c = CohortConfig::desk();
    c.n_people = n;
    c.n_regions = 1;
    c.region_weights = vec![1.0];
    c.unpaired_fraction = 0.0;
    c.seed = seed;
    let records = generate_cohort(&c).unwrap().records;
    let silos: Vec<Silo> = (0..k)
        .map(|s| {
            let rows = records
                .iter()
                .enumerate()
                .map(|(i, r)| SiloRecord {
                    local_id: LocalId(confed::rng::derive(seed, (s * n + i) as u64)),
                    data_type: DataType::Diag,
                    x: r.x.diag.clone().unwrap(),
                    true_labels: Some(r.labels.clone()),
                    holdout: false,
                })
                .collect();
            Silo::new(SiloId(s as u32), SiloKind::Clinic, s as u32 + 1, rows)
        })
        .collect();
    let no_models = StepOneModels {
        cgans: Vec::new(),
        classifiers: Vec::new(),
    };
    let views = silos
        .iter()
        .map(|s| build_label_view(s, &no_models, c.diseases.len(), &ViewOptions::default(), 0).unwrap())
        .collect();
    let network = SiloNetwork {
        central: CentralAnalyzer {
            region: 0,
            train: records.clone(),
            validation: records.clone(),
        },
        silos,
        vocab_sizes: c.vocab_sizes,
        n_regions: k + 1,
    };
    IdenticalSilos { network, views, records }
}

/// One full batch, one local step per round.
pub fn full_batch_config(n: usize) -> TrainConfig {
    TrainConfig {
        batch_size: n,
        local_epochs: 1,
        patience: usize::MAX,
        ..TrainConfig::default()
    }
}

/// Largest componentwise gap between FedAvg over `k` identical silos and
/// plain full-batch gradient descent, over `rounds` rounds.
pub fn fedavg_trajectory_gap(k: usize, rounds: usize) -> f64 {
    let n = 120;
    let w = identical_silos(k, n, 17);
    let layout = InputLayout::single(DataType::Diag, &w.network.vocab_sizes);
    let config = full_batch_config(n);
    let refs: Vec<&PersonRecord> = w.records.iter().collect();
    let x = layout.matrix(&refs);
    let y = Array2::from_shape_fn((n, 1), |(i, _)| f64::from(w.records[i].labels[0]));
    let batch = Batch::new(x, y).unwrap();

    let start = ModelParams::init(config.arch(layout.width()), 5).unwrap();
    let mut central = start.clone();
    let mut federated = start;
    let mut gap: f64 = 0.0;
    for t in 0..rounds {
        let g = backward(&central, &batch, Loss::Bce, Mode::Train, 0).unwrap().grads;
        central = sgd_step(&central, &g, config.lr).unwrap();
        let mut locals = Vec::new();
        let mut counts = Vec::new();
        for (silo, view) in w.network.silos.iter().zip(&w.views) {
            let up = local_train(&federated, silo, view, &layout, 0, &config, (t * 31 + counts.len()) as u64).unwrap();
            locals.push(up.params);
            counts.push(up.n);
        }
        federated = fedavg_aggregate(&locals, &counts, Aggregation::Weighted).unwrap();
        for (a, b) in central.values().iter().zip(federated.values()) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

// ---- early stopping ----

/// Literal reading of the stopping rule: the run ends at the first round
/// whose loss is the `patience`-th in a row not below the best before it.
/// Returns (rounds run, one-based best round).
pub fn stopping_oracle(losses: &[f64], patience: usize) -> (usize, usize) {
    let mut best = f64::INFINITY;
    let mut best_round = 0;
    let mut streak = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < best {
            best = l;
            best_round = i + 1;
            streak = 0;
        } else {
            streak += 1;
            if streak == patience {
                return (i + 1, best_round);
            }
        }
    }
    (losses.len(), best_round)
}

/// The library's stopper driven over the same sequence.
pub fn stopper_replay(losses: &[f64], patience: usize) -> (usize, usize) {
    let mut s = confed::train::EarlyStopper::new(patience);
    let mut ran = losses.len();
    for (i, &l) in losses.iter().enumerate() {
        s.observe(l);
        if s.should_stop() {
            ran = i + 1;
            break;
        }
    }
    (ran, s.best_index().map_or(0, |i| i + 1))
}
