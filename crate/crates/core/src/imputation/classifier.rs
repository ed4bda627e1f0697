//! Per-(data type, disease) label classifiers trained on central data.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{dense_rows, ImputeError};
use crate::cohort::{CodeVector, DataType, PersonRecord};
use crate::nn::{forward, ArchSpec, Mode, ModelParams, OutputActivation};
use crate::rng;
use crate::train::{bce_on, sgd_batch_step, EarlyStopper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierHyper {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub batch_norm: bool,
    pub dropout: f64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        ClassifierHyper {
            hidden: Vec::new(),
            lr: 0.1,
            max_epochs: 100,
            batch_size: 32,
            patience: 10,
            validation_fraction: 0.2,
            batch_norm: false,
            dropout: 0.0,
        }
    }
}

impl ClassifierHyper {
    pub fn arch(&self, width: usize) -> ArchSpec {
        let mut sizes = vec![width];
        sizes.extend(&self.hidden);
        sizes.push(1);
        ArchSpec::mlp(&sizes, OutputActivation::Sigmoid)
            .with_batch_norm(self.batch_norm)
            .with_dropout(self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelClassifier {
    pub src: DataType,
    pub disease: usize,
    pub model: ModelParams,
    /// Held-out BCE per epoch.
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
}

impl LabelClassifier {
    pub fn role(&self) -> String {
        format!("classifier:{}:{}", self.src, self.disease)
    }

    pub fn predict(&self, x: &[&CodeVector]) -> Result<Vec<f64>, ImputeError> {
        let width = self.model.arch().input_width();
        if let Some(v) = x.iter().find(|v| v.vocab_size() as usize != width) {
            return Err(ImputeError::Width {
                expected: width,
                found: v.vocab_size() as usize,
            });
        }
        let inputs = dense_rows(x, width);
        Ok(forward(&self.model, inputs.view(), Mode::Eval, 0)?.column(0).to_vec())
    }
}

pub fn train_label_classifier(
    records: &[PersonRecord],
    src: DataType,
    disease: usize,
    width: usize,
    hyper: &ClassifierHyper,
    seed: u64,
) -> Result<LabelClassifier, ImputeError> {
    let rows: Vec<&PersonRecord> = records.iter().filter(|r| r.x[src].is_some() && disease < r.labels.len()).collect();
    let n_pos = rows.iter().filter(|r| r.labels[disease]).count();
    if n_pos == 0 || n_pos == rows.len() {
        return Err(ImputeError::DegenerateLabels {
            what: format!("classifier {src}:{disease}"),
            n: rows.len(),
            positives: n_pos,
        });
    }
    if hyper.batch_size == 0 || !(hyper.validation_fraction > 0.0 && hyper.validation_fraction < 1.0) {
        return Err(ImputeError::Config(
            "batch_size must be positive, validation_fraction in (0,1)".into(),
        ));
    }
    let xs: Vec<&CodeVector> = rows.iter().map(|r| r.x[src].as_ref().expect("filtered")).collect();
    let inputs = dense_rows(&xs, width);
    let targets = Array2::from_shape_fn((rows.len(), 1), |(i, _)| f64::from(rows[i].labels[disease]));

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, 1)));
    let n_val = ((hyper.validation_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
    let (val, train) = order.split_at(n_val);
    let val_x = inputs.select(Axis(0), val);
    let val_y = targets.select(Axis(0), val);

    let mut model = ModelParams::init(hyper.arch(width), rng::derive(seed, 2))?;
    let mut stopper = EarlyStopper::new(hyper.patience);
    let mut best = model.clone();
    let mut val_history = Vec::new();
    let mut train = train.to_vec();
    for epoch in 0..hyper.max_epochs {
        let epoch_seed = rng::derive_path(seed, &[3, epoch as u64]);
        train.shuffle(&mut rng::rng(epoch_seed));
        for (b, chunk) in train.chunks(hyper.batch_size).enumerate() {
            let x = inputs.select(Axis(0), chunk);
            let y = targets.select(Axis(0), chunk);
            model = sgd_batch_step(&model, x, y, hyper.lr, rng::derive(epoch_seed, b as u64))?.0;
        }
        let loss = bce_on(&model, &val_x, &val_y)?;
        val_history.push(loss);
        if stopper.observe(loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(LabelClassifier {
        src,
        disease,
        model: best,
        best_epoch: stopper.best_index().unwrap_or(0),
        val_history,
    })
}
