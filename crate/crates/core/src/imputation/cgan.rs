//! Conditional GAN from one data type to another.
//!
//! The generator maps `src ++ z` (z standard normal) to target-code
//! probabilities. The discriminator scores `src ++ tgt` pairs. Updates
//! alternate one discriminator step and one generator step per mini-batch,
//! both on least-squares adversarial losses; the generator adds
//! `lambda_match` times the L1 distance to the real target on paired rows.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{dense_rows, ImputeError};
use crate::cohort::{CodeVector, DataType, PersonRecord};
use crate::nn::{self, backprop, forward, forward_trace, ArchSpec, Mode, ModelParams, OutputActivation, OutputGrad};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CganHyper {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub noise_dim: usize,
    pub lambda_match: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub batch_norm: bool,
    pub dropout: f64,
    /// Fraction of paired rows held out to pick the best epoch.
    pub validation_fraction: f64,
}

impl Default for CganHyper {
    fn default() -> Self {
        CganHyper {
            generator_hidden: vec![128],
            discriminator_hidden: vec![64],
            noise_dim: 100,
            lambda_match: 10.0,
            epochs: 40,
            batch_size: 64,
            generator_lr: 1.0,
            discriminator_lr: 0.01,
            batch_norm: false,
            dropout: 0.0,
            validation_fraction: 0.2,
        }
    }
}

impl CganHyper {
    pub fn generator_arch(&self, src_width: usize, tgt_width: usize) -> ArchSpec {
        let mut sizes = vec![src_width + self.noise_dim];
        sizes.extend(&self.generator_hidden);
        sizes.push(tgt_width);
        ArchSpec::mlp(&sizes, OutputActivation::Sigmoid)
            .with_batch_norm(self.batch_norm)
            .with_dropout(self.dropout)
    }

    pub fn discriminator_arch(&self, src_width: usize, tgt_width: usize) -> ArchSpec {
        let mut sizes = vec![src_width + tgt_width];
        sizes.extend(&self.discriminator_hidden);
        sizes.push(1);
        ArchSpec::mlp(&sizes, OutputActivation::Identity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CganWarning {
    /// No paired rows: trained on the adversarial terms alone.
    AdversarialOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CganEpoch {
    pub disc_loss: f64,
    pub gen_loss: f64,
    /// Mean L1 on held-out paired rows; `None` without paired rows.
    pub val_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CganModel {
    pub src: DataType,
    pub tgt: DataType,
    pub generator: ModelParams,
    pub discriminator: ModelParams,
    pub lambda_match: f64,
    pub noise_dim: usize,
    /// Zero-based epoch the returned generator comes from.
    pub best_epoch: usize,
    pub history: Vec<CganEpoch>,
    pub warning: Option<CganWarning>,
}

impl CganModel {
    pub fn role(&self) -> String {
        format!("generator:{}->{}", self.src, self.tgt)
    }

    pub fn src_width(&self) -> usize {
        self.generator.arch().input_width() - self.noise_dim
    }

    pub fn tgt_width(&self) -> usize {
        self.generator.arch().output_width()
    }
}

/// Stream tags below the run seed.
const TAG_VAL_SPLIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_VAL_NOISE: u64 = 3;
const TAG_INIT_G: u64 = 4;
const TAG_INIT_D: u64 = 5;

fn noise(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::rng(seed);
    Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(&mut r))
}

fn hstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("equal row counts")
}

/// Generator probabilities for each source row, with the row's noise drawn
/// from `z_seeds[i]`.
pub fn generate(cgan: &CganModel, src: &Array2<f64>, z_seeds: &[u64]) -> Result<Array2<f64>, ImputeError> {
    if src.ncols() != cgan.src_width() {
        return Err(ImputeError::Width {
            expected: cgan.src_width(),
            found: src.ncols(),
        });
    }
    let mut z = Array2::zeros((src.nrows(), cgan.noise_dim));
    for (mut row, &seed) in z.rows_mut().into_iter().zip(z_seeds) {
        let mut r = rng::rng(seed);
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r));
    }
    Ok(forward(&cgan.generator, hstack(src, &z).view(), Mode::Eval, 0)?)
}

/// One imputation: the probabilities and their binarization at 0.5 (a value
/// of exactly 0.5 maps to absent).
pub fn impute(cgan: &CganModel, x_src: &CodeVector, z_seed: u64) -> Result<(Vec<f64>, CodeVector), ImputeError> {
    if x_src.vocab_size() as usize != cgan.src_width() {
        return Err(ImputeError::Width {
            expected: cgan.src_width(),
            found: x_src.vocab_size() as usize,
        });
    }
    let src = dense_rows(&[x_src], cgan.src_width());
    let probs = generate(cgan, &src, &[z_seed])?.row(0).to_vec();
    let binary = CodeVector::from_threshold(&probs, 0.5);
    Ok((probs, binary))
}

struct Data {
    src: Array2<f64>,
    /// Target row for paired records.
    tgt: Vec<Option<usize>>,
    tgt_rows: Array2<f64>,
}

fn collect(records: &[PersonRecord], src: DataType, tgt: DataType, widths: (usize, usize)) -> Data {
    let with_src: Vec<&PersonRecord> = records.iter().filter(|r| r.x[src].is_some()).collect();
    let srcs: Vec<&CodeVector> = with_src.iter().map(|r| r.x[src].as_ref().expect("filtered")).collect();
    let mut tgts = Vec::new();
    let tgt_idx = with_src
        .iter()
        .map(|r| {
            r.x[tgt].as_ref().map(|v| {
                tgts.push(v);
                tgts.len() - 1
            })
        })
        .collect();
    Data {
        src: dense_rows(&srcs, widths.0),
        tgt: tgt_idx,
        tgt_rows: dense_rows(&tgts, widths.1),
    }
}

pub fn train_cgan(
    records: &[PersonRecord],
    src: DataType,
    tgt: DataType,
    widths: (usize, usize),
    hyper: &CganHyper,
    seed: u64,
) -> Result<CganModel, ImputeError> {
    let g = ModelParams::init(hyper.generator_arch(widths.0, widths.1), rng::derive(seed, TAG_INIT_G))?;
    let d = ModelParams::init(hyper.discriminator_arch(widths.0, widths.1), rng::derive(seed, TAG_INIT_D))?;
    train_cgan_with_init(records, src, tgt, hyper, seed, g, d)
}

/// [`train_cgan`] from given starting networks. `widths` are read from them.
pub fn train_cgan_with_init(
    records: &[PersonRecord],
    src: DataType,
    tgt: DataType,
    hyper: &CganHyper,
    seed: u64,
    generator: ModelParams,
    discriminator: ModelParams,
) -> Result<CganModel, ImputeError> {
    let tgt_w = generator.arch().output_width();
    let src_w = generator
        .arch()
        .input_width()
        .checked_sub(hyper.noise_dim)
        .ok_or_else(|| ImputeError::Config("generator narrower than the noise".into()))?;
    if discriminator.arch().input_width() != src_w + tgt_w || discriminator.arch().output_width() != 1 {
        return Err(ImputeError::Config("discriminator does not take src ++ tgt".into()));
    }
    if hyper.batch_size == 0 || !(0.0..1.0).contains(&hyper.validation_fraction) {
        return Err(ImputeError::Config(
            "batch_size must be positive, validation_fraction in [0,1)".into(),
        ));
    }
    let data = collect(records, src, tgt, (src_w, tgt_w));
    if data.src.nrows() == 0 {
        return Err(ImputeError::NoSourceRows { src, tgt });
    }

    let mut paired: Vec<usize> = (0..data.tgt.len()).filter(|&i| data.tgt[i].is_some()).collect();
    let warning = if paired.is_empty() && hyper.lambda_match > 0.0 {
        log::warn!("cgan {src}->{tgt}: no paired rows, training adversarial-only");
        Some(CganWarning::AdversarialOnly)
    } else {
        None
    };
    paired.shuffle(&mut rng::rng(rng::derive(seed, TAG_VAL_SPLIT)));
    let n_val = (hyper.validation_fraction * paired.len() as f64).round() as usize;
    let val: Vec<usize> = paired[..n_val].to_vec();
    let mut is_val = vec![false; data.tgt.len()];
    for &i in &val {
        is_val[i] = true;
    }
    let train_rows: Vec<usize> = (0..data.tgt.len()).filter(|&i| !is_val[i]).collect();
    let val_src = data.src.select(Axis(0), &val);
    let val_tgt = data
        .tgt_rows
        .select(Axis(0), &val.iter().map(|&i| data.tgt[i].expect("paired")).collect::<Vec<_>>());
    let val_z_seeds: Vec<u64> = (0..val.len() as u64).map(|i| rng::derive_path(seed, &[TAG_VAL_NOISE, i])).collect();

    let mut model = CganModel {
        src,
        tgt,
        generator,
        discriminator,
        lambda_match: hyper.lambda_match,
        noise_dim: hyper.noise_dim,
        best_epoch: 0,
        history: Vec::with_capacity(hyper.epochs),
        warning,
    };
    let mut best: Option<(f64, ModelParams, ModelParams)> = None;
    for epoch in 0..hyper.epochs {
        let epoch_seed = rng::derive_path(seed, &[TAG_EPOCH, epoch as u64]);
        let mut order = train_rows.clone();
        order.shuffle(&mut rng::rng(epoch_seed));
        let (mut disc_sum, mut gen_sum) = (0.0, 0.0);
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch_seed = rng::derive(epoch_seed, b as u64);
            let (dl, gl) = step(&mut model, &data, chunk, hyper, batch_seed)?;
            disc_sum += dl;
            gen_sum += gl;
            n_batches += 1;
        }
        let val_l1 = if val.is_empty() {
            None
        } else {
            let probs = generate(&model, &val_src, &val_z_seeds)?;
            Some((&probs - &val_tgt).mapv(f64::abs).mean().unwrap_or(0.0))
        };
        model.history.push(CganEpoch {
            disc_loss: disc_sum / n_batches.max(1) as f64,
            gen_loss: gen_sum / n_batches.max(1) as f64,
            val_l1,
        });
        // without validation rows the last epoch wins
        let score = val_l1.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b || val_l1.is_none()) {
            model.best_epoch = epoch;
            best = Some((score, model.generator.clone(), model.discriminator.clone()));
        }
    }
    if let Some((_, g, d)) = best {
        model.generator = g;
        model.discriminator = d;
    }
    Ok(model)
}

/// One discriminator step then one generator step; returns both losses.
fn step(model: &mut CganModel, data: &Data, rows: &[usize], hyper: &CganHyper, seed: u64) -> Result<(f64, f64), ImputeError> {
    let n = rows.len();
    let src = data.src.select(Axis(0), rows);
    let z = noise(n, hyper.noise_dim, rng::derive(seed, 0));
    let g_trace = forward_trace(&model.generator, hstack(&src, &z).view(), Mode::Train, rng::derive(seed, 1))?;
    let fake = g_trace.output().clone();

    let paired: Vec<(usize, usize)> = rows.iter().enumerate().filter_map(|(k, &i)| data.tgt[i].map(|t| (k, t))).collect();
    let n_real = paired.len();
    let real_src = src.select(Axis(0), &paired.iter().map(|p| p.0).collect::<Vec<_>>());
    let real_tgt = data.tgt_rows.select(Axis(0), &paired.iter().map(|p| p.1).collect::<Vec<_>>());

    // discriminator: real pairs toward 1, generated pairs toward 0
    let fake_in = hstack(&src, &fake);
    let d_in = ndarray::concatenate(Axis(0), &[hstack(&real_src, &real_tgt).view(), fake_in.view()]).expect("same width");
    let d_trace = forward_trace(&model.discriminator, d_in.view(), Mode::Train, rng::derive(seed, 2))?;
    let d_out = d_trace.output().column(0).to_owned();
    let (d_real, d_fake) = d_out.view().split_at(Axis(0), n_real);
    let (disc_loss, _) = nn::lsgan_losses(d_real.as_slice().expect("contiguous"), d_fake.as_slice().expect("contiguous"));
    let mut up = Array2::zeros((n_real + n, 1));
    for k in 0..n_real {
        up[(k, 0)] = 2.0 * (d_out[k] - 1.0) / n_real as f64;
    }
    for k in 0..n {
        up[(n_real + k, 0)] = 2.0 * d_out[n_real + k] / n as f64;
    }
    let (dg, _) = backprop(&model.discriminator, &d_trace, OutputGrad::Output(up), false);
    model.discriminator = nn::sgd_step(&model.discriminator, &dg, hyper.discriminator_lr)?.with_running_stats(&d_trace);

    // generator: fool the updated discriminator, match paired targets
    let d_trace = forward_trace(&model.discriminator, fake_in.view(), Mode::Train, rng::derive(seed, 3))?;
    let d_fake = d_trace.output().column(0).to_owned();
    let adv = d_fake.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / n as f64;
    let up = d_fake.mapv(|d| 2.0 * (d - 1.0) / n as f64).insert_axis(Axis(1));
    let (_, dx) = backprop(&model.discriminator, &d_trace, OutputGrad::Output(up), true);
    let src_w = src.ncols();
    // adversarial part through the output sigmoid
    let mut g_up = dx.expect("requested").slice(s![.., src_w..]).to_owned();
    g_up.zip_mut_with(&fake, |g, &p| *g *= p * (1.0 - p));
    // The matching term's gradient is taken at the logits as the residual
    // p - y: the L1 subgradient rescaled per element by 1/p or 1/(1-p).
    // Through the sigmoid the plain subgradient vanishes on sparse targets
    // and the generator collapses to all zeros.
    let mut l1 = 0.0;
    if n_real > 0 && hyper.lambda_match > 0.0 {
        let scale = hyper.lambda_match / (n_real * fake.ncols()) as f64;
        for (j, &(k, _)) in paired.iter().enumerate() {
            for c in 0..fake.ncols() {
                let diff = fake[(k, c)] - real_tgt[(j, c)];
                l1 += diff.abs();
                g_up[(k, c)] += scale * diff;
            }
        }
        l1 /= (n_real * fake.ncols()) as f64;
    }
    let (gg, _) = backprop(&model.generator, &g_trace, OutputGrad::PreActivation(g_up), false);
    model.generator = nn::sgd_step(&model.generator, &gg, hyper.generator_lr)?.with_running_stats(&g_trace);
    Ok((disc_loss, adv + hyper.lambda_match * l1))
}
