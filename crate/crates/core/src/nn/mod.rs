//! Feed-forward network engine: dense layers with optional batch-norm and
//! inverted dropout, leaky-ReLU hidden activations, exact backpropagation,
//! plain SGD and a binary parameter file format.
//!
//! All parameters, including batch-norm running statistics, live in one flat
//! `f64` vector laid out by [`ArchSpec::layout`]. Functions here are pure:
//! new parameters are returned, never written in place.

mod arch;
mod kernels;
mod loss;
mod serialize;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

pub use arch::{ArchSpec, BatchNormLayout, LayerLayout, OutputActivation, DEFAULT_LEAKY_SLOPE};
pub use loss::{bce_loss, l1_loss, lsgan_losses, Loss, PROB_CLAMP};
pub use serialize::{deserialize_params, deserialize_tagged, serialize_params, serialize_tagged, MAGIC};

use crate::rng;

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic in the batch-norm moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("rejected input: {0}")]
    Rejected(String),
    #[error("parameter parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchSpec,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ArchSpec, values: Vec<f64>) -> Result<Self, NnError> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(NnError::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Rejected("parameters must be finite".into()));
        }
        Ok(ModelParams { arch, values })
    }

    /// Glorot-uniform weights, zero biases, unit batch-norm scale and
    /// running variance.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut values = vec![0.0; arch.param_count()];
        let mut rng = rng::rng(seed);
        for layer in arch.layout() {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for w in &mut values[layer.weights..layer.bias] {
                *w = dist.sample(&mut rng);
            }
            if let Some(bn) = layer.batch_norm {
                values[bn.gamma..bn.gamma + layer.out_dim].fill(1.0);
                values[bn.running_var..bn.running_var + layer.out_dim].fill(1.0);
            }
        }
        Ok(ModelParams { arch, values })
    }

    /// Zero weights and biases (batch-norm scale and running variance stay 1).
    pub fn zeros(arch: ArchSpec) -> Result<Self, NnError> {
        arch.validate()?;
        let mut values = vec![0.0; arch.param_count()];
        for layer in arch.layout() {
            if let Some(bn) = layer.batch_norm {
                values[bn.gamma..bn.gamma + layer.out_dim].fill(1.0);
                values[bn.running_var..bn.running_var + layer.out_dim].fill(1.0);
            }
        }
        Ok(ModelParams { arch, values })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Returns a copy with the running statistics recorded in `trace`.
    pub fn with_running_stats(mut self, trace: &Trace) -> Self {
        for (offset, stats) in &trace.running {
            self.values[*offset..*offset + stats.len()].copy_from_slice(stats);
        }
        self
    }

    fn weights(&self, l: &LayerLayout) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.in_dim, l.out_dim), &self.values[l.weights..l.bias]).expect("layout matches arch")
    }
}

/// Inputs and targets with matching row counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self, NnError> {
        if inputs.nrows() != targets.nrows() {
            return Err(NnError::LengthMismatch {
                expected: inputs.nrows(),
                found: targets.nrows(),
            });
        }
        if inputs.iter().chain(targets.iter()).any(|v| v.is_nan()) {
            return Err(NnError::Rejected("batch contains NaN".into()));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn rows(&self) -> usize {
        self.inputs.nrows()
    }
}

struct BnTrace {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

struct LayerTrace {
    input: Array2<f64>,
    sparse_input: bool,
    bn: Option<BnTrace>,
    /// Pre-activation for hidden layers (after batch-norm); pre-sigmoid for the output.
    pre_act: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
}

/// Everything a backward pass needs from a forward pass.
pub struct Trace {
    layers: Vec<LayerTrace>,
    output: Array2<f64>,
    running: Vec<(usize, Vec<f64>)>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

/// Logistic function, kept strictly inside (0, 1) even when saturated.
#[inline]
fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn check_input(params: &ModelParams, inputs: &ArrayView2<f64>) -> Result<(), NnError> {
    let width = params.arch.input_width();
    if inputs.ncols() != width {
        return Err(NnError::LengthMismatch {
            expected: width,
            found: inputs.ncols(),
        });
    }
    Ok(())
}

/// Forward pass recording intermediates for [`backprop`].
///
/// In train mode batch-norm uses batch statistics (the updated running
/// statistics are kept in the trace) and dropout masks are drawn from
/// `seed`. Eval mode uses running statistics and no dropout.
pub fn forward_trace(params: &ModelParams, inputs: ArrayView2<f64>, mode: Mode, seed: u64) -> Result<Trace, NnError> {
    check_input(params, &inputs)?;
    let arch = &params.arch;
    let layout = arch.layout();
    let rows = inputs.nrows();
    let mut layers = Vec::with_capacity(layout.len());
    let mut running = Vec::new();
    let mut x = inputs.to_owned();

    for (l, lay) in layout.iter().enumerate() {
        let sparse = l == 0 && kernels::is_sparse(&x.view());
        let w = params.weights(lay);
        let b = &params.values[lay.bias..lay.bias + lay.out_dim];
        let mut z = kernels::affine(&x.view(), &w, b, sparse);

        if !lay.hidden {
            let output = match arch.output {
                OutputActivation::Sigmoid => z.mapv(sigmoid),
                OutputActivation::Identity => z.clone(),
            };
            layers.push(LayerTrace {
                input: x,
                sparse_input: sparse,
                bn: None,
                pre_act: z,
                dropout_mask: None,
            });
            return Ok(Trace { layers, output, running });
        }

        let mut bn_trace = None;
        if let Some(bn) = lay.batch_norm {
            let d = lay.out_dim;
            let gamma = &params.values[bn.gamma..bn.gamma + d];
            let beta = &params.values[bn.beta..bn.beta + d];
            let (mean, var, batch_stats) = if mode == Mode::Train && rows > 0 {
                let mut mean = vec![0.0; d];
                for row in z.rows() {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for row in z.rows() {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let rm = &params.values[bn.running_mean..bn.running_mean + d];
                let rv = &params.values[bn.running_var..bn.running_var + d];
                running.push((
                    bn.running_mean,
                    rm.iter()
                        .zip(&mean)
                        .map(|(r, m)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * m)
                        .collect(),
                ));
                running.push((
                    bn.running_var,
                    rv.iter()
                        .zip(&var)
                        .map(|(r, v)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * v)
                        .collect(),
                ));
                (mean, var, true)
            } else {
                (
                    params.values[bn.running_mean..bn.running_mean + d].to_vec(),
                    params.values[bn.running_var..bn.running_var + d].to_vec(),
                    false,
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            for mut row in xhat.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
            let mut y = xhat.clone();
            for mut row in y.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = gamma[j] * *v + beta[j];
                }
            }
            bn_trace = Some(BnTrace {
                xhat,
                inv_std,
                batch_stats,
            });
            z = y;
        }

        let slope = arch.leaky_slope;
        let mut a = z.mapv(|v| if v > 0.0 { v } else { slope * v });
        let p = arch.dropout[l];
        let mask = if mode == Mode::Train && p > 0.0 {
            let mut r = rng::rng(rng::derive(seed, l as u64));
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_fn(a.raw_dim(), |_| if r.random::<f64>() < p { 0.0 } else { keep });
            a *= &mask;
            Some(mask)
        } else {
            None
        };

        layers.push(LayerTrace {
            input: x,
            sparse_input: sparse,
            bn: bn_trace,
            pre_act: z,
            dropout_mask: mask,
        });
        x = a;
    }
    unreachable!("validated arch ends with an output layer")
}

pub fn forward(params: &ModelParams, inputs: ArrayView2<f64>, mode: Mode, seed: u64) -> Result<Array2<f64>, NnError> {
    forward_trace(params, inputs, mode, seed).map(Trace::into_output)
}

/// Where the upstream gradient enters the network.
pub enum OutputGrad {
    /// Gradient with respect to the network output (after its activation).
    Output(Array2<f64>),
    /// Gradient with respect to the output layer's pre-activation.
    PreActivation(Array2<f64>),
}

/// Backpropagates an upstream gradient through a recorded forward pass.
///
/// Returns the gradient for every parameter slot (running statistics get 0)
/// and, when asked, the gradient with respect to the inputs.
pub fn backprop(params: &ModelParams, trace: &Trace, upstream: OutputGrad, want_input_grad: bool) -> (Vec<f64>, Option<Array2<f64>>) {
    let arch = &params.arch;
    let layout = arch.layout();
    let mut grads = vec![0.0; params.values.len()];
    let last = layout.len() - 1;

    let mut dz = match upstream {
        OutputGrad::PreActivation(g) => g,
        OutputGrad::Output(g) => match arch.output {
            OutputActivation::Identity => g,
            OutputActivation::Sigmoid => {
                let mut g = g;
                Zip::from(&mut g).and(&trace.output).for_each(|g, &p| {
                    *g *= p * (1.0 - p);
                });
                g
            }
        },
    };

    for l in (0..=last).rev() {
        let lay = &layout[l];
        let t = &trace.layers[l];
        if lay.hidden {
            // dz currently holds d(loss)/d(layer output after dropout)
            if let Some(mask) = &t.dropout_mask {
                dz *= mask;
            }
            let slope = arch.leaky_slope;
            Zip::from(&mut dz).and(&t.pre_act).for_each(|d, &z| {
                if z <= 0.0 {
                    *d *= slope;
                }
            });
            if let (Some(bn), Some(bt)) = (lay.batch_norm, &t.bn) {
                let d = lay.out_dim;
                let rows = dz.nrows() as f64;
                let gamma = &params.values[bn.gamma..bn.gamma + d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (drow, xrow) in dz.rows().into_iter().zip(bt.xhat.rows()) {
                    for j in 0..d {
                        dgamma[j] += drow[j] * xrow[j];
                        dbeta[j] += drow[j];
                    }
                }
                grads[bn.gamma..bn.gamma + d].copy_from_slice(&dgamma);
                grads[bn.beta..bn.beta + d].copy_from_slice(&dbeta);
                if bt.batch_stats {
                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                    for (mut drow, xrow) in dz.rows_mut().into_iter().zip(bt.xhat.rows()) {
                        for j in 0..d {
                            let dxhat = drow[j] * gamma[j];
                            drow[j] = bt.inv_std[j] / rows * (rows * dxhat - gamma[j] * dbeta[j] - xrow[j] * gamma[j] * dgamma[j]);
                        }
                    }
                } else {
                    for mut drow in dz.rows_mut() {
                        for j in 0..d {
                            drow[j] *= gamma[j] * bt.inv_std[j];
                        }
                    }
                }
            }
        }

        {
            let mut dw =
                ArrayViewMut2::from_shape((lay.in_dim, lay.out_dim), &mut grads[lay.weights..lay.bias]).expect("layout matches arch");
            kernels::weight_grad(&t.input.view(), &dz.view(), &mut dw, t.sparse_input);
        }
        grads[lay.bias..lay.bias + lay.out_dim].copy_from_slice(&kernels::column_sums(&dz.view()));

        if l > 0 || want_input_grad {
            let w = params.weights(lay);
            dz = dz.dot(&w.t());
        }
    }
    let input_grad = if want_input_grad { Some(dz) } else { None };
    (grads, input_grad)
}

/// Result of [`backward`].
pub struct Backward {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub trace: Trace,
}

/// Loss value and exact gradient of `loss` on `batch`.
pub fn backward(params: &ModelParams, batch: &Batch, loss: Loss, mode: Mode, seed: u64) -> Result<Backward, NnError> {
    if batch.targets.ncols() != params.arch.output_width() {
        return Err(NnError::LengthMismatch {
            expected: params.arch.output_width(),
            found: batch.targets.ncols(),
        });
    }
    let trace = forward_trace(params, batch.inputs.view(), mode, seed)?;
    let out = trace.output.view();
    let targets = batch.targets.view();
    let value = loss.value(&out, &targets);
    let upstream = if loss == Loss::Bce && params.arch.output == OutputActivation::Sigmoid {
        OutputGrad::PreActivation(loss::bce_sigmoid_pre_grad(&out, &targets))
    } else {
        OutputGrad::Output(loss.grad(&out, &targets))
    };
    let (grads, _) = backprop(params, &trace, upstream, false);
    Ok(Backward { loss: value, grads, trace })
}

/// `values - lr * grads` on trainable slots; running statistics pass through.
pub fn sgd_step(params: &ModelParams, grads: &[f64], lr: f64) -> Result<ModelParams, NnError> {
    if grads.len() != params.values.len() {
        return Err(NnError::LengthMismatch {
            expected: params.values.len(),
            found: grads.len(),
        });
    }
    let mask = params.arch.trainable_mask();
    let values: Vec<f64> = params
        .values
        .iter()
        .zip(grads)
        .zip(&mask)
        .map(|((v, g), &t)| if t { v - lr * g } else { *v })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::Rejected("sgd step produced non-finite parameters".into()));
    }
    Ok(ModelParams {
        arch: params.arch.clone(),
        values,
    })
}
