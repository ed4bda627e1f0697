use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

/// Shape of a feed-forward network.
///
/// Every hidden layer is `linear -> [batch-norm] -> leaky-relu -> [dropout]`;
/// the final layer is `linear -> output activation`. `batch_norm` and
/// `dropout` carry one entry per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layer_sizes: Vec<usize>,
    pub leaky_slope: f64,
    pub output: OutputActivation,
    pub batch_norm: Vec<bool>,
    pub dropout: Vec<f64>,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Offsets of one linear layer (and its optional batch-norm block) inside the
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: usize,
    pub bias: usize,
    pub batch_norm: Option<BatchNormLayout>,
    pub hidden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormLayout {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl ArchSpec {
    /// Plain MLP: no batch-norm, no dropout.
    pub fn mlp(layer_sizes: &[usize], output: OutputActivation) -> Self {
        let hidden = layer_sizes.len().saturating_sub(2);
        ArchSpec {
            layer_sizes: layer_sizes.to_vec(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            output,
            batch_norm: vec![false; hidden],
            dropout: vec![0.0; hidden],
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = vec![on; self.hidden_layers()];
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = vec![rate; self.hidden_layers()];
        self
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(2)
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("validated arch")
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidArch("need at least two layers".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::InvalidArch("layer sizes must be >= 1".into()));
        }
        let hidden = self.hidden_layers();
        if self.batch_norm.len() != hidden || self.dropout.len() != hidden {
            return Err(NnError::InvalidArch(format!("expected {hidden} batch-norm/dropout entries")));
        }
        if self.dropout.iter().any(|&p| !(0.0..1.0).contains(&p) || p.is_nan()) {
            return Err(NnError::InvalidArch("dropout rate must be in [0, 1)".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(NnError::InvalidArch("leaky slope must be finite".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        let n = self.layer_sizes.len() - 1;
        (0..n)
            .map(|l| {
                let in_dim = self.layer_sizes[l];
                let out_dim = self.layer_sizes[l + 1];
                let hidden = l + 1 < n;
                let weights = offset;
                let bias = weights + in_dim * out_dim;
                offset = bias + out_dim;
                let batch_norm = if hidden && self.batch_norm[l] {
                    let bn = BatchNormLayout {
                        gamma: offset,
                        beta: offset + out_dim,
                        running_mean: offset + 2 * out_dim,
                        running_var: offset + 3 * out_dim,
                    };
                    offset += 4 * out_dim;
                    Some(bn)
                } else {
                    None
                };
                LayerLayout {
                    in_dim,
                    out_dim,
                    weights,
                    bias,
                    batch_norm,
                    hidden,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map(end_of).unwrap_or(0)
    }

    /// `true` for every slot updated by gradient descent; running batch-norm
    /// statistics are `false`.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.param_count()];
        for layer in self.layout() {
            if let Some(bn) = layer.batch_norm {
                for i in 0..layer.out_dim {
                    mask[bn.running_mean + i] = false;
                    mask[bn.running_var + i] = false;
                }
            }
        }
        mask
    }
}

fn end_of(l: &LayerLayout) -> usize {
    match l.batch_norm {
        Some(bn) => bn.running_var + l.out_dim,
        None => l.bias + l.out_dim,
    }
}
