use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Weights n_s / Σ n_s.
    Weighted,
    /// Weights n_s / (S · Σ n_s), the aggregation formula taken literally.
    /// Shrinks parameters by a factor S every round.
    PaperLiteral,
}

/// Weighted mean of silo parameter vectors, running statistics included.
/// Silos with `n_s = 0` get weight 0.
pub fn fedavg_aggregate(thetas: &[ModelParams], counts: &[usize], mode: Aggregation) -> Result<ModelParams, TrainError> {
    if thetas.is_empty() || thetas.len() != counts.len() {
        return Err(TrainError::Config(format!(
            "{} parameter sets for {} counts",
            thetas.len(),
            counts.len()
        )));
    }
    let arch = thetas[0].arch();
    if thetas.iter().any(|t| t.arch() != arch) {
        return Err(TrainError::Config("silo models disagree on architecture".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TrainError::Config("all silo counts are zero".into()));
    }
    let scale = match mode {
        Aggregation::Weighted => 1.0,
        Aggregation::PaperLiteral => 1.0 / thetas.len() as f64,
    };
    let mut out = vec![0.0; thetas[0].len()];
    for (theta, &n) in thetas.iter().zip(counts) {
        if n == 0 {
            continue;
        }
        let w = scale * n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(theta.values()) {
            *o += w * v;
        }
    }
    Ok(ModelParams::new(arch.clone(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, OutputActivation};

    fn scalar(v: f64) -> ModelParams {
        // 1-1 identity net: weight then bias
        ModelParams::new(ArchSpec::mlp(&[1, 1], OutputActivation::Identity), vec![v, 0.0]).unwrap()
    }

    #[test]
    fn two_silo_weighted_mean() {
        let agg = fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[1, 3], Aggregation::Weighted).unwrap();
        assert_eq!(agg.values()[0], 3.0);
    }

    #[test]
    fn literal_mode_divides_by_silo_count() {
        let agg = fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[1, 3], Aggregation::PaperLiteral).unwrap();
        assert_eq!(agg.values()[0], 1.5);
    }

    #[test]
    fn empty_silos_do_not_move_the_mean() {
        let agg = fedavg_aggregate(&[scalar(2.0), scalar(100.0)], &[5, 0], Aggregation::Weighted).unwrap();
        assert_eq!(agg.values()[0], 2.0);
        assert!(fedavg_aggregate(&[scalar(2.0)], &[0], Aggregation::Weighted).is_err());
    }

    #[test]
    fn rejects_mismatched_architectures() {
        let other = ModelParams::zeros(ArchSpec::mlp(&[2, 1], OutputActivation::Identity)).unwrap();
        assert!(fedavg_aggregate(&[scalar(1.0), other], &[1, 1], Aggregation::Weighted).is_err());
    }
}
