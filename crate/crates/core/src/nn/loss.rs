use ndarray::{Array2, ArrayView2, Zip};

use super::NnError;

/// Predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Loss applied to network outputs against batch targets. All losses are
/// means over every output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Binary cross entropy on probabilities.
    Bce,
    /// Mean absolute difference.
    L1,
    /// Mean squared difference, used for the least-squares adversarial terms.
    SquaredError,
}

fn check_len(a: usize, b: usize) -> Result<(), NnError> {
    if a != b {
        return Err(NnError::LengthMismatch { expected: a, found: b });
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
fn bce_term(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64, NnError> {
    check_len(pred.len(), target.len())?;
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(NnError::Rejected("bce predictions must lie in [0, 1]".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(&p, &y)| bce_term(p, y)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<f64, NnError> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

fn mean_sq_from(values: &[f64], target: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| (v - target).powi(2)).sum::<f64>() / values.len() as f64
}

/// Least-squares adversarial losses: `(discriminator, generator)`.
///
/// An empty side contributes zero.
pub fn lsgan_losses(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let disc = mean_sq_from(d_real, 1.0) + mean_sq_from(d_fake, 0.0);
    let gen = mean_sq_from(d_fake, 1.0);
    (disc, gen)
}

impl Loss {
    pub fn value(self, out: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> f64 {
        let n = out.len();
        if n == 0 {
            return 0.0;
        }
        let mut sum = 0.0;
        Zip::from(out).and(targets).for_each(|&o, &t| {
            sum += match self {
                Loss::Bce => bce_term(o, t),
                Loss::L1 => (o - t).abs(),
                Loss::SquaredError => (o - t) * (o - t),
            };
        });
        sum / n as f64
    }

    /// Gradient of the loss with respect to the outputs.
    pub fn grad(self, out: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> Array2<f64> {
        let m = out.len().max(1) as f64;
        let mut g = Array2::zeros(out.raw_dim());
        Zip::from(&mut g).and(out).and(targets).for_each(|g, &o, &t| {
            *g = match self {
                Loss::Bce => {
                    if o <= PROB_CLAMP || o >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        (o - t) / (o * (1.0 - o)) / m
                    }
                }
                Loss::L1 => {
                    let d = o - t;
                    if d > 0.0 {
                        1.0 / m
                    } else if d < 0.0 {
                        -1.0 / m
                    } else {
                        0.0
                    }
                }
                Loss::SquaredError => 2.0 * (o - t) / m,
            };
        });
        g
    }
}

/// BCE gradient with respect to sigmoid pre-activations, `(p - y) / m`,
/// zeroed where the clamp is active.
pub(crate) fn bce_sigmoid_pre_grad(out: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> Array2<f64> {
    let m = out.len().max(1) as f64;
    let mut g = Array2::zeros(out.raw_dim());
    Zip::from(&mut g).and(out).and(targets).for_each(|g, &p, &y| {
        *g = if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
            0.0
        } else {
            (p - y) / m
        };
    });
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bce_worked_values() {
        let v = bce_loss(&[0.5], &[1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(v < 1e-6);
        let v = bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let oracle = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((v - oracle).abs() < 1e-12);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
        assert!(bce_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn l1_worked_values() {
        assert_eq!(l1_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_loss(&[1.0, 2.0], &[0.0, 4.0]).unwrap(), 1.5);
        assert!(l1_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn lsgan_worked_values() {
        assert_eq!(lsgan_losses(&[1.0, 1.0], &[0.0, 0.0]), (0.0, 1.0));
        assert_eq!(lsgan_losses(&[0.5; 3], &[0.5; 4]), (0.5, 0.25));
    }

    proptest! {
        #[test]
        fn l1_matches_elementwise_oracle(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut oracle = 0.0;
            for i in 0..a.len() {
                oracle += if a[i] > b[i] { a[i] - b[i] } else { b[i] - a[i] };
            }
            oracle /= a.len() as f64;
            prop_assert!((l1_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
        }

        #[test]
        fn lsgan_matches_direct_arithmetic(real in prop::collection::vec(-3.0f64..3.0, 1..20),
                                           fake in prop::collection::vec(-3.0f64..3.0, 1..20)) {
            let (d, g) = lsgan_losses(&real, &fake);
            let mut r = 0.0;
            for x in &real { r += (x - 1.0) * (x - 1.0); }
            let mut f = 0.0;
            let mut gf = 0.0;
            for x in &fake { f += x * x; gf += (x - 1.0) * (x - 1.0); }
            prop_assert!((d - (r / real.len() as f64 + f / fake.len() as f64)).abs() < 1e-12);
            prop_assert!((g - gf / fake.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn bce_is_finite_and_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let y: Vec<f64> = p.iter().enumerate().map(|(i, _)| (i % 2) as f64).collect();
            let v = bce_loss(&p, &y).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
