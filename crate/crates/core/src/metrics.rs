//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::BaseQuadrature;
use crate::variational::PredictiveDistribution;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: "metric inputs",
            expected: a,
            got: b,
        });
    }
    if a == 0 {
        return Err(Error::InvalidArgument("metrics need at least one point".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_len(pred.len(), y.len())?;
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Fraction of labels matched by thresholding probabilities at ½.
pub fn accuracy(prob: &[f64], labels: &[f64]) -> Result<f64> {
    check_len(prob.len(), labels.len())?;
    let hits = prob
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p > 0.5) == (**l > 0.5))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic; ties get half credit.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| **l > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l > 0.5)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    /// Squared error of the predictive mean, or of the class probability.
    pub mse: f64,
    pub nll: f64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

/// Metrics for a predictive distribution on the standardized scale.
pub fn evaluate(pred: &PredictiveDistribution, y: &[f64]) -> Result<Metrics> {
    check_len(pred.len(), y.len())?;
    let q = BaseQuadrature::default();
    let nll = pred.nll(y, &q)?;
    if pred.likelihood.is_classification() {
        let p: Vec<f64> = (0..pred.len())
            .map(|i| pred.class_probability(i, &q))
            .collect::<Result<_>>()?;
        Ok(Metrics {
            n: y.len(),
            mse: mse(&p, y)?,
            nll,
            accuracy: Some(accuracy(&p, y)?),
            auc: Some(auc(&p, y)?),
        })
    } else {
        Ok(Metrics {
            n: y.len(),
            mse: mse(&pred.mu_f, y)?,
            nll,
            accuracy: None,
            auc: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_extremes_ties_and_single_class() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_of_random_scores_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let l: Vec<f64> = (0..10_000).map(|i| (i % 2) as f64).collect();
        assert!((auc(&s, &l).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn mean_prediction_mse_is_variance() {
        let y = [1.0f64, 2.0, 4.0, 7.0];
        let m = 3.5f64;
        let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0;
        assert!((mse(&[m; 4], &y).unwrap() - var).abs() < 1e-15);
        assert_eq!(accuracy(&[0.7, 0.2, 0.6], &[1.0, 0.0, 0.0]).unwrap(), 2.0 / 3.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_maps(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
            let l: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
            let t: Vec<f64> = s.iter().map(|v: &f64| v.exp() * 3.0 + 1.0).collect();
            proptest::prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-15);
        }
    }
}
