//! Analysis instruments: gradient-proportion series, the incoordination
//! ratio between two parameter groups, the lag-injection experiment, the
//! noise fitting rate and selection precision/recall.

use std::collections::BTreeSet;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{train_with_replay, Replay, TrainConfig, Trajectory};

/// `g_t = |z_t| / sum_t |z_t|`.
pub fn grad_proportion(series: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = series.iter().map(|z| z.abs()).sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedProportion);
    }
    Ok(series.iter().map(|z| z.abs() / total).collect())
}

/// `sum |a_t - b_t| / sum (a_t + b_t)`; 0 for identical distributions and 1
/// for disjoint supports.
pub fn incoordination(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    let den: f64 = a.iter().zip(b).map(|(x, y)| x + y).sum();
    Ok(num / den)
}

/// Incoordination between two raw gradient-magnitude series.
pub fn series_incoordination(a: &[f64], b: &[f64]) -> Result<f64> {
    incoordination(&grad_proportion(a)?, &grad_proportion(b)?)
}

/// Fraction of mislabeled samples whose predicted class equals the noisy
/// label.
pub fn noise_fitting_rate(predictions: &[usize], noisy_labels: &[usize], mislabeled: &BTreeSet<usize>) -> Result<f64> {
    if mislabeled.is_empty() {
        return Err(Error::UndefinedNfr);
    }
    let fit = mislabeled
        .iter()
        .filter(|&&i| predictions[i] == noisy_labels[i])
        .count();
    Ok(fit as f64 / mislabeled.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionMetrics {
    /// NaN when nothing was selected; see `precision_defined`.
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
}

pub fn selection_metrics(selected: &BTreeSet<usize>, true_clean: &BTreeSet<usize>) -> SelectionMetrics {
    let hit = selected.intersection(true_clean).count() as f64;
    let recall = if true_clean.is_empty() {
        f64::NAN
    } else {
        hit / true_clean.len() as f64
    };
    if selected.is_empty() {
        return SelectionMetrics {
            precision: f64::NAN,
            recall,
            precision_defined: false,
        };
    }
    SelectionMetrics {
        precision: hit / selected.len() as f64,
        recall,
        precision_defined: true,
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// One arm of the lag experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct LagPoint {
    pub shift: usize,
    pub incoordination: f64,
    pub test_error: f64,
}

/// v-gradient series of the baseline delayed by `shift` epochs.
pub fn shifted_series(series: &[f64], shift: usize) -> Vec<f64> {
    (0..series.len())
        .map(|t| if t >= shift { series[t - shift] } else { 0.0 })
        .collect()
}

/// Replays training with `v` held at the baseline's value from `shift`
/// epochs earlier (and `M` on its saved trajectory), then measures the
/// incoordination between the model's gradient distribution and the delayed
/// `v` gradient distribution, and the final test error.
pub fn lag_experiment(
    baseline: &Trajectory,
    shifts: &[usize],
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<LagPoint>> {
    let epochs = baseline.v_snapshots.len();
    if let Some(&bad) = shifts.iter().find(|&&s| s >= epochs) {
        return Err(Error::InvalidShift { shift: bad, epochs });
    }
    shifts
        .iter()
        .map(|&shift| {
            let replay = Replay {
                trajectory: baseline,
                shift,
            };
            let out = train_with_replay(train, test, config, Some(&replay))?;
            let theta = out.log.series(|g| g.theta);
            let v = shifted_series(&baseline.v_grad_series, shift);
            Ok(LagPoint {
                shift,
                incoordination: series_incoordination(&theta, &v)?,
                test_error: 1.0 - out.log.final_test_accuracy(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn proportion_examples() {
        assert_eq!(grad_proportion(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(grad_proportion(&[0.0, 2.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(grad_proportion(&[0.0, 0.0]), Err(Error::UndefinedProportion));
    }

    #[test]
    fn proportion_sums_to_one_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let g = grad_proportion(&z).unwrap();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let c = rng.random_range(0.1..100.0);
            let scaled: Vec<f64> = z.iter().map(|x| x * c).collect();
            for (a, b) in g.iter().zip(grad_proportion(&scaled).unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incoordination_examples() {
        assert_eq!(incoordination(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(incoordination(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.3, 0.7]).unwrap(), 1.0);
        assert!((incoordination(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!(incoordination(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn nfr_examples() {
        let noisy = [1, 2, 0, 1];
        let omega: BTreeSet<usize> = [0, 1, 2, 3].into();
        assert_eq!(noise_fitting_rate(&[1, 2, 0, 1], &noisy, &omega).unwrap(), 1.0);
        assert_eq!(noise_fitting_rate(&[0, 0, 1, 0], &noisy, &omega).unwrap(), 0.0);
        assert_eq!(noise_fitting_rate(&[1, 2, 1, 0], &noisy, &omega).unwrap(), 0.5);
        assert_eq!(noise_fitting_rate(&[1], &[1], &BTreeSet::new()), Err(Error::UndefinedNfr));
    }

    #[test]
    fn nfr_monotone_in_fitted_count() {
        let n = 20;
        let noisy: Vec<usize> = vec![1; n];
        let omega: BTreeSet<usize> = (0..n).collect();
        let mut prev = -1.0;
        for fitted in 0..=n {
            let preds: Vec<usize> = (0..n).map(|i| usize::from(i < fitted)).collect();
            let r = noise_fitting_rate(&preds, &noisy, &omega).unwrap();
            assert!(r > prev && (0.0..=1.0).contains(&r));
            prev = r;
        }
    }

    #[test]
    fn selection_examples() {
        let clean: BTreeSet<usize> = [0, 1, 2, 3].into();
        let m = selection_metrics(&clean, &clean);
        assert_eq!((m.precision, m.recall), (1.0, 1.0));
        let m = selection_metrics(&[7, 8].into(), &clean);
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
        let m = selection_metrics(&[0, 1].into(), &clean);
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        let m = selection_metrics(&BTreeSet::new(), &clean);
        assert!(m.precision.is_nan() && !m.precision_defined);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    #[test]
    fn shifted_series_delays() {
        assert_eq!(shifted_series(&[1.0, 2.0, 3.0, 4.0], 2), vec![0.0, 0.0, 1.0, 2.0]);
        assert_eq!(shifted_series(&[1.0, 2.0], 0), vec![1.0, 2.0]);
    }
}
