//! Synthetic label corruption with ground-truth bookkeeping.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::softmax;

/// Default spread of the per-instance flip probability.
pub const DEFAULT_FLIP_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub mislabeled: BTreeSet<usize>,
    pub target_rate: f64,
    pub achieved_rate: f64,
    pub seed: u64,
}

impl CorruptionRecord {
    fn from_labels(clean: Vec<usize>, noisy: Vec<usize>, target_rate: f64, seed: u64) -> Self {
        let mislabeled: BTreeSet<usize> = clean
            .iter()
            .zip(&noisy)
            .enumerate()
            .filter(|(_, (c, n))| c != n)
            .map(|(i, _)| i)
            .collect();
        let achieved_rate = mislabeled.len() as f64 / clean.len().max(1) as f64;
        Self {
            clean,
            noisy,
            mislabeled,
            target_rate,
            achieved_rate,
            seed,
        }
    }

    /// Recomputes the mislabeled set from the label vectors and compares.
    pub fn is_consistent(&self) -> bool {
        let again = Self::from_labels(self.clean.clone(), self.noisy.clone(), self.target_rate, self.seed);
        again.mislabeled == self.mislabeled && again.achieved_rate == self.achieved_rate
    }

    /// Sidecar CSV: `index,clean,noisy,flipped`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("index,clean,noisy,flipped\n");
        for (i, (c, n)) in self.clean.iter().zip(&self.noisy).enumerate() {
            out.push_str(&format!("{i},{c},{n},{}\n", u8::from(c != n)));
        }
        out
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidRate(rate))
    }
}

/// Each label flips with probability `rate` to a uniformly chosen other class.
pub fn symmetric_noise(labels: &[usize], rate: f64, classes: usize, seed: u64) -> Result<CorruptionRecord> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = labels
        .iter()
        .map(|&y| {
            if classes > 1 && rng.random_bool(rate) {
                let other = rng.random_range(0..classes - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();
    Ok(CorruptionRecord::from_labels(labels.to_vec(), noisy, rate, seed))
}

fn truncated_normal<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std <= 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let normal = Normal::new(mean, std).expect("finite std");
    loop {
        let q = normal.sample(rng);
        if (0.0..=1.0).contains(&q) {
            return q;
        }
    }
}

/// Instance-dependent noise.
///
/// Each sample gets a flip probability `q_i ~ N(rate, flip_std^2)` truncated
/// to `[0, 1]`. A per-class random projection `W_y` (dim x K) scores the
/// off-label classes from the unit-normalized features; the noisy label is
/// drawn from `(1 - q_i)` on the clean class and `q_i * softmax(scores)` on
/// the rest.
pub fn idn_noise(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    rate: f64,
    classes: usize,
    seed: u64,
    flip_std: f64,
) -> Result<CorruptionRecord> {
    check_rate(rate)?;
    if features.len() != labels.len() * dim {
        return Err(Error::Dimension {
            expected: labels.len() * dim,
            got: features.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projections: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim * classes).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut noisy = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let q = truncated_normal(rate, flip_std, &mut rng);
        let dist = flip_distribution(&features[i * dim..(i + 1) * dim], &projections[y], y, classes, q);
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = y;
        for (k, &p) in dist.iter().enumerate() {
            acc += p;
            if r < acc {
                pick = k;
                break;
            }
        }
        noisy.push(pick);
    }
    Ok(CorruptionRecord::from_labels(labels.to_vec(), noisy, rate, seed))
}

/// Projection scores `x_hat * W` for one sample, before masking the label.
pub fn projection_scores(x: &[f64], projection: &[f64], classes: usize) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut scores = vec![0.0; classes];
    for (j, &xj) in x.iter().enumerate() {
        let row = &projection[j * classes..(j + 1) * classes];
        for (s, &w) in scores.iter_mut().zip(row) {
            *s += xj / norm * w;
        }
    }
    scores
}

fn flip_distribution(x: &[f64], projection: &[f64], label: usize, classes: usize, q: f64) -> Vec<f64> {
    let mut scores = projection_scores(x, projection, classes);
    scores[label] = f64::NEG_INFINITY;
    let mut dist: Vec<f64> = softmax(&scores).into_iter().map(|p| p * q).collect();
    dist[label] = 1.0 - q;
    dist
}

/// Regenerates the projections used by [`idn_noise`] for a given seed.
pub fn idn_projections(dim: usize, classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|_| (0..dim * classes).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gaussian_clusters, ClusterSpec};

    fn data(n: usize) -> crate::data::Dataset {
        let (tr, _) = make_gaussian_clusters(&ClusterSpec {
            samples: n * 5 / 4,
            classes: 10,
            dim: 20,
            separation: 3.0,
            within_std: 1.0,
            seed: 17,
        })
        .unwrap();
        tr
    }

    #[test]
    fn symmetric_zero_rate() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let r = symmetric_noise(&labels, 0.0, 5, 1).unwrap();
        assert_eq!(r.noisy, labels);
        assert!(r.mislabeled.is_empty());
    }

    #[test]
    fn symmetric_rate_concentrates() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let r = symmetric_noise(&labels, 0.4, 10, 2).unwrap();
        assert!((r.achieved_rate - 0.4).abs() <= 0.02, "{}", r.achieved_rate);
        for &i in &r.mislabeled {
            assert_ne!(r.noisy[i], r.clean[i]);
        }
        assert!(r.is_consistent());
    }

    #[test]
    fn rejects_bad_rates() {
        assert_eq!(symmetric_noise(&[0], 1.0, 2, 0), Err(Error::InvalidRate(1.0)));
        assert!(idn_noise(&[0.0], 1, &[0], -0.1, 2, 0, 0.1).is_err());
    }

    #[test]
    fn idn_zero_rate_zero_spread() {
        let ds = data(500);
        let r = idn_noise(&ds.features, ds.dim, &ds.labels, 0.0, 10, 3, 0.0).unwrap();
        assert!(r.mislabeled.is_empty());
    }

    #[test]
    fn idn_rate_and_determinism() {
        let ds = data(10_000);
        let a = idn_noise(&ds.features, ds.dim, &ds.labels, 0.4, 10, 5, DEFAULT_FLIP_STD).unwrap();
        let b = idn_noise(&ds.features, ds.dim, &ds.labels, 0.4, 10, 5, DEFAULT_FLIP_STD).unwrap();
        assert_eq!(a, b);
        assert!((a.achieved_rate - 0.4).abs() <= 0.03);
        assert!(a.is_consistent());
    }

    #[test]
    fn idn_targets_follow_projection() {
        let ds = data(5_000);
        let seed = 8;
        let r = idn_noise(&ds.features, ds.dim, &ds.labels, 0.4, 10, seed, DEFAULT_FLIP_STD).unwrap();
        let w = idn_projections(ds.dim, 10, seed);
        let (mut chosen, mut all, mut n_all) = (0.0, 0.0, 0.0);
        for &i in &r.mislabeled {
            let y = r.clean[i];
            let s = projection_scores(ds.row(i), &w[y], 10);
            chosen += s[r.noisy[i]];
            for (k, v) in s.iter().enumerate() {
                if k != y {
                    all += v;
                    n_all += 1.0;
                }
            }
        }
        let chosen = chosen / r.mislabeled.len() as f64;
        let all = all / n_all;
        assert!(chosen > all, "chosen {chosen} vs all {all}");
    }
}
