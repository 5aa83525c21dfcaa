//! Pieces of the selection-based extension: vector-data augmentations,
//! consistency and Mixup losses, the ramped overall loss, and
//! dynamic-threshold label correction.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::Result;
use crate::model::{argmax, ce_loss_index, forward, ModelState};
use crate::trainer::{train, RunLog, TrainConfig, TrainOutcome};

/// Weak/strong augmentation for feature vectors.
///
/// Weak adds Gaussian jitter with per-feature std `weak * feature_std`;
/// strong adds `strong * feature_std` jitter and zeroes each feature with
/// probability `mask_prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub weak_std: Vec<f64>,
    pub strong_std: Vec<f64>,
    pub mask_prob: f64,
}

impl AugmentPolicy {
    pub fn from_feature_std(feature_std: &[f64], weak: f64, strong: f64, mask_prob: f64) -> Self {
        Self {
            weak_std: feature_std.iter().map(|s| s * weak).collect(),
            strong_std: feature_std.iter().map(|s| s * strong).collect(),
            mask_prob,
        }
    }

    pub fn weak<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        x.iter()
            .zip(&self.weak_std)
            .map(|(&v, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                v + s * z
            })
            .collect()
    }

    pub fn strong<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        x.iter()
            .zip(&self.strong_std)
            .map(|(&v, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                let masked = self.mask_prob > 0.0 && rng.random_bool(self.mask_prob);
                if masked {
                    0.0
                } else {
                    v + s * z
                }
            })
            .collect()
    }
}

/// Cross-entropy of the model on a strongly augmented input.
pub fn consistency_loss(model: &ModelState, x_strong: &[f64], label: usize) -> Result<f64> {
    Ok(ce_loss_index(&forward(x_strong, model)?, label))
}

/// `(delta x_i + (1 - delta) x_j, delta y_i + (1 - delta) y_j)`.
pub fn mixup(x_i: &[f64], y_i: &[f64], x_j: &[f64], y_j: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| delta * p + (1.0 - delta) * q)
            .collect::<Vec<f64>>()
    };
    (mix(x_i, x_j), mix(y_i, y_j))
}

/// `L = L_csr + alpha_t (L_cr + L_mix)`.
pub fn overall_loss(l_csr: f64, l_cr: f64, l_mix: f64, alpha_t: f64) -> f64 {
    l_csr + alpha_t * (l_cr + l_mix)
}

/// Linear ramp from 0 at epoch 0 to `max` at the last epoch.
pub fn alpha_ramp(t: usize, total: usize, max: f64) -> f64 {
    max * t as f64 / total as f64
}

/// `eps * p_w + (1 - eps) * p_s`.
pub fn combine_predictions(p_w: &[f64], p_s: &[f64], eps: f64) -> Vec<f64> {
    p_w.iter().zip(p_s).map(|(a, b)| eps * a + (1.0 - eps) * b).collect()
}

/// How the smoothed confidence turns into a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdRule {
    /// `min(phi + offset, cap)`: the cap is an upper bound.
    Cap,
    /// `max(phi + offset, cap)`, the formula read literally.
    Floor,
}

/// Which statistic of the combined prediction is compared to the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateStat {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionState {
    /// Smoothed max combined confidence per sample; NaN until first seen.
    pub phi_ws: Vec<f64>,
    pub eps: f64,
    pub offset: f64,
    pub cap: f64,
    pub momentum: f64,
    pub rule: ThresholdRule,
    pub gate: GateStat,
    /// Samples that received a pseudo-label, with that label.
    pub corrected: BTreeMap<usize, usize>,
}

impl CorrectionState {
    pub fn new(samples: usize) -> Self {
        Self {
            phi_ws: vec![f64::NAN; samples],
            eps: 0.5,
            offset: 0.5,
            cap: 0.99,
            momentum: 0.9,
            rule: ThresholdRule::Cap,
            gate: GateStat::Max,
            corrected: BTreeMap::new(),
        }
    }

    /// Folds a new combined prediction into the smoothed confidence.
    pub fn observe(&mut self, i: usize, p_ws: &[f64]) {
        let c = p_ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let prev = self.phi_ws[i];
        self.phi_ws[i] = if prev.is_nan() {
            c
        } else {
            self.momentum * prev + (1.0 - self.momentum) * c
        };
    }

    pub fn threshold(&self, i: usize) -> f64 {
        dynamic_threshold(self.phi_ws[i], self.offset, self.cap, self.rule)
    }
}

/// Dynamic threshold for one sample.
pub fn dynamic_threshold(phi_ws: f64, offset: f64, cap: f64, rule: ThresholdRule) -> f64 {
    match rule {
        ThresholdRule::Cap => (phi_ws + offset).min(cap),
        ThresholdRule::Floor => (phi_ws + offset).max(cap),
    }
}

/// Pseudo-labels for samples of `noisy` whose combined prediction clears
/// their threshold. `p_ws` maps sample index to its combined prediction.
///
/// Accepted samples are recorded in `state.corrected`.
pub fn correct_labels(
    noisy: &BTreeSet<usize>,
    p_ws: &BTreeMap<usize, Vec<f64>>,
    state: &mut CorrectionState,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &i in noisy {
        let Some(p) = p_ws.get(&i) else { continue };
        state.observe(i, p);
        let stat = match state.gate {
            GateStat::Max => p.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            GateStat::Min => p.iter().cloned().fold(f64::INFINITY, f64::min),
        };
        if stat > state.threshold(i) {
            let label = argmax(p);
            state.corrected.insert(i, label);
            out.push((i, label));
        }
    }
    out
}

/// Runs the selection-based extension; `config.method` is forced to
/// [`crate::trainer::Method::CsrPlus`].
pub fn train_plus(train_set: &Dataset, test_set: &Dataset, config: &TrainConfig) -> Result<(ModelState, RunLog)> {
    let mut cfg = config.clone();
    cfg.method = crate::trainer::Method::CsrPlus;
    let TrainOutcome { model, log, .. } = train(train_set, test_set, &cfg)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_trace, one_hot, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_strong_augment_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelState::new(&[3, 4, 2], &mut rng).unwrap();
        let policy = AugmentPolicy::from_feature_std(&[1.0; 3], 0.0, 0.0, 0.0);
        let x = [0.3, -0.2, 1.0];
        let xs = policy.strong(&x, &mut rng);
        assert_eq!(xs, x.to_vec());
        let plain = ce_loss_index(&forward(&x, &model).unwrap(), 1);
        assert_eq!(consistency_loss(&model, &xs, 1).unwrap(), plain);
    }

    #[test]
    fn masking_irrelevant_feature_is_harmless() {
        // a linear model that ignores feature 2
        let mut model = ModelState::zeros_linear(3, 2);
        model.layers[0] = Layer {
            d_in: 3,
            d_out: 2,
            weights: vec![1.0, -1.0, 0.5, 0.2, 0.0, 0.0],
            bias: vec![0.0, 0.1],
        };
        let x = [0.4, 0.9, 7.0];
        let masked = [0.4, 0.9, 0.0];
        assert_eq!(
            consistency_loss(&model, &x, 0).unwrap(),
            consistency_loss(&model, &masked, 0).unwrap()
        );
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        use crate::model::{grad_check, CeObjective};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelState::new(&[4, 5, 3], &mut rng).unwrap();
        let policy = AugmentPolicy::from_feature_std(&[1.0; 4], 0.05, 0.2, 0.2);
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| policy.strong(&[0.5, -0.5, 1.0, 0.1], &mut rng))
            .collect();
        let labels = vec![0, 1, 2, 0, 1];
        let obj = CeObjective { inputs: &inputs, labels: &labels };
        assert!(grad_check(&model, &obj, 1e-6).unwrap() < 1e-5);
        let _ = forward_trace(&inputs[0], &model).unwrap();
    }

    #[test]
    fn mixup_examples() {
        let (x, y) = mixup(&[1.0, 2.0], &one_hot(0, 2), &[3.0, 6.0], &one_hot(1, 2), 1.0);
        assert_eq!((x, y), (vec![1.0, 2.0], vec![1.0, 0.0]));
        let (x, y) = mixup(&[1.0, 2.0], &one_hot(0, 2), &[3.0, 6.0], &one_hot(1, 2), 0.5);
        assert_eq!((x, y), (vec![2.0, 4.0], vec![0.5, 0.5]));
    }

    proptest::proptest! {
        #[test]
        fn mixup_is_convex(a in proptest::collection::vec(-5.0f64..5.0, 4),
                           b in proptest::collection::vec(-5.0f64..5.0, 4),
                           ya in 0usize..3, yb in 0usize..3, delta in 0.0f64..=1.0) {
            let (x, y) = mixup(&a, &one_hot(ya, 3), &b, &one_hot(yb, 3), delta);
            for ((m, p), q) in x.iter().zip(&a).zip(&b) {
                proptest::prop_assert!(*m >= p.min(*q) - 1e-12 && *m <= p.max(*q) + 1e-12);
            }
            proptest::prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overall_loss_examples() {
        assert_eq!(overall_loss(1.2, 3.0, 4.0, 0.0), 1.2);
        assert_eq!(overall_loss(1.2, 0.5, 0.5, 1.0), 2.2);
        assert_eq!(alpha_ramp(50, 100, 1.0), 0.5);
        assert_eq!(alpha_ramp(0, 100, 1.0), 0.0);
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_predictions(&[0.3, 0.7], &[0.3, 0.7], 0.5), vec![0.3, 0.7]);
        assert_eq!(combine_predictions(&[1.0, 0.0], &[0.0, 1.0], 0.5), vec![0.5, 0.5]);
        let p = combine_predictions(&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3], 0.3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let th = |p| dynamic_threshold(p, 0.5, 0.99, ThresholdRule::Cap);
        assert!((th(0.3) - 0.8).abs() < 1e-15);
        assert_eq!(th(0.6), 0.99);
        assert_eq!(th(0.0), 0.5);
        assert_eq!(dynamic_threshold(0.3, 0.5, 0.99, ThresholdRule::Floor), 0.99);
    }

    #[test]
    fn correction_gate() {
        let noisy: BTreeSet<usize> = [0, 1].into();
        let mut state = CorrectionState::new(2);
        // high smoothed confidence so the cap applies
        state.phi_ws = vec![0.9, 0.9];
        let mut p = BTreeMap::new();
        p.insert(0, vec![0.005, 0.995]);
        p.insert(1, vec![0.5, 0.5]);
        let out = correct_labels(&noisy, &p, &mut state);
        assert_eq!(out, vec![(0, 1)]);
        assert_eq!(state.corrected.get(&0), Some(&1));
        assert!(!state.corrected.contains_key(&1));
    }

    #[test]
    fn weak_is_smaller_than_strong() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = AugmentPolicy::from_feature_std(&[1.0; 8], 0.05, 0.2, 0.0);
        let x = [0.0; 8];
        let (mut w, mut s) = (0.0, 0.0);
        for _ in 0..500 {
            w += policy.weak(&x, &mut rng).iter().map(|v| v * v).sum::<f64>();
            s += policy.strong(&x, &mut rng).iter().map(|v| v * v).sum::<f64>();
        }
        assert!(w < s);
    }
}
