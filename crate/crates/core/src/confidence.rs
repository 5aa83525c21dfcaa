//! Temporal ensembling of predictions and the per-sample confidence weights
//! derived from it.

use crate::error::{Error, Result};
use crate::model::ce_loss_index;

/// Momentum at epoch `t`: decays linearly from 1 at `t = 0` to `beta_init`
/// at `t = total`.
pub fn beta_schedule(t: usize, total: usize, beta_init: f64) -> f64 {
    (beta_init - 1.0) * t as f64 / total as f64 + 1.0
}

/// Smoothed predictions, one probability row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub samples: usize,
    pub classes: usize,
    /// Row-major `[N][K]`; `None` until the first predictions arrive.
    pub q: Option<Vec<f64>>,
    pub beta_init: f64,
    pub total_epochs: usize,
    /// Epoch from which the smoothed predictions are read.
    pub window: usize,
}

impl EmaState {
    pub fn new(samples: usize, classes: usize, beta_init: f64, total_epochs: usize, window: usize) -> Self {
        Self {
            samples,
            classes,
            q: None,
            beta_init,
            total_epochs,
            window,
        }
    }

    /// Whether the smoothed predictions cover the configured window.
    pub fn ready(&self, epoch: usize) -> bool {
        self.q.is_some() && epoch >= self.window
    }
}

/// `q <- beta_t q + (1 - beta_t) q_new`, rows renormalized. The first call
/// seeds `q` with `q_new`.
pub fn ema_update(state: &mut EmaState, q_new: &[f64], t: usize) -> Result<()> {
    let expected = state.samples * state.classes;
    if q_new.len() != expected {
        return Err(Error::Dimension {
            expected,
            got: q_new.len(),
        });
    }
    let beta = beta_schedule(t.min(state.total_epochs), state.total_epochs, state.beta_init);
    ema_blend(state, q_new, beta);
    Ok(())
}

/// Blend with an explicit momentum.
pub fn ema_blend(state: &mut EmaState, q_new: &[f64], beta: f64) {
    let k = state.classes;
    match &mut state.q {
        None => state.q = Some(q_new.to_vec()),
        Some(q) => {
            for (row, new) in q.chunks_mut(k).zip(q_new.chunks(k)) {
                for (a, &b) in row.iter_mut().zip(new) {
                    *a = beta * *a + (1.0 - beta) * b;
                }
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|a| *a /= sum);
            }
        }
    }
}

/// Confidence weight per sample, `w_i` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceWeights {
    pub omega: Vec<f64>,
}

impl ConfidenceWeights {
    pub fn ones(n: usize) -> Self {
        Self { omega: vec![1.0; n] }
    }
}

/// `w_i = 1 - minmax(CE(q_i, y_i))` over all samples; all ones when every
/// loss is equal.
pub fn confidence_weights(q: &[f64], labels: &[usize], classes: usize) -> ConfidenceWeights {
    let losses: Vec<f64> = q
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| ce_loss_index(row, y))
        .collect();
    weights_from_losses(&losses)
}

pub fn weights_from_losses(losses: &[f64]) -> ConfidenceWeights {
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let omega = if !(range > 0.0) {
        vec![1.0; losses.len()]
    } else {
        losses.iter().map(|&l| 1.0 - (l - min) / range).collect()
    };
    ConfidenceWeights { omega }
}

/// Counts of `omega` in 16 equal-width bins over `[0, 1]`.
pub fn omega_histogram(omega: &[f64]) -> [usize; 16] {
    let mut bins = [0usize; 16];
    for &w in omega {
        let b = ((w * 16.0).floor() as usize).min(15);
        bins[b] += 1;
    }
    bins
}
