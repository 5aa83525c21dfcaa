//! Shared `K x K` collaboration matrix with a learnable scale.
//!
//! The matrix multiplies model predictions before the per-sample noise term
//! is added. It is min-shifted and divided by `gamma - min(M)` before use.

use crate::error::{Error, Result};

const DEGENERATE_GAP: f64 = 1e-9;
const CLIP_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CollabState {
    pub classes: usize,
    /// Row-major `[K][K]`.
    pub m: Vec<f64>,
    pub gamma: f64,
    pub lr_m: f64,
    pub lr_gamma: f64,
}

/// Normalized matrix plus what is needed to push gradients back to `M` and
/// `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCollab {
    pub classes: usize,
    pub m_bar: Vec<f64>,
    min: f64,
    divisor: f64,
    /// Positions attaining the minimum; the min's subgradient is split evenly.
    argmin: Vec<usize>,
    /// `m_bar` is exactly the identity.
    pub is_identity: bool,
}

/// Emitted when an update pushed `gamma` below `min(M)` and it was clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaClipped {
    pub requested: f64,
    pub clipped_to: f64,
}

impl CollabState {
    /// Identity matrix with `gamma = 1`.
    pub fn identity(classes: usize, lr_m: f64, lr_gamma: f64) -> Self {
        let mut m = vec![0.0; classes * classes];
        for k in 0..classes {
            m[k * classes + k] = 1.0;
        }
        Self {
            classes,
            m,
            gamma: 1.0,
            lr_m,
            lr_gamma,
        }
    }

    pub fn min(&self) -> f64 {
        self.m.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.classes).map(|k| self.m[k * self.classes + k]).collect()
    }
}

/// `M_bar = (M - min(M)) / (gamma - min(M))`, `min` taken over all entries.
pub fn normalize_matrix(state: &CollabState) -> Result<NormalizedCollab> {
    let min = state.min();
    if !(state.gamma - min > DEGENERATE_GAP) {
        return Err(Error::NormalizationDegenerate {
            gamma: state.gamma,
            min,
        });
    }
    let divisor = state.gamma - min;
    let m_bar: Vec<f64> = state.m.iter().map(|&v| (v - min) / divisor).collect();
    let argmin = state
        .m
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == min)
        .map(|(i, _)| i)
        .collect();
    let k = state.classes;
    let is_identity = m_bar
        .iter()
        .enumerate()
        .all(|(i, &v)| v == if i / k == i % k { 1.0 } else { 0.0 });
    Ok(NormalizedCollab {
        classes: k,
        m_bar,
        min,
        divisor,
        argmin,
        is_identity,
    })
}

impl NormalizedCollab {
    /// Row vector times matrix: `t_k = sum_j f_j * M_bar[j][k]`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut t = vec![0.0; k];
        for (j, &fj) in f.iter().enumerate() {
            let row = &self.m_bar[j * k..(j + 1) * k];
            for (tk, &m) in t.iter_mut().zip(row) {
                *tk += fj * m;
            }
        }
        t
    }

    /// Chains `dL/dM_bar` back to `(dL/dM, dL/dgamma)`.
    pub fn backprop(&self, grad_m_bar: &[f64]) -> (Vec<f64>, f64) {
        let d = self.divisor;
        let mut grad_m: Vec<f64> = grad_m_bar.iter().map(|g| g / d).collect();
        let mut through_min = 0.0;
        let mut grad_gamma = 0.0;
        for (g, mb) in grad_m_bar.iter().zip(&self.m_bar) {
            through_min += g * (mb - 1.0);
            grad_gamma -= g * mb;
        }
        let share = through_min / d / self.argmin.len() as f64;
        for &i in &self.argmin {
            grad_m[i] += share;
        }
        (grad_m, grad_gamma / d)
    }
}

/// `M <- M - lr_m * dL/dM`, `gamma <- gamma - lr_gamma * dL/dgamma`.
///
/// If the step leaves `gamma <= min(M)`, gamma is clipped to
/// `min(M) + 1e-6` and the clip is reported.
pub fn update_collab(state: &mut CollabState, grad_m: &[f64], grad_gamma: f64) -> Result<Option<GammaClipped>> {
    if grad_m.len() != state.m.len() {
        return Err(Error::Dimension {
            expected: state.m.len(),
            got: grad_m.len(),
        });
    }
    if !grad_gamma.is_finite() || grad_m.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "collaboration gradient", epoch: 0 });
    }
    for (m, g) in state.m.iter_mut().zip(grad_m) {
        *m -= state.lr_m * g;
    }
    state.gamma -= state.lr_gamma * grad_gamma;
    let min = state.min();
    if state.gamma <= min {
        let clipped = GammaClipped {
            requested: state.gamma,
            clipped_to: min + CLIP_GAP,
        };
        state.gamma = clipped.clipped_to;
        return Ok(Some(clipped));
    }
    Ok(None)
}

/// Mean of the diagonal of a row-major square matrix.
pub fn diag_mean(m: &[f64], classes: usize) -> f64 {
    (0..classes).map(|k| m[k * classes + k]).sum::<f64>() / classes as f64
}
