//! Per-sample sparse noise parameters and the corrected-prediction losses.
//!
//! Each training sample owns two vectors `u_i, v_i` of length `K`. The noise
//! term is `s_i = u_i^2 * y_i - v_i^2 * (1 - y_i)`. The cross-entropy path
//! (`f * M_bar + s`, floored and renormalized) drives the model, `u`, `M` and
//! `gamma`; the squared-error path on the one-hot of `f` drives `v` only.

use rand::Rng;

use crate::collab::NormalizedCollab;
use crate::error::{Error, Result};
use crate::model::{argmax, softmax_backward, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    pub samples: usize,
    pub classes: usize,
    /// Row-major `[N][K]`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub init_scale: f64,
}

impl NoiseParams {
    /// Entries drawn i.i.d. uniform in `[-init_scale, init_scale]`.
    pub fn new<R: Rng + ?Sized>(samples: usize, classes: usize, init_scale: f64, rng: &mut R) -> Self {
        let mut draw = |_| {
            if init_scale > 0.0 {
                rng.random_range(-init_scale..=init_scale)
            } else {
                0.0
            }
        };
        let u = (0..samples * classes).map(&mut draw).collect();
        let v = (0..samples * classes).map(&mut draw).collect();
        Self {
            samples,
            classes,
            u,
            v,
            init_scale,
        }
    }

    pub fn zeros(samples: usize, classes: usize) -> Self {
        Self {
            samples,
            classes,
            u: vec![0.0; samples * classes],
            v: vec![0.0; samples * classes],
            init_scale: 0.0,
        }
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.classes..(i + 1) * self.classes]
    }

    pub fn v_row(&self, i: usize) -> &[f64] {
        &self.v[i * self.classes..(i + 1) * self.classes]
    }

    pub fn s_row(&self, i: usize, label: usize) -> Vec<f64> {
        build_s_label(self.u_row(i), self.v_row(i), label)
    }

    /// True when every sample's noise term is nonnegative on its label and
    /// nonpositive elsewhere.
    pub fn sign_structure_holds(&self, labels: &[usize]) -> bool {
        labels.iter().enumerate().all(|(i, &y)| {
            self.s_row(i, y)
                .iter()
                .enumerate()
                .all(|(k, &s)| if k == y { s >= 0.0 } else { s <= 0.0 })
        })
    }
}

/// `s = u*u*y - v*v*(1-y)` for a one-hot `y`.
pub fn build_s(u: &[f64], v: &[f64], y: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(v)
        .zip(y)
        .map(|((&u, &v), &y)| u * u * y - v * v * (1.0 - y))
        .collect()
}

pub fn build_s_label(u: &[f64], v: &[f64], label: usize) -> Vec<f64> {
    (0..u.len())
        .map(|k| if k == label { u[k] * u[k] } else { -(v[k] * v[k]) })
        .collect()
}

/// Floors `f * M_bar + s` at 1e-12 and renormalizes it to sum 1.
pub fn corrected_prediction(f: &[f64], collab: &NormalizedCollab, s: &[f64]) -> Result<Vec<f64>> {
    let t: Vec<f64> = collab.apply(f).iter().zip(s).map(|(a, b)| a + b).collect();
    if t.iter().all(|&v| v <= 0.0) {
        return Err(Error::DegeneratePrediction);
    }
    let c: Vec<f64> = t.iter().map(|&v| v.max(PROB_FLOOR)).collect();
    let sum: f64 = c.iter().sum();
    Ok(c.into_iter().map(|v| v / sum).collect())
}

/// `(L_ce, L_mse)` for one sample.
pub fn csr_sample_losses(
    f: &[f64],
    collab: &NormalizedCollab,
    s: &[f64],
    label: usize,
) -> Result<(f64, f64)> {
    let p = corrected_prediction(f, collab, s)?;
    let ce = -p[label].max(PROB_FLOOR).ln();
    Ok((ce, mse_path_loss(f, collab, s, label)))
}

fn mse_path_loss(f: &[f64], collab: &NormalizedCollab, s: &[f64], label: usize) -> f64 {
    let r = mse_residual(f, collab, s, label);
    r.iter().map(|v| v * v).sum()
}

/// `onehot(f) * M_bar + s - y`.
fn mse_residual(f: &[f64], collab: &NormalizedCollab, s: &[f64], label: usize) -> Vec<f64> {
    let k = collab.classes;
    let hot = argmax(f);
    let row = &collab.m_bar[hot * k..(hot + 1) * k];
    (0..k)
        .map(|j| row[j] + s[j] - if j == label { 1.0 } else { 0.0 })
        .collect()
}

/// Losses and exact per-sample derivatives for one training sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss_ce: f64,
    pub loss_mse: f64,
    /// `dL_ce / d logits`.
    pub grad_logits: Vec<f64>,
    /// `dL_ce / d u_i`.
    pub grad_u: Vec<f64>,
    /// `dL_mse / d v_i`.
    pub grad_v: Vec<f64>,
    /// `dL_ce / d M_bar`, row-major.
    pub grad_m_bar: Vec<f64>,
}

/// Evaluates both loss paths for a sample with softmax output `f`.
///
/// When `M_bar` is exactly the identity and `s` is exactly zero, the
/// corrected prediction is `f` itself; the loss and logit gradient then take
/// the plain cross-entropy form so that this case reproduces plain training
/// bit for bit.
pub fn sample_gradients(
    f: &[f64],
    collab: &NormalizedCollab,
    u: &[f64],
    v: &[f64],
    label: usize,
) -> Result<SampleGrad> {
    let k = f.len();
    let s = build_s_label(u, v, label);
    let t: Vec<f64> = collab.apply(f).iter().zip(&s).map(|(a, b)| a + b).collect();
    if t.iter().all(|&x| x <= 0.0) {
        return Err(Error::DegeneratePrediction);
    }
    let c: Vec<f64> = t.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let sum: f64 = c.iter().sum();

    // dL/dc_j = 1/S - [j == y] / c_y; the floor is held constant where active.
    let grad_t: Vec<f64> = (0..k)
        .map(|j| {
            if t[j] < PROB_FLOOR {
                0.0
            } else {
                let g = 1.0 / sum;
                if j == label {
                    g - 1.0 / c[label]
                } else {
                    g
                }
            }
        })
        .collect();

    let plain = collab.is_identity && s.iter().all(|&x| x == 0.0);
    let (loss_ce, grad_logits) = if plain {
        let mut gz = f.to_vec();
        gz[label] -= 1.0;
        (-f[label].max(PROB_FLOOR).ln(), gz)
    } else {
        let p_label = c[label] / sum;
        // dL/df_j = sum_k grad_t_k * M_bar[j][k]
        let grad_f: Vec<f64> = (0..k)
            .map(|j| {
                let row = &collab.m_bar[j * k..(j + 1) * k];
                row.iter().zip(&grad_t).map(|(m, g)| m * g).sum()
            })
            .collect();
        (-p_label.max(PROB_FLOOR).ln(), softmax_backward(f, &grad_f))
    };

    let mut grad_u = vec![0.0; k];
    grad_u[label] = grad_t[label] * 2.0 * u[label];

    let mut grad_m_bar = vec![0.0; k * k];
    for (j, &fj) in f.iter().enumerate() {
        for (g, &gt) in grad_m_bar[j * k..(j + 1) * k].iter_mut().zip(&grad_t) {
            *g = fj * gt;
        }
    }

    let r = mse_residual(f, collab, &s, label);
    let loss_mse = r.iter().map(|x| x * x).sum();
    let grad_v = (0..k)
        .map(|j| if j == label { 0.0 } else { 2.0 * r[j] * (-2.0 * v[j]) })
        .collect();

    Ok(SampleGrad {
        loss_ce,
        loss_mse,
        grad_logits,
        grad_u,
        grad_v,
        grad_m_bar,
    })
}

/// `u_i <- u_i - lr_u (1 - w_i) dL_ce/du_i`, same for `v` with the MSE
/// gradient. `weights` are the confidence weights `w_i`.
pub fn update_noise_params(
    noise: &mut NoiseParams,
    grad_u: &[f64],
    grad_v: &[f64],
    lr_u: f64,
    lr_v: f64,
    weights: &[f64],
    epoch: usize,
) -> Result<()> {
    let k = noise.classes;
    if grad_u.len() != noise.u.len() || grad_v.len() != noise.v.len() {
        return Err(Error::Dimension {
            expected: noise.u.len(),
            got: grad_u.len().min(grad_v.len()),
        });
    }
    if weights.len() != noise.samples {
        return Err(Error::Dimension {
            expected: noise.samples,
            got: weights.len(),
        });
    }
    let mut next_u = noise.u.clone();
    let mut next_v = noise.v.clone();
    for (i, &w) in weights.iter().enumerate() {
        let share = 1.0 - w;
        for j in i * k..(i + 1) * k {
            next_u[j] -= lr_u * share * grad_u[j];
            next_v[j] -= lr_v * share * grad_v[j];
        }
    }
    if next_u.iter().chain(&next_v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "noise parameters", epoch });
    }
    noise.u = next_u;
    noise.v = next_v;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::{normalize_matrix, CollabState};
    use crate::model::{central_difference, relative_error, softmax};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(k: usize) -> NormalizedCollab {
        normalize_matrix(&CollabState::identity(k, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn s_examples() {
        assert_eq!(build_s(&[0.0; 3], &[0.0; 3], &[1.0, 0.0, 0.0]), vec![0.0, -0.0, -0.0]);
        let s = build_s(&[0.5, 9.0, 9.0], &[9.0, 0.6, 0.8], &[1.0, 0.0, 0.0]);
        let want = [0.25, -0.36, -0.64];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            build_s_label(&[0.5, 9.0, 9.0], &[9.0, 0.6, 0.8], 0),
            s
        );
    }

    #[test]
    fn s_sign_pattern_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let k = rng.random_range(2..8);
            let y = rng.random_range(0..k);
            let u: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = build_s_label(&u, &v, y);
            for (j, &sj) in s.iter().enumerate() {
                assert!(if j == y { sj >= 0.0 } else { sj <= 0.0 });
            }
        }
    }

    #[test]
    fn corrected_identity_passthrough() {
        let f = [0.2, 0.3, 0.5];
        let p = corrected_prediction(&f, &identity(3), &[0.0; 3]).unwrap();
        assert_eq!(p, f.to_vec());
    }

    #[test]
    fn corrected_example() {
        let p = corrected_prediction(&[0.5, 0.5], &identity(2), &[0.5, -0.25]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn corrected_degenerate() {
        let zero = normalize_matrix(&CollabState {
            classes: 2,
            m: vec![1.0; 4],
            gamma: 2.0,
            lr_m: 0.0,
            lr_gamma: 0.0,
        })
        .unwrap();
        assert_eq!(
            corrected_prediction(&[0.5, 0.5], &zero, &[0.0, -0.1]),
            Err(Error::DegeneratePrediction)
        );
    }

    proptest! {
        #[test]
        fn corrected_sums_to_one(
            logits in proptest::collection::vec(-5.0f64..5.0, 4),
            m in proptest::collection::vec(-1.0f64..2.0, 16),
            u in proptest::collection::vec(-1.0f64..1.0, 4),
            v in proptest::collection::vec(-1.0f64..1.0, 4),
            label in 0usize..4,
        ) {
            let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let collab = normalize_matrix(&CollabState { classes: 4, m, gamma: max + 0.5, lr_m: 0.0, lr_gamma: 0.0 }).unwrap();
            let f = softmax(&logits);
            let s = build_s_label(&u, &v, label);
            if let Ok(p) = corrected_prediction(&f, &collab, &s) {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn losses_when_prediction_matches_label() {
        let f = [0.05, 0.9, 0.05];
        let (ce, mse) = csr_sample_losses(&f, &identity(3), &[0.0; 3], 1).unwrap();
        assert_eq!(ce, -(0.9f64.ln()));
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn mse_when_argmax_disagrees() {
        let f = [0.7, 0.2, 0.1];
        let (_, mse) = csr_sample_losses(&f, &identity(3), &[0.0; 3], 2).unwrap();
        assert_eq!(mse, 2.0);
    }

    #[test]
    fn argmax_tie_lowest_index() {
        let f = [0.4, 0.4, 0.2];
        // onehot picks class 0; label 0 gives zero residual
        let (_, mse) = csr_sample_losses(&f, &identity(3), &[0.0; 3], 0).unwrap();
        assert_eq!(mse, 0.0);
    }

    fn random_case(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, NormalizedCollab, Vec<f64>, Vec<f64>, usize) {
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..k * k)
            .map(|i| if i / k == i % k { 1.0 } else { 0.0 } + rng.random_range(-0.1..0.1))
            .collect();
        let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let collab = normalize_matrix(&CollabState { classes: k, m, gamma: max + 0.3, lr_m: 0.0, lr_gamma: 0.0 }).unwrap();
        let u: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
        (softmax(&logits), collab, u, v, rng.random_range(0..k))
    }

    #[test]
    fn grad_v_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (f, collab, u, mut v, y) = random_case(&mut rng, 4);
            let g = sample_gradients(&f, &collab, &u, &v, y).unwrap();
            for j in 0..4 {
                let num = central_difference(&mut v, j, 1e-6, |vv| {
                    csr_sample_losses(&f, &collab, &build_s_label(&u, vv, y), y).unwrap().1
                });
                assert!(relative_error(g.grad_v[j], num) < 1e-5);
            }
        }
    }

    #[test]
    fn grad_u_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (f, collab, mut u, v, y) = random_case(&mut rng, 4);
            let g = sample_gradients(&f, &collab, &u, &v, y).unwrap();
            for j in 0..4 {
                let num = central_difference(&mut u, j, 1e-6, |uu| {
                    csr_sample_losses(&f, &collab, &build_s_label(uu, &v, y), y).unwrap().0
                });
                assert!(relative_error(g.grad_u[j], num) < 1e-5);
            }
        }
    }

    #[test]
    fn ce_path_has_no_v_gradient_and_mse_path_no_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, collab, u, v, y) = random_case(&mut rng, 5);
        let g = sample_gradients(&f, &collab, &u, &v, y).unwrap();
        assert_eq!(g.grad_v[y], 0.0);
        assert!(g.grad_u.iter().enumerate().all(|(j, &x)| j == y || x == 0.0));
    }

    #[test]
    fn update_weight_examples() {
        let base = NoiseParams {
            samples: 1,
            classes: 2,
            u: vec![0.3, 0.1],
            v: vec![0.2, 0.4],
            init_scale: 0.0,
        };
        let gu = [1.0, 2.0];
        let gv = [-1.0, 0.5];

        let mut a = base.clone();
        update_noise_params(&mut a, &gu, &gv, 0.1, 0.2, &[1.0], 0).unwrap();
        assert_eq!(a, base);

        let mut full = base.clone();
        update_noise_params(&mut full, &gu, &gv, 0.1, 0.2, &[0.0], 0).unwrap();
        assert!((full.u[0] - 0.2).abs() < 1e-15);
        assert!((full.v[1] - 0.3).abs() < 1e-15);

        let mut half = base.clone();
        update_noise_params(&mut half, &gu, &gv, 0.1, 0.2, &[0.5], 0).unwrap();
        for j in 0..2 {
            assert!(((base.u[j] - half.u[j]) * 2.0 - (base.u[j] - full.u[j])).abs() < 1e-15);
            assert!(((base.v[j] - half.v[j]) * 2.0 - (base.v[j] - full.v[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn update_rejects_non_finite() {
        let mut n = NoiseParams::zeros(1, 2);
        let r = update_noise_params(&mut n, &[f64::INFINITY, 0.0], &[0.0; 2], 1.0, 1.0, &[0.0], 4);
        assert_eq!(r, Err(Error::NonFinite { what: "noise parameters", epoch: 4 }));
    }

    #[test]
    fn init_within_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = NoiseParams::new(100, 5, 1e-8, &mut rng);
        assert!(n.u.iter().chain(&n.v).all(|x| x.abs() <= 1e-8));
        assert!(n.u.iter().any(|&x| x != 0.0));
    }
}
