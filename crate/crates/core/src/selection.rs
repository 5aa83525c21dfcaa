//! Clean-sample selection with a two-component 1-D Gaussian mixture.
//!
//! Per-sample scalars (losses, or the squared label entry of `u`) are fit by
//! EM; a sample is selected as clean when the posterior of the low-mean
//! component exceeds a threshold. Two selections combine into a clean / hard
//! / noisy partition.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::noise::NoiseParams;

pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Two-component mixture; component 0 has the smaller mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm1D {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    /// Set when all inputs were equal and no mixture could be fit.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: Gmm1D,
    /// Log-likelihood before the first and after every EM iteration.
    pub log_likelihoods: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Gmm1D {
    fn component_logs(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|c| self.weights[c].ln() + log_normal(x, self.means[c], self.variances[c]))
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| {
                let [a, b] = self.component_logs(x);
                log_sum_exp(a, b)
            })
            .sum()
    }

    fn ordered(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
            self.weights.swap(0, 1);
        }
        self
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

fn run_em(values: &[f64], init: Gmm1D, max_iters: usize, tol: f64) -> GmmFit {
    let n = values.len();
    let mut model = init;
    let mut lls = vec![model.log_likelihood(values)];
    let mut resp = vec![0.0; n];
    for _ in 0..max_iters {
        // E-step: responsibility of component 0
        for (r, &x) in resp.iter_mut().zip(values) {
            let [a, b] = model.component_logs(x);
            *r = (a - log_sum_exp(a, b)).exp();
        }
        // M-step
        let n0: f64 = resp.iter().sum();
        let n1 = n as f64 - n0;
        if n0 <= 0.0 || n1 <= 0.0 {
            break;
        }
        let m0 = resp.iter().zip(values).map(|(r, x)| r * x).sum::<f64>() / n0;
        let m1 = resp.iter().zip(values).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1;
        let v0 = resp
            .iter()
            .zip(values)
            .map(|(r, x)| r * (x - m0) * (x - m0))
            .sum::<f64>()
            / n0;
        let v1 = resp
            .iter()
            .zip(values)
            .map(|(r, x)| (1.0 - r) * (x - m1) * (x - m1))
            .sum::<f64>()
            / n1;
        model = Gmm1D {
            means: [m0, m1],
            variances: [v0.max(VARIANCE_FLOOR), v1.max(VARIANCE_FLOOR)],
            weights: [n0 / n as f64, n1 / n as f64],
            degenerate: false,
        };
        let ll = model.log_likelihood(values);
        let prev = *lls.last().unwrap();
        lls.push(ll);
        if ll - prev < tol {
            break;
        }
    }
    GmmFit {
        model: model.ordered(),
        log_likelihoods: lls,
    }
}

fn init_from_split(sorted: &[f64], cut: usize) -> Gmm1D {
    let (lo, hi) = sorted.split_at(cut);
    let (m0, v0) = moments(lo);
    let (m1, v1) = moments(hi);
    let w0 = lo.len() as f64 / sorted.len() as f64;
    Gmm1D {
        means: [m0, m1],
        variances: [v0, v1],
        weights: [w0, 1.0 - w0],
        degenerate: false,
    }
}

/// Fits the mixture by EM, stopping when the log-likelihood gain drops below
/// `tol` or after `max_iters` iterations.
///
/// Two deterministic starts are tried (median split, and a split at the
/// widest gap between sorted neighbours); the one with the higher final
/// likelihood wins.
pub fn gmm_fit(values: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    if values.len() < 4 {
        return Err(Error::Contract(format!("need at least 4 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    // spreads below one floored standard deviation cannot be resolved into
    // two components
    if sorted[n - 1] - sorted[0] < VARIANCE_FLOOR.sqrt() {
        let x = sorted[0];
        let model = Gmm1D {
            means: [x, x],
            variances: [VARIANCE_FLOOR; 2],
            weights: [0.5, 0.5],
            degenerate: true,
        };
        return Ok(GmmFit {
            log_likelihoods: vec![model.log_likelihood(values)],
            model,
        });
    }
    let median_cut = n / 2;
    let gap_cut = (1..n)
        .max_by(|&a, &b| {
            let ga = sorted[a] - sorted[a - 1];
            let gb = sorted[b] - sorted[b - 1];
            ga.partial_cmp(&gb).unwrap().then(b.cmp(&a))
        })
        .unwrap();
    let fits = [median_cut, gap_cut].map(|cut| run_em(values, init_from_split(&sorted, cut), max_iters, tol));
    let [a, b] = fits;
    let la = *a.log_likelihoods.last().unwrap();
    let lb = *b.log_likelihoods.last().unwrap();
    Ok(if lb > la { b } else { a })
}

/// Posterior probability that `value` came from the low-mean component.
pub fn posterior_clean(model: &Gmm1D, value: f64) -> f64 {
    if model.degenerate {
        return 0.5;
    }
    let [a, b] = model.component_logs(value);
    (a - log_sum_exp(a, b)).exp()
}

/// Indices chosen by a selector plus the per-sample posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: BTreeSet<usize>,
    pub posteriors: Vec<f64>,
}

const EM_ITERS: usize = 100;
const EM_TOL: f64 = 1e-8;

/// `{ i : posterior_clean(fit(values), values_i) > threshold }`.
///
/// A degenerate fit (values spread less than one floored standard
/// deviation) selects everything.
pub fn select_low(values: &[f64], threshold: f64) -> Result<Selection> {
    let fit = gmm_fit(values, EM_ITERS, EM_TOL)?;
    if fit.model.degenerate {
        return Ok(Selection {
            selected: (0..values.len()).collect(),
            posteriors: vec![0.5; values.len()],
        });
    }
    let posteriors: Vec<f64> = values.iter().map(|&v| posterior_clean(&fit.model, v)).collect();
    let selected = posteriors
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(Selection { selected, posteriors })
}

/// Small-loss selection over per-sample losses.
pub fn small_loss_select(losses: &[f64], threshold: f64) -> Result<Selection> {
    select_low(losses, threshold)
}

/// `u_i[y_i]^2`, the only coordinate of the noise-identification term.
pub fn u_scores(noise: &NoiseParams, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let u = noise.u_row(i)[y];
            u * u
        })
        .collect()
}

/// Small-u selection over the squared labeled-class entries of `u`.
pub fn small_u_select(noise: &NoiseParams, labels: &[usize], threshold: f64) -> Result<Selection> {
    select_low(&u_scores(noise, labels), threshold)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplePartition {
    pub clean: BTreeSet<usize>,
    pub hard: BTreeSet<usize>,
    pub noisy: BTreeSet<usize>,
}

impl SamplePartition {
    /// Union equals `omega` and the three sets are pairwise disjoint.
    pub fn is_partition_of(&self, omega: &BTreeSet<usize>) -> bool {
        let total = self.clean.len() + self.hard.len() + self.noisy.len();
        self.clean.is_disjoint(&self.hard)
            && self.clean.is_disjoint(&self.noisy)
            && self.hard.is_disjoint(&self.noisy)
            && total == omega.len()
            && self.clean.iter().chain(&self.hard).chain(&self.noisy).all(|i| omega.contains(i))
    }
}

/// clean = both agree, hard = exactly one selects, noisy = neither.
pub fn joint_partition(
    s_loss: &BTreeSet<usize>,
    s_u: &BTreeSet<usize>,
    omega: &BTreeSet<usize>,
) -> Result<SamplePartition> {
    if !s_loss.is_subset(omega) || !s_u.is_subset(omega) {
        return Err(Error::Contract("selection is not a subset of the sample set".into()));
    }
    let clean: BTreeSet<usize> = s_loss.intersection(s_u).copied().collect();
    let union: BTreeSet<usize> = s_loss.union(s_u).copied().collect();
    let hard = union.difference(&clean).copied().collect();
    let noisy = omega.difference(&union).copied().collect();
    Ok(SamplePartition { clean, hard, noisy })
}
