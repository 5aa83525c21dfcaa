//! Small feedforward softmax classifier with hand-derived gradients.
//!
//! Hidden layers use `tanh`; the last layer emits logits that go through a
//! softmax. Weights are stored row-major as `[d_in][d_out]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `[d_in][d_out]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            weights: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &xi) in input.iter().enumerate() {
            let row = &self.weights[i * self.d_out..(i + 1) * self.d_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Parameters of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<Layer>,
    pub classes: usize,
}

impl ModelState {
    /// Builds a randomly initialized network `widths[0] -> ... -> widths[last]`.
    ///
    /// Weights are drawn from `N(0, 2 / d_in)`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract("need at least input and output widths".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Contract("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (d_in, d_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("valid std");
            let mut layer = Layer::zeros(d_in, d_out);
            for w in &mut layer.weights {
                *w = normal.sample(rng);
            }
            layers.push(layer);
        }
        Ok(Self {
            classes: *widths.last().unwrap(),
            layers,
        })
    }

    /// Default architecture: `d -> 32 -> 32 -> classes`.
    pub fn default_arch<R: Rng + ?Sized>(d: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Self::new(&[d, 32, 32, classes], rng)
    }

    /// A single linear layer with all parameters zero.
    pub fn zeros_linear(d: usize, classes: usize) -> Self {
        Self {
            layers: vec![Layer::zeros(d, classes)],
            classes,
        }
    }

    /// A network with no layers: the input is read directly as logits.
    pub fn parameterless(classes: usize) -> Self {
        Self {
            layers: Vec::new(),
            classes,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(self.classes, |l| l.d_in)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// All parameters, flattened layer by layer (weights then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }
}

/// Gradients congruent in shape with a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.d_in, l.d_out))
                .collect(),
        }
    }

    /// Sum of absolute entries.
    pub fn l1(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|g| g.abs())
            .sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn congruent_with(&self, model: &ModelState) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.d_in == l.d_in && g.d_out == l.d_out)
    }
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input fed to layer `l`.
    inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (k, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Contract("label vector has several ones".into()));
            }
            hot = Some(k);
        } else if v != 0.0 {
            return Err(Error::Contract("label vector is not one-hot".into()));
        }
    }
    hot.ok_or_else(|| Error::Contract("label vector has no one".into()))
}

pub fn forward_trace(x: &[f64], model: &ModelState) -> Result<Trace> {
    if x.len() != model.input_width() {
        return Err(Error::Dimension {
            expected: model.input_width(),
            got: x.len(),
        });
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut current = x.to_vec();
    let last = model.layers.len().saturating_sub(1);
    for (li, layer) in model.layers.iter().enumerate() {
        let mut out = Vec::with_capacity(layer.d_out);
        layer.apply(&current, &mut out);
        if li != last {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        inputs.push(std::mem::replace(&mut current, out));
    }
    let probs = softmax(&current);
    Ok(Trace {
        inputs,
        logits: current,
        probs,
    })
}

/// Class probabilities `f(x; theta)`.
pub fn forward(x: &[f64], model: &ModelState) -> Result<Vec<f64>> {
    forward_trace(x, model).map(|t| t.probs)
}

/// Backpropagates `grad_logits` through the network, adding `scale * dL/dtheta`
/// into `out`.
pub fn backward(model: &ModelState, trace: &Trace, grad_logits: &[f64], scale: f64, out: &mut GradientSet) {
    let deltas = layer_deltas(model, trace, grad_logits, scale);
    accumulate(out, trace, &deltas);
}

/// Error signal at the output of every layer (pre-activation), scaled by
/// `scale`. Together with the trace this determines the parameter gradient;
/// see [`accumulate`].
pub fn layer_deltas(model: &ModelState, trace: &Trace, grad_logits: &[f64], scale: f64) -> Vec<Vec<f64>> {
    let n = model.layers.len();
    let mut deltas = vec![Vec::new(); n];
    let mut delta: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
    for li in (0..n).rev() {
        let layer = &model.layers[li];
        if li > 0 {
            // input to this layer is tanh output of the previous one
            let input = &trace.inputs[li];
            let mut next = vec![0.0; layer.d_in];
            for (i, v) in next.iter_mut().enumerate() {
                let row = &layer.weights[i * layer.d_out..(i + 1) * layer.d_out];
                let s: f64 = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                *v = s * (1.0 - input[i] * input[i]);
            }
            deltas[li] = std::mem::replace(&mut delta, next);
        } else {
            deltas[li] = std::mem::take(&mut delta);
        }
    }
    deltas
}

/// Adds the outer products `input_l * delta_l` (and bias terms) into `out`.
pub fn accumulate(out: &mut GradientSet, trace: &Trace, deltas: &[Vec<f64>]) {
    for ((g, input), delta) in out.layers.iter_mut().zip(&trace.inputs).zip(deltas) {
        for (b, d) in g.bias.iter_mut().zip(delta) {
            *b += d;
        }
        for (i, &xi) in input.iter().enumerate() {
            let row = &mut g.weights[i * g.d_out..(i + 1) * g.d_out];
            for (w, d) in row.iter_mut().zip(delta) {
                *w += xi * d;
            }
        }
    }
}

/// Gradient of a loss w.r.t. logits given its gradient w.r.t. the softmax
/// output.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// Cross-entropy `-sum_k y_k log p_k` with `p` floored at [`PROB_FLOOR`].
pub fn ce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: p.len(),
        });
    }
    let label = one_hot_index(y)?;
    Ok(ce_loss_index(p, label))
}

/// Cross-entropy against an integer label.
pub fn ce_loss_index(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

/// Cross-entropy against a soft target distribution (used by Mixup).
pub fn ce_loss_soft(p: &[f64], target: &[f64]) -> f64 {
    -p.iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&pk, &t)| t * pk.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Squared error summed over classes.
pub fn mse_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: p.len(),
        });
    }
    Ok(p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `w <- w - lr * (g + weight_decay * w)` for every parameter.
pub fn sgd_step(model: &mut ModelState, grads: &GradientSet, lr: f64, weight_decay: f64, epoch: usize) -> Result<()> {
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Contract(format!("bad lr {lr} / weight decay {weight_decay}")));
    }
    if !grads.congruent_with(model) {
        return Err(Error::Contract("gradient shape differs from model".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite { what: "model gradient", epoch });
    }
    for (l, g) in model.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
            *w -= lr * (gw + weight_decay * *w);
        }
        for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
            *b -= lr * (gb + weight_decay * *b);
        }
    }
    Ok(())
}

/// A differentiable objective over the model parameters.
pub trait Objective {
    fn loss(&self, model: &ModelState) -> f64;
    fn gradient(&self, model: &ModelState) -> GradientSet;
}

/// Mean cross-entropy of a labeled batch.
pub struct CeObjective<'a> {
    pub inputs: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

impl Objective for CeObjective<'_> {
    fn loss(&self, model: &ModelState) -> f64 {
        let n = self.inputs.len() as f64;
        self.inputs
            .iter()
            .zip(self.labels)
            .map(|(x, &y)| ce_loss_index(&forward(x, model).expect("dims"), y))
            .sum::<f64>()
            / n
    }

    fn gradient(&self, model: &ModelState) -> GradientSet {
        let mut g = GradientSet::zeros_like(model);
        let n = self.inputs.len() as f64;
        for (x, &y) in self.inputs.iter().zip(self.labels) {
            let trace = forward_trace(x, model).expect("dims");
            let mut gz = trace.probs.clone();
            gz[y] -= 1.0;
            backward(model, &trace, &gz, 1.0 / n, &mut g);
        }
        g
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central difference of `f` at coordinate `i` of `x`; `x` is restored.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(x: &mut [f64], i: usize, eps: f64, mut f: F) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let plus = f(x);
    x[i] = orig - eps;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Max relative error between the analytic gradient of `objective` and
/// central finite differences over every parameter.
pub fn grad_check<O: Objective + ?Sized>(model: &ModelState, objective: &O, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let analytic = objective.gradient(model).flat();
    let mut params = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = central_difference(&mut params, i, eps, |p| {
            probe.set_params(p);
            objective.loss(&probe)
        });
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_is_uniform() {
        let m = ModelState::zeros_linear(3, 4);
        let p = forward(&[1.0, -2.0, 0.5], &m).unwrap();
        for v in p {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn softmax_two_classes() {
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_width() {
        let m = ModelState::zeros_linear(3, 2);
        assert!(matches!(forward(&[1.0], &m), Err(Error::Dimension { .. })));
    }

    /// Independent evaluator: explicit matrix-vector loops over an owned copy.
    fn reference_forward(x: &[f64], m: &ModelState) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, l) in m.layers.iter().enumerate() {
            let mut z = vec![0.0; l.d_out];
            for o in 0..l.d_out {
                let mut acc = l.bias[o];
                for i in 0..l.d_in {
                    acc += h[i] * l.weights[i * l.d_out + o];
                }
                z[o] = if li + 1 < m.layers.len() { acc.tanh() } else { acc };
            }
            h = z;
        }
        let e: Vec<f64> = h.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn forward_matches_reference_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelState::new(&[5, 7, 6, 4], &mut rng).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = forward(&x, &m).unwrap();
            let b = reference_forward(&x, &m);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let u = vec![0.1; 10];
        assert!((ce_loss(&u, &one_hot(3, 10)).unwrap() - std::f64::consts::LN_10).abs() < 1e-6);
        assert!((ce_loss(&[0.25, 0.75], &[0.0, 1.0]).unwrap() - 0.287682).abs() < 1e-6);
        assert!(ce_loss(&[0.5, 0.5], &[0.5, 0.5]).is_err());
        assert!(ce_loss(&[0.5, 0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ce_floor_keeps_loss_finite() {
        let l = ce_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(mse_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    fn scalar_model(w: f64) -> ModelState {
        let mut m = ModelState::zeros_linear(1, 1);
        m.layers[0].weights[0] = w;
        m
    }

    #[test]
    fn sgd_examples() {
        let mut m = scalar_model(1.0);
        let mut g = GradientSet::zeros_like(&m);
        sgd_step(&mut m, &g, 0.1, 0.0, 0).unwrap();
        assert_eq!(m.layers[0].weights[0], 1.0);

        g.layers[0].weights[0] = 0.5;
        sgd_step(&mut m, &g, 0.1, 0.0, 0).unwrap();
        assert!((m.layers[0].weights[0] - 0.95).abs() < 1e-15);

        let mut m = scalar_model(1.0);
        let g = GradientSet::zeros_like(&m);
        sgd_step(&mut m, &g, 0.1, 0.5, 0).unwrap();
        assert!((m.layers[0].weights[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_lr_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = ModelState::new(&[3, 4, 2], &mut rng).unwrap();
        let before = m.clone();
        let mut g = GradientSet::zeros_like(&m);
        g.layers[1].bias[0] = 3.0;
        sgd_step(&mut m, &g, 0.0, 0.1, 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut m = scalar_model(1.0);
        let mut g = GradientSet::zeros_like(&m);
        g.layers[0].bias[0] = f64::NAN;
        assert_eq!(
            sgd_step(&mut m, &g, 0.1, 0.0, 7),
            Err(Error::NonFinite { what: "model gradient", epoch: 7 })
        );
    }

    #[test]
    fn grad_check_linear_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ModelState::new(&[4, 3], &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let obj = CeObjective { inputs: &inputs, labels: &labels };
        assert!(grad_check(&m, &obj, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn grad_check_deep_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ModelState::new(&[4, 6, 5, 3], &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let obj = CeObjective { inputs: &inputs, labels: &labels };
        assert!(grad_check(&m, &obj, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn grad_check_parameterless_is_zero() {
        let m = ModelState::parameterless(3);
        let inputs = vec![vec![0.1, 0.2, 0.3]];
        let labels = vec![1];
        let obj = CeObjective { inputs: &inputs, labels: &labels };
        assert_eq!(grad_check(&m, &obj, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_rejects_eps() {
        let m = ModelState::parameterless(2);
        let obj = CeObjective { inputs: &[], labels: &[] };
        assert!(grad_check(&m, &obj, 1e-2).is_err());
    }
}
