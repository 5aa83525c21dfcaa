//! Training loops for plain cross-entropy, sparse over-parameterization,
//! coordinated sparse recovery and its selection-based extension.
//!
//! Cadence: the model, `M` and `gamma` step once per batch; `u` and `v`
//! accumulate each sample's gradient when its batch is processed and step
//! once at the end of the epoch. Confidence weights are computed at the start
//! of each epoch from the smoothed predictions of earlier epochs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::collab::{diag_mean, normalize_matrix, update_collab, CollabState, NormalizedCollab};
use crate::confidence::{confidence_weights, ema_update, omega_histogram, EmaState};
use crate::data::Dataset;
use crate::diagnostics::{noise_fitting_rate, selection_metrics};
use crate::error::{Error, Result};
use crate::model::{
    accumulate, argmax, ce_loss_index, ce_loss_soft, forward, forward_trace, layer_deltas, one_hot, sgd_step, GradientSet,
    ModelState, Trace,
};
use crate::noise::{sample_gradients, update_noise_params, NoiseParams, SampleGrad};
use crate::par::map_ordered;
use crate::plus::{alpha_ramp, combine_predictions, correct_labels, mixup, AugmentPolicy, CorrectionState, GateStat, ThresholdRule};
use crate::selection::{joint_partition, small_loss_select, small_u_select, SamplePartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    PlainCe,
    Sop,
    Csr,
    CsrPlus,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::PlainCe, Method::Sop, Method::Csr, Method::CsrPlus];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PlainCe => "plain-ce",
            Method::Sop => "sop",
            Method::Csr => "csr",
            Method::CsrPlus => "csr-plus",
        }
    }

    fn uses_collab(self) -> bool {
        matches!(self, Method::Csr | Method::CsrPlus)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Defaults to `10 * lr`.
    pub lr_u: Option<f64>,
    /// Defaults to `100 * lr`.
    pub lr_v: Option<f64>,
    pub lr_m: f64,
    /// Defaults to `lr_m`.
    pub lr_gamma: Option<f64>,
    pub beta_init: f64,
    /// Defaults to the warm-up length.
    pub ema_window: Option<usize>,
    /// Defaults to 10 epochs for `K <= 10`, 20 otherwise.
    pub warmup: Option<usize>,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub noise_init_scale: f64,
    /// Ablation switches for the collaboration matrix and confidence weights.
    pub use_collab: bool,
    pub use_confidence: bool,
    /// Pins every confidence weight to 1 (model gets full gradients, noise
    /// parameters none).
    pub force_unit_weights: bool,
    pub selection_threshold: f64,
    /// Log small-loss / small-u selection quality every epoch.
    pub track_selection: bool,
    /// Keep per-epoch `v` and per-batch `M` snapshots for lag replay.
    pub record_trajectory: bool,
    /// Keep per-batch and per-sample gradient magnitudes.
    pub dump_gradients: bool,
    pub alpha_max: f64,
    pub use_consistency: bool,
    pub use_mixup: bool,
    pub use_correction: bool,
    pub mix_alpha: f64,
    pub weak_jitter: f64,
    pub strong_jitter: f64,
    pub mask_prob: f64,
    pub correction_eps: f64,
    pub correction_momentum: f64,
    pub threshold_rule: ThresholdRule,
    pub gate_stat: GateStat,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Csr,
            epochs: 60,
            batch_size: 128,
            lr: 0.02,
            weight_decay: 5e-4,
            lr_u: None,
            lr_v: None,
            lr_m: 0.001,
            lr_gamma: None,
            beta_init: 0.7,
            ema_window: None,
            warmup: None,
            seed: 0,
            hidden: vec![32, 32],
            noise_init_scale: 1e-8,
            use_collab: true,
            use_confidence: true,
            force_unit_weights: false,
            selection_threshold: 0.5,
            track_selection: false,
            record_trajectory: false,
            dump_gradients: false,
            alpha_max: 1.0,
            use_consistency: true,
            use_mixup: true,
            use_correction: true,
            mix_alpha: 4.0,
            weak_jitter: 0.05,
            strong_jitter: 0.2,
            mask_prob: 0.2,
            correction_eps: 0.5,
            correction_momentum: 0.9,
            threshold_rule: ThresholdRule::Cap,
            gate_stat: GateStat::Max,
        }
    }
}

impl TrainConfig {
    pub fn lr_u(&self) -> f64 {
        self.lr_u.unwrap_or(10.0 * self.lr)
    }

    pub fn lr_v(&self) -> f64 {
        self.lr_v.unwrap_or(100.0 * self.lr)
    }

    pub fn lr_gamma(&self) -> f64 {
        self.lr_gamma.unwrap_or(self.lr_m)
    }

    pub fn warmup(&self, classes: usize) -> usize {
        self.warmup.unwrap_or(if classes <= 10 { 10 } else { 20 })
    }

    pub fn ema_window(&self, classes: usize) -> usize {
        self.ema_window.unwrap_or_else(|| self.warmup(classes))
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let rates = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("lr_u", self.lr_u()),
            ("lr_v", self.lr_v()),
            ("lr_m", self.lr_m),
            ("lr_gamma", self.lr_gamma()),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup(classes) >= self.epochs {
            return Err(Error::Config(format!(
                "warm-up {} must be shorter than {} epochs",
                self.warmup(classes),
                self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.beta_init) {
            return Err(Error::Config("beta_init must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) || self.weak_jitter > self.strong_jitter {
            return Err(Error::Config("need weak_jitter <= strong_jitter and mask_prob in [0, 1)".into()));
        }
        if !(self.mix_alpha > 0.0) {
            return Err(Error::Config("mix_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// L1 gradient magnitudes of one epoch, per parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradRecord {
    pub theta: f64,
    pub u: f64,
    pub v: f64,
    pub m: f64,
    pub gamma: f64,
}

/// Raw per-batch / per-sample gradient magnitudes of one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradDump {
    pub theta_per_batch: Vec<f64>,
    pub m_per_batch: Vec<f64>,
    pub gamma_per_batch: Vec<f64>,
    /// L1 of each sample's weighted `u` gradient.
    pub u_per_sample: Vec<f64>,
    pub v_per_sample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub nfr: f64,
    pub diag_mean: f64,
    pub gamma: f64,
    pub omega_mean: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub omega_hist: [usize; 16],
    pub small_loss_precision: f64,
    pub small_loss_recall: f64,
    pub small_u_precision: f64,
    pub small_u_recall: f64,
    pub clean_precision: f64,
    pub clean_size: usize,
    pub hard_size: usize,
    pub noisy_size: usize,
    pub partition_exact: bool,
    pub corrections: usize,
    pub corrected_total: usize,
    pub correction_accuracy: f64,
}

impl EpochRecord {
    fn empty(epoch: usize) -> Self {
        Self {
            epoch,
            train_loss: f64::NAN,
            train_accuracy: f64::NAN,
            test_accuracy: f64::NAN,
            nfr: f64::NAN,
            diag_mean: f64::NAN,
            gamma: f64::NAN,
            omega_mean: f64::NAN,
            omega_min: f64::NAN,
            omega_max: f64::NAN,
            omega_hist: [0; 16],
            small_loss_precision: f64::NAN,
            small_loss_recall: f64::NAN,
            small_u_precision: f64::NAN,
            small_u_recall: f64::NAN,
            clean_precision: f64::NAN,
            clean_size: 0,
            hard_size: 0,
            noisy_size: 0,
            partition_exact: true,
            corrections: 0,
            corrected_total: 0,
            correction_accuracy: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub gradients: Vec<GradRecord>,
    pub grad_dumps: Vec<GradDump>,
    pub warnings: Vec<String>,
    /// `M` at the end of each epoch, row-major.
    pub collab_history: Vec<Vec<f64>>,
    /// Epoch at which training produced a non-finite value.
    pub diverged_at: Option<usize>,
}

impl RunLog {
    /// Appends one epoch's gradient magnitudes; epochs must arrive in order.
    pub fn record_gradients(&mut self, epoch: usize, grads: GradRecord) {
        assert_eq!(epoch, self.gradients.len(), "gradient records must be appended in epoch order");
        self.gradients.push(grads);
    }

    pub fn series(&self, pick: impl Fn(&GradRecord) -> f64) -> Vec<f64> {
        self.gradients.iter().map(pick).collect()
    }

    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_accuracy)
    }

    pub fn final_nfr(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.nfr)
    }
}

/// Saved state of a run for lag replay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub samples: usize,
    pub classes: usize,
    /// `v` in effect during each epoch.
    pub v_snapshots: Vec<Vec<f64>>,
    /// `(M, gamma)` in effect for each batch of each epoch.
    pub m_snapshots: Vec<Vec<(Vec<f64>, f64)>>,
    /// L1 magnitude of the `v` gradient per epoch.
    pub v_grad_series: Vec<f64>,
}

/// Replays `v` from `shift` epochs earlier and `M` from the saved run.
#[derive(Debug, Clone, Copy)]
pub struct Replay<'a> {
    pub trajectory: &'a Trajectory,
    pub shift: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub noise: NoiseParams,
    pub collab: CollabState,
    pub log: RunLog,
    pub trajectory: Option<Trajectory>,
    /// Last partition built (selection-based runs and selection tracking).
    pub partition: Option<SamplePartition>,
    /// Pseudo-labels assigned by label correction.
    pub corrected: BTreeMap<usize, usize>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Clean,
    Hard,
    Noisy,
}

/// Augmented inputs for one sample's auxiliary losses.
#[derive(Default)]
struct Aux {
    strong: Option<(Vec<f64>, usize)>,
    mix: Option<(Vec<f64>, Vec<f64>)>,
}

struct SampleOut {
    /// Forward traces with their layer deltas: the main pass, then any
    /// auxiliary passes.
    passes: Vec<(Trace, Vec<Vec<f64>>)>,
    loss: f64,
    terms: SampleGrad,
}

/// Runs `config.method` on `train_set`, evaluating on `test_set`.
pub fn train(train_set: &Dataset, test_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_replay(train_set, test_set, config, None)
}

fn accuracy(model: &ModelState, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let preds = map_ordered(inputs, |x| forward(x, model).map(|p| argmax(&p)));
    let mut hit = 0usize;
    for (p, &y) in preds.into_iter().zip(labels) {
        if p? == y {
            hit += 1;
        }
    }
    Ok(hit as f64 / labels.len() as f64)
}

/// Like [`train`], optionally replaying a saved trajectory (see
/// [`crate::diagnostics::lag_experiment`]).
pub fn train_with_replay(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    replay: Option<&Replay<'_>>,
) -> Result<TrainOutcome> {
    train_set.validate()?;
    test_set.validate()?;
    let k = train_set.classes;
    let n = train_set.len();
    if test_set.dim != train_set.dim {
        return Err(Error::Dimension {
            expected: train_set.dim,
            got: test_set.dim,
        });
    }
    config.validate(k)?;
    if let Some(r) = replay {
        let t = r.trajectory;
        if t.samples != n || t.classes != k || t.v_snapshots.len() < config.epochs {
            return Err(Error::Contract("replay trajectory does not match this run".into()));
        }
        if r.shift >= config.epochs {
            return Err(Error::InvalidShift {
                shift: r.shift,
                epochs: config.epochs,
            });
        }
    }

    let epochs = config.epochs;
    let warmup = config.warmup(k);
    let method = config.method;
    let plus = method == Method::CsrPlus;

    let mut model_rng = stream(config.seed, 0);
    let mut noise_rng = stream(config.seed, 1);
    let mut shuffle_rng = stream(config.seed, 2);
    let mut aug_rng = stream(config.seed, 3);

    let mut widths = vec![train_set.dim];
    widths.extend(&config.hidden);
    widths.push(k);
    let mut model = ModelState::new(&widths, &mut model_rng)?;
    let mut noise = NoiseParams::new(n, k, config.noise_init_scale, &mut noise_rng);
    let mut collab = CollabState::identity(k, config.lr_m, config.lr_gamma());
    let identity = normalize_matrix(&CollabState::identity(k, 0.0, 0.0))?;
    let mut ema = EmaState::new(n, k, config.beta_init, epochs, config.ema_window(k));

    let inputs = train_set.rows();
    let test_inputs = test_set.rows();
    let labels = &train_set.labels;
    let test_labels = test_set.clean_labels.as_ref().unwrap_or(&test_set.labels);
    let zero_row = vec![0.0; k];
    let omega_all: BTreeSet<usize> = (0..n).collect();
    let true_clean: Option<BTreeSet<usize>> = train_set.clean_labels.as_ref().map(|c| {
        c.iter()
            .zip(labels)
            .enumerate()
            .filter(|(_, (a, b))| a == b)
            .map(|(i, _)| i)
            .collect()
    });
    let mislabeled: Option<BTreeSet<usize>> = true_clean
        .as_ref()
        .map(|clean| omega_all.difference(clean).copied().collect());

    let policy = AugmentPolicy::from_feature_std(
        &train_set.feature_std(),
        config.weak_jitter,
        config.strong_jitter,
        config.mask_prob,
    );
    let mix_beta = Beta::new(config.mix_alpha, config.mix_alpha).map_err(|e| Error::Config(e.to_string()))?;
    let mut correction = CorrectionState::new(n);
    correction.eps = config.correction_eps;
    correction.momentum = config.correction_momentum;
    correction.rule = config.threshold_rule;
    correction.gate = config.gate_stat;

    let mut partition: Option<SamplePartition> = None;
    let mut log = RunLog::default();
    let mut trajectory = config.record_trajectory.then(|| Trajectory {
        samples: n,
        classes: k,
        ..Trajectory::default()
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut omega = vec![1.0; n];

    for epoch in 0..epochs {
        let warm = epoch < warmup;
        // the first partition comes from the first epoch with active noise
        // parameters; until then, and whenever the clean set is empty, the
        // extension runs the plain coordinated pass so that u keeps moving
        let fallback = plus && !warm && partition.as_ref().is_some_and(|p| p.clean.is_empty());
        if fallback {
            log.warnings
                .push(format!("epoch {epoch}: empty clean set, running without the extension terms"));
        }
        let active = !warm;
        let noise_on = method != Method::PlainCe && active;
        let collab_on = method.uses_collab() && config.use_collab && active;
        let conf_on = method.uses_collab() && config.use_confidence && active;
        let extras_on = plus && active && !fallback && partition.is_some();

        // confidence weights: theta gets w_i, noise parameters (1 - w_i)
        if config.force_unit_weights {
            omega.iter_mut().for_each(|w| *w = 1.0);
        } else if conf_on && ema.ready(epoch) {
            omega = confidence_weights(ema.q.as_ref().unwrap(), labels, k).omega;
        } else {
            omega.iter_mut().for_each(|w| *w = 1.0);
        }
        let theta_w: &[f64] = &omega;
        let noise_share: Vec<f64> = if config.force_unit_weights {
            vec![0.0; n]
        } else if conf_on {
            omega.iter().map(|w| 1.0 - w).collect()
        } else {
            vec![1.0; n]
        };

        if let Some(r) = replay {
            noise.v = r.trajectory.v_snapshots[epoch.saturating_sub(r.shift)].clone();
        }
        if let Some(t) = trajectory.as_mut() {
            t.v_snapshots.push(noise.v.clone());
            t.m_snapshots.push(Vec::new());
        }

        let snapshot = (model.clone(), noise.clone(), collab.clone());
        order.shuffle(&mut shuffle_rng);
        let alpha = if extras_on {
            alpha_ramp(epoch, epochs, config.alpha_max)
        } else {
            0.0
        };

        let mut roles = vec![Role::Noisy; n];
        let mut targets = labels.clone();
        let (mut clean_list, mut hard_list) = (Vec::new(), Vec::new());
        if extras_on {
            let p = partition.as_ref().unwrap();
            for &i in &p.clean {
                roles[i] = Role::Clean;
            }
            for &i in &p.hard {
                roles[i] = Role::Hard;
            }
            for (&i, &y) in &correction.corrected {
                targets[i] = y;
            }
            clean_list = p.clean.iter().copied().collect();
            hard_list = p.hard.iter().copied().collect();
        }

        let mut grad_u = vec![0.0; if noise_on { n * k } else { 0 }];
        let mut grad_v = grad_u.clone();
        let mut grads = GradRecord::default();
        let mut dump = GradDump::default();
        let mut epoch_loss = 0.0;
        let mut failure: Option<Error> = None;

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if let (Some(r), true) = (replay, collab_on) {
                let (m, g) = &r.trajectory.m_snapshots[epoch][b];
                collab.m.clone_from(m);
                collab.gamma = *g;
            }
            if let Some(t) = trajectory.as_mut() {
                t.m_snapshots[epoch].push((collab.m.clone(), collab.gamma));
            }
            let norm: NormalizedCollab = if collab_on {
                match normalize_matrix(&collab) {
                    Ok(nc) => nc,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            } else {
                identity.clone()
            };
            let scale = 1.0 / batch.len() as f64;

            // augmentations are drawn sequentially so the stream is fixed
            let aux: Vec<Aux> = batch
                .iter()
                .map(|&i| {
                    let mut a = Aux::default();
                    if !extras_on || alpha == 0.0 {
                        return a;
                    }
                    let role = roles[i];
                    if role == Role::Clean && config.use_consistency {
                        a.strong = Some((policy.strong(&inputs[i], &mut aug_rng), targets[i]));
                    }
                    if role != Role::Noisy && config.use_mixup {
                        let pool = if role == Role::Clean { &clean_list } else { &hard_list };
                        let j = pool[aug_rng.random_range(0..pool.len())];
                        let delta = mix_beta.sample(&mut aug_rng);
                        let xi = policy.weak(&inputs[i], &mut aug_rng);
                        let xj = policy.weak(&inputs[j], &mut aug_rng);
                        a.mix = Some(mixup(&xi, &one_hot(targets[i], k), &xj, &one_hot(targets[j], k), delta));
                    }
                    a
                })
                .collect();

            let work: Vec<(usize, &Aux)> = batch.iter().copied().zip(&aux).collect();
            let outs = map_ordered(&work, |&(i, a)| -> Result<SampleOut> {
                let trace = forward_trace(&inputs[i], &model)?;
                let (u, v) = if noise_on {
                    (noise.u_row(i), noise.v_row(i))
                } else {
                    (&zero_row[..], &zero_row[..])
                };
                let terms = sample_gradients(&trace.probs, &norm, u, v, labels[i])?;
                let deltas = layer_deltas(&model, &trace, &terms.grad_logits, theta_w[i] * scale);
                let mut passes = vec![(trace, deltas)];
                let mut loss = terms.loss_ce;
                if let Some((xs, y)) = &a.strong {
                    let tr = forward_trace(xs, &model)?;
                    let mut gz = tr.probs.clone();
                    gz[*y] -= 1.0;
                    loss += alpha * ce_loss_index(&tr.probs, *y);
                    let d = layer_deltas(&model, &tr, &gz, alpha * scale);
                    passes.push((tr, d));
                }
                if let Some((xm, ym)) = &a.mix {
                    let tr = forward_trace(xm, &model)?;
                    let gz: Vec<f64> = tr.probs.iter().zip(ym).map(|(p, t)| p - t).collect();
                    loss += alpha * ce_loss_soft(&tr.probs, ym);
                    let d = layer_deltas(&model, &tr, &gz, alpha * scale);
                    passes.push((tr, d));
                }
                Ok(SampleOut { passes, loss, terms })
            });

            let mut total = GradientSet::zeros_like(&model);
            let mut grad_m_bar = vec![0.0; k * k];
            let mut batch_ok = true;
            for (out, &i) in outs.into_iter().zip(batch) {
                let out = match out {
                    Ok(o) => o,
                    Err(e) => {
                        failure = Some(e);
                        batch_ok = false;
                        break;
                    }
                };
                for (tr, d) in &out.passes {
                    accumulate(&mut total, tr, d);
                }
                epoch_loss += out.loss;
                if collab_on {
                    for (g, s) in grad_m_bar.iter_mut().zip(&out.terms.grad_m_bar) {
                        *g += s * scale;
                    }
                }
                if noise_on {
                    // batch-mean loss: each sample's share carries 1/B
                    for c in 0..k {
                        grad_u[i * k + c] = out.terms.grad_u[c] * scale;
                        grad_v[i * k + c] = out.terms.grad_v[c] * scale;
                    }
                }
            }
            if !batch_ok || !epoch_loss.is_finite() {
                failure.get_or_insert(Error::Diverged { epoch });
                break;
            }

            if collab_on {
                let (gm, gg) = norm.backprop(&grad_m_bar);
                let l1: f64 = gm.iter().map(|g| g.abs()).sum();
                grads.m += l1;
                grads.gamma += gg.abs();
                if config.dump_gradients {
                    dump.m_per_batch.push(l1);
                    dump.gamma_per_batch.push(gg.abs());
                }
                if replay.is_none() {
                    match update_collab(&mut collab, &gm, gg) {
                        Ok(Some(clip)) => log.warnings.push(format!(
                            "epoch {epoch} batch {b}: gamma {} clipped to {}",
                            clip.requested, clip.clipped_to
                        )),
                        Ok(None) => {}
                        Err(_) => {
                            failure = Some(Error::NonFinite {
                                what: "collaboration gradient",
                                epoch,
                            });
                            break;
                        }
                    }
                }
            } else if config.dump_gradients {
                dump.m_per_batch.push(0.0);
                dump.gamma_per_batch.push(0.0);
            }

            let l1 = total.l1();
            grads.theta += l1;
            if config.dump_gradients {
                dump.theta_per_batch.push(l1);
            }
            if let Err(e) = sgd_step(&mut model, &total, config.lr, config.weight_decay, epoch) {
                failure = Some(e);
                break;
            }
        }

        if failure.is_none() && noise_on {
            let lr_v = if replay.is_some() { 0.0 } else { config.lr_v() };
            let w_arg: Vec<f64> = noise_share.iter().map(|s| 1.0 - s).collect();
            for i in 0..n {
                let s = noise_share[i];
                let su: f64 = grad_u[i * k..(i + 1) * k].iter().map(|g| (s * g).abs()).sum();
                let sv: f64 = if lr_v > 0.0 {
                    grad_v[i * k..(i + 1) * k].iter().map(|g| (s * g).abs()).sum()
                } else {
                    0.0
                };
                grads.u += su;
                grads.v += sv;
                if config.dump_gradients {
                    dump.u_per_sample.push(su);
                    dump.v_per_sample.push(sv);
                }
            }
            if let Err(e) = update_noise_params(&mut noise, &grad_u, &grad_v, config.lr_u(), lr_v, &w_arg, epoch) {
                failure = Some(e);
            }
        }

        if let Some(err) = failure {
            let (m, nz, c) = snapshot;
            model = m;
            noise = nz;
            collab = c;
            log.diverged_at = Some(epoch);
            log.warnings.push(format!("epoch {epoch}: aborted: {err}"));
            if let Some(t) = trajectory.as_mut() {
                t.v_snapshots.pop();
                t.m_snapshots.pop();
            }
            break;
        }
        debug_assert!(noise.sign_structure_holds(labels));

        // evaluation pass on the training set
        let probs = map_ordered(&inputs, |x| forward(x, &model));
        let mut q_new = Vec::with_capacity(n * k);
        for p in probs {
            q_new.extend(p?);
        }
        ema_update(&mut ema, &q_new, epoch)?;
        let preds: Vec<usize> = q_new.chunks(k).map(argmax).collect();
        let losses: Vec<f64> = q_new
            .chunks(k)
            .zip(labels)
            .map(|(p, &y)| ce_loss_index(p, y))
            .collect();

        let mut rec = EpochRecord::empty(epoch);
        rec.train_loss = epoch_loss / n as f64;
        let reference = train_set.clean_labels.as_ref().unwrap_or(labels);
        rec.train_accuracy =
            preds.iter().zip(reference).filter(|(p, y)| p == y).count() as f64 / n as f64;
        rec.test_accuracy = accuracy(&model, &test_inputs, test_labels)?;
        if let Some(mis) = mislabeled.as_ref().filter(|m| !m.is_empty()) {
            rec.nfr = noise_fitting_rate(&preds, labels, mis)?;
        }
        rec.diag_mean = diag_mean(&collab.m, k);
        rec.gamma = collab.gamma;
        rec.omega_mean = omega.iter().sum::<f64>() / n as f64;
        rec.omega_min = omega.iter().cloned().fold(f64::INFINITY, f64::min);
        rec.omega_max = omega.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        rec.omega_hist = omega_histogram(&omega);

        let want_partition = plus && !warm;
        if want_partition || (config.track_selection && method != Method::PlainCe) {
            let s_loss = small_loss_select(&losses, config.selection_threshold)?;
            let s_u = small_u_select(&noise, labels, config.selection_threshold)?;
            let mut p = joint_partition(&s_loss.selected, &s_u.selected, &omega_all)?;
            if let Some(clean) = &true_clean {
                let sl = selection_metrics(&s_loss.selected, clean);
                let su = selection_metrics(&s_u.selected, clean);
                let jc = selection_metrics(&p.clean, clean);
                rec.small_loss_precision = sl.precision;
                rec.small_loss_recall = sl.recall;
                rec.small_u_precision = su.precision;
                rec.small_u_recall = su.recall;
                rec.clean_precision = jc.precision;
            }

            if config.use_correction && extras_on {
                let noisy: Vec<usize> = p.noisy.iter().copied().collect();
                let views: Vec<(Vec<f64>, Vec<f64>)> = noisy
                    .iter()
                    .map(|&i| (policy.weak(&inputs[i], &mut aug_rng), policy.strong(&inputs[i], &mut aug_rng)))
                    .collect();
                let combined = map_ordered(&views, |(xw, xs)| -> Result<Vec<f64>> {
                    let pw = forward(xw, &model)?;
                    let ps = forward(xs, &model)?;
                    Ok(combine_predictions(&pw, &ps, config.correction_eps))
                });
                let mut p_ws = BTreeMap::new();
                for (&i, c) in noisy.iter().zip(combined) {
                    p_ws.insert(i, c?);
                }
                let fresh = correct_labels(&p.noisy, &p_ws, &mut correction);
                rec.corrections = fresh.len();
                if let Some(clean) = &train_set.clean_labels {
                    if !fresh.is_empty() {
                        let right = fresh.iter().filter(|(i, y)| clean[*i] == *y).count();
                        rec.correction_accuracy = right as f64 / fresh.len() as f64;
                    }
                }
            }
            if plus {
                for &i in correction.corrected.keys() {
                    p.hard.remove(&i);
                    p.noisy.remove(&i);
                    p.clean.insert(i);
                }
            }
            rec.partition_exact = p.is_partition_of(&omega_all);
            rec.clean_size = p.clean.len();
            rec.hard_size = p.hard.len();
            rec.noisy_size = p.noisy.len();
            if !(plus && warm) {
                partition = Some(p);
            }
        }
        rec.corrected_total = correction.corrected.len();

        if let Some(t) = trajectory.as_mut() {
            t.v_grad_series.push(grads.v);
        }
        log.record_gradients(epoch, grads);
        if config.dump_gradients {
            log.grad_dumps.push(dump);
        }
        log.epochs.push(rec);
        log.collab_history.push(collab.m.clone());
    }

    Ok(TrainOutcome {
        model,
        noise,
        collab,
        log,
        trajectory,
        partition,
        corrected: correction.corrected,
    })
}

/// How a batch's per-sample work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    /// Uses rayon when the `parallel` feature is on.
    Default,
    Sequential,
}

/// Weighted model gradient and summed loss of one batch under the coordinated
/// loss; the per-sample core of [`train`], exposed for benchmarking.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    model: &ModelState,
    inputs: &[Vec<f64>],
    labels: &[usize],
    batch: &[usize],
    collab: &NormalizedCollab,
    noise: &NoiseParams,
    weights: &[f64],
    exec: Exec,
) -> Result<(GradientSet, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let one = |&i: &usize| -> Result<(Trace, Vec<Vec<f64>>, f64)> {
        let trace = forward_trace(&inputs[i], model)?;
        let terms = sample_gradients(&trace.probs, collab, noise.u_row(i), noise.v_row(i), labels[i])?;
        let deltas = layer_deltas(model, &trace, &terms.grad_logits, weights[i] * scale);
        Ok((trace, deltas, terms.loss_ce))
    };
    let outs = match exec {
        Exec::Default => map_ordered(batch, one),
        Exec::Sequential => crate::par::map_sequential(batch, one),
    };
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for o in outs {
        let (trace, deltas, l) = o?;
        accumulate(&mut total, &trace, &deltas);
        loss += l;
    }
    Ok((total, loss))
}
