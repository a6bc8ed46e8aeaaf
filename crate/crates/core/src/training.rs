//! Supervised cross-entropy training, the two self-supervised refinement
//! procedures and offline adaptation on unlabeled test windows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{pick_two_distinct, AugmentParams};
use crate::autodiff::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{argmax, batch_tensor, FeatureExtractor, Mode, ModelBundle, NetConfig};
use crate::recording::{ChannelMatrix, TrialSet, TrialSetKind, MI, REST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Random crops drawn from every trial per epoch.
    pub crops_per_trial: usize,
    pub valid_fraction: f64,
    /// Re-train from the initial weights on train + valid for the selected
    /// epoch count.
    pub retrain_full: bool,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            patience: 30,
            max_epochs: 120,
            batch_size: 8,
            crops_per_trial: 3,
            valid_fraction: 0.4,
            retrain_full: true,
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "valid fraction {} outside (0, 1)",
                self.valid_fraction
            )));
        }
        if self.batch_size < 2 || self.crops_per_trial == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(
                "batch size must be >= 2, crops per trial >= 1 and lr positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Weight of the transition (negative) term.
    pub delta: f64,
    /// Gaussian kernel width.
    pub sigma: f64,
    /// EMA rate of the target extractor.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Sets up to this size are processed as one batch.
    pub full_batch_max: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            sigma: 2.0,
            lambda: 0.9995,
            lr: 5e-5,
            epochs: 40,
            full_batch_max: 256,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need delta >= 0 and sigma > 0, got {} and {}",
                self.delta, self.sigma
            )));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidConfig(format!("lambda {} outside (0, 1)", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("SSL batch size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Supervised,
    SupervisedRetrain,
    SslPrescreen,
    SslClassification,
    AdaptPrescreen,
    AdaptClassification,
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssl_loss: Option<f64>,
}

impl EpochMetrics {
    fn new(stage: Stage, epoch: usize) -> Self {
        Self {
            stage,
            epoch,
            train_loss: None,
            valid_acc: None,
            valid_loss: None,
            ssl_loss: None,
        }
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    items.shuffle(rng);
}

/// Stratified split; per class, `round(fraction × n_c)` trials go to the
/// validation side, clamped so both sides keep at least one.
pub fn split_train_valid(set: &TrialSet, valid_fraction: f64, seed: u64) -> Result<(TrialSet, TrialSet)> {
    if set.is_empty() {
        return Err(Error::Empty("trial set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = set.labels();
    labels.sort_unstable();
    labels.dedup();
    let (mut train_idx, mut valid_idx) = (Vec::new(), Vec::new());
    for &label in &labels {
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.trials[i].label == label).collect();
        if members.len() < 2 {
            return Err(Error::ClassTooSmall {
                label,
                count: members.len(),
            });
        }
        shuffle(&mut members, &mut rng);
        let n_valid = (libm::round(valid_fraction * members.len() as f64) as usize).clamp(1, members.len() - 1);
        valid_idx.extend_from_slice(&members[..n_valid]);
        train_idx.extend_from_slice(&members[n_valid..]);
    }
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    let pick = |idx: &[usize]| TrialSet {
        trials: idx.iter().map(|&i| set.trials[i].clone()).collect(),
        kind: set.kind,
        class_names: set.class_names.clone(),
    };
    Ok((pick(&train_idx), pick(&valid_idx)))
}

/// Early-stopping bookkeeping on validation accuracy, with validation loss
/// breaking ties. Epochs are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch and returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, acc: f64, loss: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((a, l)) => acc > a || (acc == a && loss < l),
        };
        if better {
            self.best = Some((acc, loss));
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|_| self.best_epoch)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.best.map(|b| b.0)
    }
}

/// Random crop of `len` columns, or the center crop when `rng` is `None`.
pub fn crop(m: &ChannelMatrix, len: usize, rng: Option<&mut ChaCha8Rng>) -> Result<ChannelMatrix> {
    let ts = m.n_samples();
    if len > ts {
        return Err(Error::WindowTooLong { window: len, len: ts });
    }
    if len == ts {
        return Ok(m.clone());
    }
    let start = match rng {
        Some(r) => r.gen_range(0..=ts - len),
        None => (ts - len) / 2,
    };
    Ok(m.columns(start, len))
}

fn check_labels(set: &TrialSet, n_classes: usize) -> Result<Vec<usize>> {
    set.trials
        .iter()
        .map(|t| {
            let bad = Error::LabelOutOfRange {
                label: t.label,
                n_classes,
            };
            if set.kind == TrialSetKind::Multiclass && t.label == 0 {
                return Err(bad);
            }
            let c = set.class_index(t.label);
            if c < n_classes {
                Ok(c)
            } else {
                Err(bad)
            }
        })
        .collect()
}

/// Splits shuffled indices into batches, folding a trailing singleton into
/// the previous batch (batch norm needs two samples).
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(2)).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size.max(2);
        out[n - 1] = &order[start..];
    }
    out
}

fn theta_psi_step(bundle: &mut ModelBundle, adam: &mut Adam, tape: &Tape, loss: crate::autodiff::Var, vars: &[crate::autodiff::Var]) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let likes: Vec<Tensor> = bundle
        .theta
        .params()
        .into_iter()
        .chain([&bundle.psi.weight, &bundle.psi.bias])
        .take(vars.len())
        .cloned()
        .collect();
    let g: Vec<Tensor> = vars.iter().zip(&likes).map(|(&v, like)| grads.take_or_zeros(v, like)).collect();
    let grefs: Vec<&Tensor> = g.iter().collect();
    let ModelBundle { theta, psi, .. } = bundle;
    let mut params: Vec<&mut Tensor> = theta.params_mut().into_iter().chain(psi.params_mut()).take(vars.len()).collect();
    adam.step(&mut params, &grefs)
}

fn supervised_epoch(
    bundle: &mut ModelBundle,
    adam: &mut Adam,
    samples: &[(&ChannelMatrix, usize)],
    batch_size: usize,
    crops_per_trial: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = bundle.config.clone();
    let mut order: Vec<usize> = (0..samples.len() * crops_per_trial).map(|i| i % samples.len()).collect();
    shuffle(&mut order, rng);
    let mut total = 0.0;
    for batch in batches(&order, batch_size) {
        let crops = batch
            .iter()
            .map(|&i| crop(samples[i].0, cfg.input_len, Some(rng)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ChannelMatrix> = crops.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|&i| samples[i].1).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(batch_tensor(&refs)?);
        let fwd = bundle.theta.forward(&cfg, &mut tape, x, Mode::Train(Some(rng as &mut dyn rand::RngCore)), true)?;
        let (logits, head) = bundle.psi.forward(&mut tape, fwd.embedding, true)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        total += tape.value(loss).item() * batch.len() as f64;
        let vars: Vec<_> = fwd.params.iter().chain(&head).copied().collect();
        theta_psi_step(bundle, adam, &tape, loss, &vars)?;
        bundle.theta.update_running_stats(&fwd.stats);
    }
    Ok(total / order.len() as f64)
}

/// Accuracy and mean cross-entropy of center crops in eval mode.
pub fn evaluate(bundle: &ModelBundle, set: &TrialSet) -> Result<(f64, f64)> {
    let labels = check_labels(set, bundle.config.n_classes)?;
    let crops = set
        .trials
        .iter()
        .map(|t| crop(&t.samples, bundle.config.input_len, None))
        .collect::<Result<Vec<_>>>()?;
    let probs = bundle.predict_windows(&crops, 64)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(&labels) {
        correct += usize::from(argmax(p) == y);
        loss -= libm::log(p[y].max(1e-300));
    }
    let n = labels.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    pub best_epoch: usize,
    pub best_valid_acc: f64,
    pub epochs_run: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Minimizes mean cross-entropy with Adam on random crops, early-stopping on
/// validation accuracy. Leaves `bundle` at the best-validation parameters, or
/// re-trained on train + valid for that many epochs when `retrain_full` is set.
pub fn train_supervised(
    bundle: &mut ModelBundle,
    train: &TrialSet,
    valid: &TrialSet,
    cfg: &SupervisedConfig,
) -> Result<SupervisedReport> {
    cfg.validate()?;
    if train.len() < 2 || valid.is_empty() {
        return Err(Error::Empty("training or validation trials"));
    }
    let k = bundle.config.n_classes;
    let train_labels = check_labels(train, k)?;
    check_labels(valid, k)?;
    let initial = bundle.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<(&ChannelMatrix, usize)> = train.trials.iter().map(|t| &t.samples).zip(train_labels).collect();

    let mut adam = Adam::new(cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = bundle.clone();
    let mut metrics = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let loss = supervised_epoch(bundle, &mut adam, &samples, cfg.batch_size, cfg.crops_per_trial, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        let (acc, vloss) = evaluate(bundle, valid)?;
        epochs_run = epoch;
        let mut m = EpochMetrics::new(Stage::Supervised, epoch);
        m.train_loss = Some(loss);
        m.valid_acc = Some(acc);
        m.valid_loss = Some(vloss);
        metrics.push(m);
        if stopper.observe(epoch, acc, vloss) {
            best = bundle.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let best_epoch = stopper.best_epoch().unwrap_or(0);
    let best_valid_acc = stopper.best_accuracy().unwrap_or(0.0);

    if cfg.retrain_full && best_epoch > 0 {
        *bundle = initial;
        let full = TrialSet::concat(&[train.clone(), valid.clone()])?;
        let labels = check_labels(&full, k)?;
        let samples: Vec<(&ChannelMatrix, usize)> = full.trials.iter().map(|t| &t.samples).zip(labels).collect();
        let mut adam = Adam::new(cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f011);
        for epoch in 1..=best_epoch {
            let loss = supervised_epoch(bundle, &mut adam, &samples, cfg.batch_size, cfg.crops_per_trial, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            let mut m = EpochMetrics::new(Stage::SupervisedRetrain, epoch);
            m.train_loss = Some(loss);
            metrics.push(m);
        }
    } else {
        *bundle = best;
    }
    Ok(SupervisedReport {
        best_epoch,
        best_valid_acc,
        epochs_run,
        metrics,
    })
}

/// A negative sample halfway between a rest trial and an MI trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTrial {
    pub samples: ChannelMatrix,
    pub rest_index: usize,
    pub mi_index: usize,
}

fn midpoint(a: &ChannelMatrix, b: &ChannelMatrix) -> Result<ChannelMatrix> {
    if a.n_channels() != b.n_channels() || a.n_samples() != b.n_samples() {
        return Err(Error::Shape {
            op: "transition",
            detail: format!(
                "{}x{} vs {}x{}",
                a.n_channels(),
                a.n_samples(),
                b.n_channels(),
                b.n_samples()
            ),
        });
    }
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 0.5 * (x + y)).collect();
    ChannelMatrix::from_vec(a.n_channels(), a.n_samples(), data)
}

/// `n_out` transitions, each the average of a uniformly drawn rest trial and
/// a uniformly drawn MI trial of `binary_set`.
pub fn make_transition_trials(binary_set: &TrialSet, n_out: usize, seed: u64) -> Result<Vec<TransitionTrial>> {
    let rest: Vec<usize> = (0..binary_set.len()).filter(|&i| binary_set.trials[i].label == REST).collect();
    let mi: Vec<usize> = (0..binary_set.len()).filter(|&i| binary_set.trials[i].label == MI).collect();
    if rest.is_empty() {
        return Err(Error::MissingClass(REST));
    }
    if mi.is_empty() {
        return Err(Error::MissingClass(MI));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_out)
        .map(|_| {
            let r = rest[rng.gen_range(0..rest.len())];
            let m = mi[rng.gen_range(0..mi.len())];
            Ok(TransitionTrial {
                samples: midpoint(&binary_set.trials[r].samples, &binary_set.trials[m].samples)?,
                rest_index: r,
                mi_index: m,
            })
        })
        .collect()
}

/// `δ·K(a, n) − K(a, p)` where `K(x, y) = exp(−Σ‖x_i − y_i‖² / 2σ²)`, all
/// rows L2-normalized first. Inputs are raw `[B, E]` embeddings.
pub fn prescreen_ssl_loss(online: &Tensor, positive: &Tensor, negative: &Tensor, delta: f64, sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let [a, p, n] = [online, positive, negative].map(|t| tape.leaf(t.clone()));
    let (a, p, n) = (tape.l2_normalize(a)?, tape.l2_normalize(p)?, tape.l2_normalize(n)?);
    let pos = tape.gaussian_kernel_similarity(a, p, sigma)?;
    let neg = tape.gaussian_kernel_similarity(a, n, sigma)?;
    let neg = tape.scale(neg, delta);
    let pos = tape.scale(pos, -1.0);
    let loss = tape.add(neg, pos)?;
    Ok(tape.value(loss).item())
}

/// `−K(a, b)` on L2-normalized rows.
pub fn classification_ssl_loss(first: &Tensor, second: &Tensor, sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(first.clone());
    let b = tape.leaf(second.clone());
    let (a, b) = (tape.l2_normalize(a)?, tape.l2_normalize(b)?);
    let s = tape.gaussian_kernel_similarity(a, b, sigma)?;
    let loss = tape.scale(s, -1.0);
    Ok(tape.value(loss).item())
}

/// Normalized target embeddings: batch-statistics batch norm, no dropout, no
/// gradient.
fn target_embedding(phi: &FeatureExtractor, cfg: &NetConfig, batch: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch);
    let out = phi.forward(cfg, &mut tape, x, Mode::Train(None), false)?;
    let z = tape.l2_normalize(out.embedding)?;
    Ok(tape.value(z).clone())
}

struct SslBatch {
    online: Tensor,
    positive: Tensor,
    negative: Option<Tensor>,
}

fn ssl_step(
    bundle: &mut ModelBundle,
    phi: &FeatureExtractor,
    adam: &mut Adam,
    cfg: &SslConfig,
    batch: SslBatch,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let net = bundle.config.clone();
    let pos_target = target_embedding(phi, &net, batch.positive)?;
    let neg_target = batch.negative.map(|n| target_embedding(phi, &net, n)).transpose()?;

    let mut tape = Tape::new();
    let x = tape.leaf(batch.online);
    let fwd = bundle.theta.forward(&net, &mut tape, x, Mode::Train(Some(rng as &mut dyn rand::RngCore)), true)?;
    let z = tape.l2_normalize(fwd.embedding)?;
    let p = tape.leaf(pos_target);
    let pos = tape.gaussian_kernel_similarity(z, p, cfg.sigma)?;
    let mut loss = tape.scale(pos, -1.0);
    if let Some(n) = neg_target {
        let n = tape.leaf(n);
        let neg = tape.gaussian_kernel_similarity(z, n, cfg.sigma)?;
        let neg = tape.scale(neg, cfg.delta);
        loss = tape.add(neg, loss)?;
    }
    let value = tape.value(loss).item();
    theta_psi_step(bundle, adam, &tape, loss, &fwd.params)?;
    Ok(value)
}

/// Shared SSL driver: θ by Adam, φ by EMA after every step, ψ untouched.
fn ssl_loop(
    bundle: &mut ModelBundle,
    cfg: &SslConfig,
    n_items: usize,
    stage: Stage,
    mut make_batch: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<SslBatch>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if n_items < 2 {
        return Err(Error::BatchTooSmall);
    }
    let mut phi = bundle.theta.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = if n_items <= cfg.full_batch_max { n_items } else { cfg.batch_size };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        let mut n_batches = 0;
        for idx in batches(&order, size) {
            let batch = make_batch(idx, &mut rng)?;
            total += ssl_step(bundle, &phi, &mut adam, cfg, batch, &mut rng)?;
            n_batches += 1;
            phi.ema_update(&bundle.theta, cfg.lambda);
        }
        let loss = total / n_batches as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        let mut m = EpochMetrics::new(stage, epoch);
        m.ssl_loss = Some(loss);
        metrics.push(m);
    }
    bundle.phi = None;
    Ok(metrics)
}

fn crop_batch(items: &[&ChannelMatrix], len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ChannelMatrix>> {
    items.iter().map(|m| crop(m, len, Some(rng))).collect()
}

fn stack(items: &[ChannelMatrix]) -> Result<Tensor> {
    let refs: Vec<&ChannelMatrix> = items.iter().collect();
    batch_tensor(&refs)
}

fn prescreen_ssl_on(
    bundle: &mut ModelBundle,
    positives: &[&ChannelMatrix],
    negatives: &[&ChannelMatrix],
    cfg: &SslConfig,
    stage: Stage,
) -> Result<Vec<EpochMetrics>> {
    if positives.len() != negatives.len() {
        return Err(Error::Shape {
            op: "ssl_prescreen",
            detail: format!("{} positives, {} transitions", positives.len(), negatives.len()),
        });
    }
    let len = bundle.config.input_len;
    ssl_loop(bundle, cfg, positives.len(), stage, |idx, rng| {
        let pos: Vec<&ChannelMatrix> = idx.iter().map(|&i| positives[i]).collect();
        let neg: Vec<&ChannelMatrix> = idx.iter().map(|&i| negatives[i]).collect();
        let pos = stack(&crop_batch(&pos, len, rng)?)?;
        let neg = stack(&crop_batch(&neg, len, rng)?)?;
        Ok(SslBatch {
            online: pos.clone(),
            positive: pos,
            negative: Some(neg),
        })
    })
}

/// Prescreen refinement: pulls θ-embeddings of each trial towards the target
/// embedding of the same trial and away from the paired transition.
pub fn ssl_prescreen(
    bundle: &mut ModelBundle,
    binary_set: &TrialSet,
    transitions: &[TransitionTrial],
    cfg: &SslConfig,
) -> Result<Vec<EpochMetrics>> {
    let pos: Vec<&ChannelMatrix> = binary_set.trials.iter().map(|t| &t.samples).collect();
    let neg: Vec<&ChannelMatrix> = transitions.iter().map(|t| &t.samples).collect();
    prescreen_ssl_on(bundle, &pos, &neg, cfg, Stage::SslPrescreen)
}

fn classification_ssl_on(
    bundle: &mut ModelBundle,
    trials: &[&ChannelMatrix],
    cfg: &SslConfig,
    aug: &AugmentParams,
    stage: Stage,
) -> Result<Vec<EpochMetrics>> {
    let len = bundle.config.input_len;
    ssl_loop(bundle, cfg, trials.len(), stage, |idx, rng| {
        let mut first = Vec::with_capacity(idx.len());
        let mut second = Vec::with_capacity(idx.len());
        for &i in idx {
            let c = crop(trials[i], len, Some(rng))?;
            let pair = pick_two_distinct(&c, aug, rng.gen())?;
            first.push(pair.first);
            second.push(pair.second);
        }
        Ok(SslBatch {
            online: stack(&first)?,
            positive: stack(&second)?,
            negative: None,
        })
    })
}

/// Classification refinement on two distinct augmentations of each trial.
pub fn ssl_classification(
    bundle: &mut ModelBundle,
    multiclass_set: &TrialSet,
    cfg: &SslConfig,
    aug: &AugmentParams,
) -> Result<Vec<EpochMetrics>> {
    let trials: Vec<&ChannelMatrix> = multiclass_set.trials.iter().map(|t| &t.samples).collect();
    classification_ssl_on(bundle, &trials, cfg, aug, Stage::SslClassification)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub n_windows: usize,
    pub n_predicted_mi: usize,
    pub prescreen_adapted: bool,
    pub classifier_adapted: bool,
    pub warnings: Vec<String>,
    pub metrics: Vec<EpochMetrics>,
}

/// Self-supervised adaptation on unlabeled test windows: prescreen SSL on all
/// windows with transitions mixing predicted-rest and predicted-MI windows,
/// then classification SSL on the predicted-MI windows.
pub fn ssl_offline_adapt(
    prescreen: &mut ModelBundle,
    classifier: &mut ModelBundle,
    windows: &[ChannelMatrix],
    tau: f64,
    cfg: &SslConfig,
    aug: &AugmentParams,
) -> Result<AdaptReport> {
    let p_bar: Vec<f64> = prescreen.predict_windows(windows, 64)?.iter().map(|p| p[1]).collect();
    let mi: Vec<usize> = (0..windows.len()).filter(|&i| p_bar[i] >= tau).collect();
    let rest: Vec<usize> = (0..windows.len()).filter(|&i| p_bar[i] < tau).collect();
    let mut report = AdaptReport {
        n_windows: windows.len(),
        n_predicted_mi: mi.len(),
        prescreen_adapted: false,
        classifier_adapted: false,
        warnings: Vec::new(),
        metrics: Vec::new(),
    };
    if mi.is_empty() || rest.is_empty() {
        report.warnings.push(format!(
            "{} windows predicted MI and {} rest; prescreen adaptation skipped",
            mi.len(),
            rest.len()
        ));
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada9);
        let transitions = (0..windows.len())
            .map(|_| {
                let r = rest[rng.gen_range(0..rest.len())];
                let m = mi[rng.gen_range(0..mi.len())];
                midpoint(&windows[r], &windows[m])
            })
            .collect::<Result<Vec<_>>>()?;
        let pos: Vec<&ChannelMatrix> = windows.iter().collect();
        let neg: Vec<&ChannelMatrix> = transitions.iter().collect();
        let m = prescreen_ssl_on(prescreen, &pos, &neg, cfg, Stage::AdaptPrescreen)?;
        report.metrics.extend(m);
        report.prescreen_adapted = cfg.epochs > 0;
    }
    if mi.len() < 2 {
        report
            .warnings
            .push(format!("{} windows predicted MI; classifier adaptation skipped", mi.len()));
    } else {
        let subset: Vec<&ChannelMatrix> = mi.iter().map(|&i| &windows[i]).collect();
        let m = classification_ssl_on(classifier, &subset, cfg, aug, Stage::AdaptClassification)?;
        report.metrics.extend(m);
        report.classifier_adapted = cfg.epochs > 0;
    }
    Ok(report)
}

/// Unit-norm copy of each row, for scalar reference computations.
pub fn normalized_rows(data: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.len()];
    for (row, (src, dst)) in data.chunks_exact(dim).zip(out.chunks_exact_mut(dim)).enumerate() {
        let n = libm::sqrt(src.iter().map(|v| v * v).sum::<f64>());
        if n == 0.0 {
            return Err(Error::ZeroNorm { row });
        }
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::Trial;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn set(labels: &[u16], kind: TrialSetKind, fill: impl Fn(usize) -> f64) -> TrialSet {
        TrialSet {
            trials: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Trial {
                    samples: ChannelMatrix::from_vec(1, 4, vec![fill(i); 4]).unwrap(),
                    label,
                })
                .collect(),
            kind,
            class_names: vec!["class1".into(), "class2".into()],
        }
    }

    #[test]
    fn stratified_split_is_balanced_and_disjoint() {
        let labels: Vec<u16> = (0..100).map(|i| 1 + (i % 2) as u16).collect();
        let s = set(&labels, TrialSetKind::Multiclass, |i| i as f64);
        let (tr, va) = split_train_valid(&s, 0.4, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (60, 40));
        let ones = va.trials.iter().filter(|t| t.label == 1).count();
        assert!((19..=21).contains(&ones));
        let mut ids: Vec<i64> = tr.trials.iter().chain(&va.trials).map(|t| t.samples.row(0)[0] as i64).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        assert_eq!(split_train_valid(&s, 0.4, 7).unwrap(), (tr, va));
    }

    #[test]
    fn singleton_class_cannot_be_split() {
        let s = set(&[1, 1, 1, 2], TrialSetKind::Multiclass, |_| 0.0);
        assert_eq!(
            split_train_valid(&s, 0.4, 0),
            Err(Error::ClassTooSmall { label: 2, count: 1 })
        );
    }

    #[test]
    fn early_stopping_keeps_best_not_last() {
        let mut es = EarlyStopping::new(3);
        let seq = [(0.5, 1.0), (0.7, 0.9), (0.7, 0.8), (0.6, 0.7), (0.65, 0.6), (0.7, 0.85)];
        let mut stopped_at = None;
        for (e, &(acc, loss)) in seq.iter().enumerate() {
            es.observe(e + 1, acc, loss);
            if es.should_stop() {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(es.best_epoch(), Some(3));
        assert_eq!(es.best_accuracy(), Some(0.7));
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[4, 5, 6, 7, 8]);
        assert_eq!(batches(&order[..2], 16).len(), 1);
    }

    #[test]
    fn transition_of_ones_and_threes_is_twos() {
        let s = set(&[0, 1, 0, 1], TrialSetKind::Binary, |i| if i % 2 == 0 { 1.0 } else { 3.0 });
        let tr = make_transition_trials(&s, 4, 1).unwrap();
        assert_eq!(tr.len(), 4);
        for x in &tr {
            assert!(x.samples.as_slice().iter().all(|&v| v == 2.0));
            assert_eq!(s.trials[x.rest_index].label, REST);
            assert_eq!(s.trials[x.mi_index].label, MI);
        }
        let only_rest = set(&[0, 0], TrialSetKind::Binary, |_| 0.0);
        assert_eq!(make_transition_trials(&only_rest, 2, 1).unwrap_err(), Error::MissingClass(MI));
    }

    #[test]
    fn hand_evaluated_losses() {
        let theta = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let phi_hat = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let l = prescreen_ssl_loss(&theta, &theta, &phi_hat, 0.3, 2.0).unwrap();
        assert!((l - (0.3 * libm::exp(-0.5) - 1.0)).abs() < 1e-12);
        assert!((l + 0.81804).abs() < 1e-5);
        assert!((prescreen_ssl_loss(&theta, &theta, &theta, 0.3, 2.0).unwrap() + 0.7).abs() < 1e-15);

        let a = t(&[1, 2], &[1.0, 0.0]);
        let b = t(&[1, 2], &[0.0, 1.0]);
        assert!((classification_ssl_loss(&a, &b, 2.0).unwrap() + libm::exp(-0.25)).abs() < 1e-15);
        assert_eq!(classification_ssl_loss(&a, &a, 2.0).unwrap(), -1.0);
    }

    #[test]
    fn crop_bounds() {
        let m = ChannelMatrix::from_vec(1, 10, (0..10).map(f64::from).collect()).unwrap();
        assert_eq!(crop(&m, 4, None).unwrap().row(0), [3.0, 4.0, 5.0, 6.0]);
        assert!(crop(&m, 11, None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let c = crop(&m, 4, Some(&mut rng)).unwrap();
            assert_eq!(c.row(0)[3] - c.row(0)[0], 3.0);
        }
    }
}
