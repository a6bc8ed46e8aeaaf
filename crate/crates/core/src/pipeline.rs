//! End-to-end SWPC: preprocessing, trial extraction, training of both modules
//! under the ablation switches, optional offline adaptation, decoding and
//! scoring, plus the ablation grid and the window/threshold sweep.

use alloc::format;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::dsp::{sliding_windows, Preprocessing};
use crate::engine::{
    class_probabilities, decode_from_probabilities, decode_stream, prescreen_probabilities, DecisionRecord,
    StreamConfig,
};
use crate::error::{Error, Result};
use crate::eval::{score_stream, ScoreReport, SweepRow};
use crate::model::{ModelBundle, NetConfig};
use crate::recording::{
    extract_adjacent_rest, extract_mi_trials, ChannelMatrix, ContinuousRecording, TrialSet,
};
use crate::training::{
    make_transition_trials, split_train_valid, ssl_classification, ssl_offline_adapt, ssl_prescreen,
    train_supervised, AdaptReport, EpochMetrics, SslConfig, SupervisedConfig,
};

/// Component switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub ssl_prescreen: bool,
    pub ssl_classification: bool,
    pub averaging: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        ssl_prescreen: true,
        ssl_classification: true,
        averaging: true,
    };

    /// All eight switch combinations, from everything off to everything on.
    pub fn grid() -> [Ablation; 8] {
        core::array::from_fn(|i| Ablation {
            ssl_prescreen: i & 4 != 0,
            ssl_classification: i & 2 != 0,
            averaging: i & 1 != 0,
        })
    }
}

/// Architecture knobs; channel count, input length and class count come from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetParams {
    pub f1: usize,
    pub depth: usize,
    pub f2: usize,
    /// `None` selects half a second, clipped to half the window.
    pub temporal_kernel: Option<usize>,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
}

impl Default for NetParams {
    fn default() -> Self {
        let base = NetConfig::eegnet_lite(1, 128.0, 128, 2);
        Self {
            f1: base.f1,
            depth: base.depth,
            f2: base.f2,
            temporal_kernel: None,
            separable_kernel: base.separable_kernel,
            pool1: base.pool1,
            pool2: base.pool2,
            dropout: base.dropout,
        }
    }
}

impl NetParams {
    pub fn build(&self, n_channels: usize, fs: f64, input_len: usize, n_classes: usize) -> NetConfig {
        let base = NetConfig::eegnet_lite(n_channels, fs, input_len, n_classes);
        NetConfig {
            f1: self.f1,
            depth: self.depth,
            f2: self.f2,
            temporal_kernel: self.temporal_kernel.unwrap_or(base.temporal_kernel),
            separable_kernel: self.separable_kernel,
            pool1: self.pool1,
            pool2: self.pool2,
            dropout: self.dropout,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preprocessing: Preprocessing,
    /// Length of training trials cut from each event.
    pub trial_seconds: f64,
    pub stream: StreamConfig,
    pub net: NetParams,
    pub supervised: SupervisedConfig,
    pub ssl: SslConfig,
    pub augment: AugmentParams,
    pub ablation: Ablation,
    pub offline_adapt: bool,
    /// Every `adapt_stride`-th test window enters offline adaptation.
    pub adapt_stride: usize,
    /// Master seed; module seeds in `supervised` and `ssl` are derived from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocessing: Preprocessing::default(),
            trial_seconds: 3.0,
            stream: StreamConfig::default(),
            net: NetParams::default(),
            supervised: SupervisedConfig::default(),
            ssl: SslConfig::default(),
            augment: AugmentParams::default(),
            ablation: Ablation::FULL,
            offline_adapt: false,
            adapt_stride: 5,
            seed: 0,
        }
    }
}

fn derive_seed(master: u64, tag: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64()
}

const TAG_PRESCREEN: u64 = 1;
const TAG_CLASSIFIER: u64 = 2;

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.supervised.validate()?;
        self.ssl.validate()?;
        if !(self.trial_seconds >= self.stream.lw_seconds) {
            return Err(Error::InvalidConfig(format!(
                "trials of {} s cannot hold windows of {} s",
                self.trial_seconds, self.stream.lw_seconds
            )));
        }
        if self.adapt_stride == 0 {
            return Err(Error::InvalidConfig("adapt stride must be at least 1".into()));
        }
        Ok(())
    }

    fn module_seeds(&self, tag: u64) -> (u64, SupervisedConfig, SslConfig) {
        let base = derive_seed(self.seed, tag);
        let sup = SupervisedConfig {
            seed: derive_seed(base, 10),
            ..self.supervised.clone()
        };
        let ssl = SslConfig {
            seed: derive_seed(base, 20),
            ..self.ssl.clone()
        };
        (derive_seed(base, 30), sup, ssl)
    }
}

/// Preprocessed training trials of one or more recordings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub multiclass: TrialSet,
    pub binary: TrialSet,
    pub skipped_rest: usize,
    pub fs: f64,
    pub n_channels: usize,
}

/// Filters each recording and pools its MI trials and adjacent-rest pairs.
pub fn prepare_training(recs: &[ContinuousRecording], cfg: &PipelineConfig) -> Result<TrainingData> {
    let first = recs.first().ok_or(Error::Empty("training recordings"))?;
    let (fs, ch) = (first.fs, first.n_channels());
    let trial_len = libm::round(cfg.trial_seconds * fs) as usize;
    let mut multi = Vec::with_capacity(recs.len());
    let mut binary = Vec::with_capacity(recs.len());
    let mut skipped = 0;
    for rec in recs {
        if rec.fs != fs || rec.n_channels() != ch {
            return Err(Error::InvalidRecording(format!(
                "pooled recordings differ: {} ch at {} Hz vs {ch} ch at {fs} Hz",
                rec.n_channels(),
                rec.fs
            )));
        }
        let clean = cfg.preprocessing.apply(rec)?;
        multi.push(extract_mi_trials(&clean, trial_len)?);
        let rest = extract_adjacent_rest(&clean, trial_len)?;
        skipped += rest.skipped;
        binary.push(rest.set);
    }
    Ok(TrainingData {
        multiclass: TrialSet::concat(&multi)?,
        binary: TrialSet::concat(&binary)?,
        skipped_rest: skipped,
        fs,
        n_channels: ch,
    })
}

fn supervised_module(set: &TrialSet, n_classes: usize, data: &TrainingData, cfg: &PipelineConfig, tag: u64) -> Result<(ModelBundle, Vec<EpochMetrics>)> {
    let (init_seed, sup, _) = cfg.module_seeds(tag);
    let wl = cfg.stream.window_len(data.fs);
    let net = cfg.net.build(data.n_channels, data.fs, wl, n_classes);
    let mut bundle = ModelBundle::init(net, init_seed)?;
    let (train, valid) = split_train_valid(set, sup.valid_fraction, sup.seed)?;
    let report = train_supervised(&mut bundle, &train, &valid, &sup)?;
    Ok((bundle, report.metrics))
}

/// Supervised prescreen (rest vs MI) on the binary set.
pub fn train_prescreen(data: &TrainingData, cfg: &PipelineConfig) -> Result<(ModelBundle, Vec<EpochMetrics>)> {
    supervised_module(&data.binary, 2, data, cfg, TAG_PRESCREEN)
}

/// Supervised MI classifier on the multiclass set.
pub fn train_classifier(data: &TrainingData, cfg: &PipelineConfig) -> Result<(ModelBundle, Vec<EpochMetrics>)> {
    supervised_module(&data.multiclass, data.multiclass.n_classes(), data, cfg, TAG_CLASSIFIER)
}

/// Transition-contrast SSL of a trained prescreen.
pub fn refine_prescreen(bundle: &mut ModelBundle, data: &TrainingData, cfg: &PipelineConfig) -> Result<Vec<EpochMetrics>> {
    let (_, _, ssl) = cfg.module_seeds(TAG_PRESCREEN);
    let transitions = make_transition_trials(&data.binary, data.binary.len(), derive_seed(ssl.seed, 1))?;
    ssl_prescreen(bundle, &data.binary, &transitions, &ssl)
}

/// Augmentation-pair SSL of a trained classifier.
pub fn refine_classifier(bundle: &mut ModelBundle, data: &TrainingData, cfg: &PipelineConfig) -> Result<Vec<EpochMetrics>> {
    let (_, _, ssl) = cfg.module_seeds(TAG_CLASSIFIER);
    ssl_classification(bundle, &data.multiclass, &ssl, &cfg.augment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSwpc {
    pub prescreen: ModelBundle,
    pub classifier: ModelBundle,
    pub prescreen_log: Vec<EpochMetrics>,
    pub classifier_log: Vec<EpochMetrics>,
}

/// Trains both modules; SSL stages run per the ablation switches.
pub fn train_swpc(data: &TrainingData, cfg: &PipelineConfig) -> Result<TrainedSwpc> {
    cfg.validate()?;
    let (mut prescreen, mut prescreen_log) = train_prescreen(data, cfg)?;
    if cfg.ablation.ssl_prescreen {
        prescreen_log.extend(refine_prescreen(&mut prescreen, data, cfg)?);
    }
    let (mut classifier, mut classifier_log) = train_classifier(data, cfg)?;
    if cfg.ablation.ssl_classification {
        classifier_log.extend(refine_classifier(&mut classifier, data, cfg)?);
    }
    Ok(TrainedSwpc {
        prescreen,
        classifier,
        prescreen_log,
        classifier_log,
    })
}

/// Every `adapt_stride`-th window of a preprocessed recording.
pub fn adaptation_windows(rec: &ContinuousRecording, cfg: &PipelineConfig) -> Result<Vec<ChannelMatrix>> {
    let seq = sliding_windows(rec, cfg.stream.window_len(rec.fs), cfg.stream.step_samples)?;
    Ok((0..seq.len()).step_by(cfg.adapt_stride).map(|i| seq.window(i)).collect())
}

/// Offline SSL on the unlabeled, preprocessed test recording.
pub fn adapt_offline(trained: &mut TrainedSwpc, test: &ContinuousRecording, cfg: &PipelineConfig) -> Result<AdaptReport> {
    let windows = adaptation_windows(test, cfg)?;
    let ssl = SslConfig {
        seed: derive_seed(cfg.seed, 3),
        ..cfg.ssl.clone()
    };
    ssl_offline_adapt(
        &mut trained.prescreen,
        &mut trained.classifier,
        &windows,
        cfg.stream.tau,
        &ssl,
        &cfg.augment,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<DecisionRecord>,
    pub report: ScoreReport,
    pub adaptation: Option<AdaptReport>,
}

/// Preprocesses the raw test recording, adapts when configured, decodes the
/// stream and scores it against the recording's events.
pub fn evaluate_recording(trained: &mut TrainedSwpc, test: &ContinuousRecording, cfg: &PipelineConfig) -> Result<Evaluation> {
    let clean = cfg.preprocessing.apply(test)?;
    let adaptation = if cfg.offline_adapt {
        Some(adapt_offline(trained, &clean, cfg)?)
    } else {
        None
    };
    let records = decode_stream(
        &trained.prescreen,
        &trained.classifier,
        &clean,
        &cfg.stream,
        cfg.ablation.averaging,
    )?;
    let report = score_stream(&records, &test.events, cfg.stream.window_len(test.fs), cfg.stream.tau)?;
    Ok(Evaluation {
        records,
        report,
        adaptation,
    })
}

/// Prescreen and classifier outputs for every window of a preprocessed
/// recording, reusable across thresholds and averaging settings.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowProbabilities {
    pub window_len: usize,
    pub starts: Vec<usize>,
    pub p_bar: Vec<f64>,
    pub p: Vec<Option<Vec<f64>>>,
}

impl WindowProbabilities {
    pub fn compute(prescreen: &ModelBundle, classifier: &ModelBundle, rec: &ContinuousRecording, stream: &StreamConfig) -> Result<Self> {
        let wl = stream.window_len(rec.fs);
        let seq = sliding_windows(rec, wl, stream.step_samples)?;
        let p_bar = prescreen_probabilities(prescreen, &seq)?;
        let all: Vec<usize> = (0..seq.len()).collect();
        let p = class_probabilities(classifier, &seq, &all)?.into_iter().map(Some).collect();
        Ok(Self {
            window_len: wl,
            starts: seq.starts().collect(),
            p_bar,
            p,
        })
    }

    /// Same as [`Self::compute`] with `p_bar` taken from `other`.
    pub fn with_prescreen(&self, other: &WindowProbabilities) -> Self {
        Self {
            p_bar: other.p_bar.clone(),
            ..self.clone()
        }
    }

    pub fn decode(&self, tau: f64, averaging: bool) -> Result<Vec<DecisionRecord>> {
        decode_from_probabilities(&self.starts, &self.p_bar, &self.p, tau, averaging)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub acc: f64,
    pub prescreen_acc: f64,
    pub false_alarm_rate: f64,
}

/// All eight ablation rows for one train/test split. Supervised training runs
/// once per module; SSL refines copies.
pub fn run_ablation(data: &TrainingData, test: &ContinuousRecording, cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let clean = cfg.preprocessing.apply(test)?;
    let (pre_sup, _) = train_prescreen(data, cfg)?;
    let mut pre_ssl = pre_sup.clone();
    refine_prescreen(&mut pre_ssl, data, cfg)?;
    let (cls_sup, _) = train_classifier(data, cfg)?;
    let mut cls_ssl = cls_sup.clone();
    refine_classifier(&mut cls_ssl, data, cfg)?;

    let base = WindowProbabilities::compute(&pre_sup, &cls_sup, &clean, &cfg.stream)?;
    let refined = WindowProbabilities::compute(&pre_ssl, &cls_ssl, &clean, &cfg.stream)?;
    let mut rows = Vec::with_capacity(8);
    for ab in Ablation::grid() {
        let pre = if ab.ssl_prescreen { &refined } else { &base };
        let cls = if ab.ssl_classification { &refined } else { &base };
        let probs = cls.with_prescreen(pre);
        let records = probs.decode(cfg.stream.tau, ab.averaging)?;
        let r = score_stream(&records, &test.events, probs.window_len, cfg.stream.tau)?;
        rows.push(AblationRow {
            ablation: ab,
            acc: r.acc,
            prescreen_acc: r.prescreen_acc,
            false_alarm_rate: r.false_alarm_rate,
        });
    }
    Ok(rows)
}

/// Scores every (L_w, τ) grid point. Models are retrained per window length
/// since the network input shape follows L_w.
pub fn run_sweep(
    recs: &[ContinuousRecording],
    test: &ContinuousRecording,
    cfg: &PipelineConfig,
    lw_grid: &[f64],
    tau_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if lw_grid.is_empty() || tau_grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let clean = cfg.preprocessing.apply(test)?;
    let mut rows = Vec::with_capacity(lw_grid.len() * tau_grid.len());
    for &lw in lw_grid {
        let point = PipelineConfig {
            stream: StreamConfig {
                lw_seconds: lw,
                ..cfg.stream.clone()
            },
            ..cfg.clone()
        };
        let data = prepare_training(recs, &point)?;
        let trained = train_swpc(&data, &point)?;
        let probs = WindowProbabilities::compute(&trained.prescreen, &trained.classifier, &clean, &point.stream)?;
        for &tau in tau_grid {
            let stream = StreamConfig {
                tau,
                ..point.stream.clone()
            };
            stream.validate()?;
            let records = probs.decode(tau, cfg.ablation.averaging)?;
            let r = score_stream(&records, &test.events, probs.window_len, tau)?;
            rows.push(SweepRow::new(lw, tau, &r));
        }
    }
    Ok(rows)
}
