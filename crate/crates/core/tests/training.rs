mod common;

use swpc_core::augment::AugmentParams;
use swpc_core::datagen::{synth_dataset, synth_recording, SynthSpec};
use swpc_core::model::{ModelBundle, NetConfig};
use swpc_core::pipeline::{evaluate_recording, prepare_training, train_swpc, PipelineConfig};
use swpc_core::recording::{ChannelMatrix, TrialSet};
use swpc_core::training::{
    classification_ssl_loss, evaluate, make_transition_trials, prescreen_ssl_loss, split_train_valid,
    ssl_classification, ssl_offline_adapt, ssl_prescreen, train_supervised, SslConfig, Stage, SupervisedConfig,
};
use swpc_core::autodiff::Tensor;

fn easy_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_channels: 2,
        erd_depth: 0.9,
        noise_amplitude: 2.0,
        seed,
        ..SynthSpec::default()
    }
}

fn net_for(set: &TrialSet, fs: f64, k: usize) -> NetConfig {
    NetConfig::eegnet_lite(set.trials[0].samples.n_channels(), fs, fs as usize, k)
}

#[test]
fn separable_classes_learned_within_fifty_epochs() {
    let (multi, _) = synth_dataset(&easy_spec(1), 30).unwrap();
    let (train, valid) = split_train_valid(&multi, 0.4, 3).unwrap();
    let mut bundle = ModelBundle::init(net_for(&multi, 128.0, 2), 4).unwrap();
    let cfg = SupervisedConfig {
        max_epochs: 50,
        retrain_full: false,
        ..SupervisedConfig::default()
    };
    let report = train_supervised(&mut bundle, &train, &valid, &cfg).unwrap();
    assert!(report.best_valid_acc >= 0.95, "{report:?}");
    // The bundle holds the best-validation weights.
    let (acc, _) = evaluate(&bundle, &valid).unwrap();
    assert_eq!(acc, report.best_valid_acc);
}

#[test]
fn first_epoch_loss_is_near_uniform_baseline() {
    for k in [2usize, 3] {
        let spec = SynthSpec {
            n_classes: k,
            ..easy_spec(2)
        };
        let (multi, _) = synth_dataset(&spec, 10).unwrap();
        let (train, valid) = split_train_valid(&multi, 0.4, 1).unwrap();
        let mut bundle = ModelBundle::init(net_for(&multi, 128.0, k), 9).unwrap();
        let cfg = SupervisedConfig {
            max_epochs: 1,
            retrain_full: false,
            ..SupervisedConfig::default()
        };
        let report = train_supervised(&mut bundle, &train, &valid, &cfg).unwrap();
        let loss = report.metrics[0].train_loss.unwrap();
        assert!((loss - (k as f64).ln()).abs() <= 0.2, "K = {k}: {loss}");
    }
}

fn ssl_cfg(epochs: usize) -> SslConfig {
    SslConfig {
        epochs,
        ..SslConfig::default()
    }
}

#[test]
fn ssl_leaves_head_and_running_stats_alone() {
    let (multi, binary) = synth_dataset(&easy_spec(4), 6).unwrap();
    let transitions = make_transition_trials(&binary, binary.len(), 1).unwrap();
    let mut pre = ModelBundle::init(net_for(&binary, 128.0, 2), 1).unwrap();
    let before = pre.clone();
    let log = ssl_prescreen(&mut pre, &binary, &transitions, &ssl_cfg(3)).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|m| m.stage == Stage::SslPrescreen && m.ssl_loss.is_some()));
    assert_eq!(pre.psi, before.psi);
    assert!(pre.phi.is_none());
    assert_eq!(pre.theta.buffers(), before.theta.buffers());
    assert_ne!(pre.theta.params(), before.theta.params());

    let mut cls = ModelBundle::init(net_for(&multi, 128.0, 2), 2).unwrap();
    let before = cls.clone();
    ssl_classification(&mut cls, &multi, &ssl_cfg(2), &AugmentParams::default()).unwrap();
    assert_eq!(cls.psi, before.psi);
    assert_eq!(cls.theta.buffers(), before.theta.buffers());
    assert!(cls.phi.is_none());
}

#[test]
fn prescreen_ssl_without_negatives_reduces_its_loss() {
    let (_, binary) = synth_dataset(&easy_spec(5), 8).unwrap();
    let transitions = make_transition_trials(&binary, binary.len(), 2).unwrap();
    let mut pre = ModelBundle::init(net_for(&binary, 128.0, 2), 3).unwrap();
    let cfg = SslConfig {
        delta: 0.0,
        lr: 1e-3,
        epochs: 30,
        ..SslConfig::default()
    };
    let log = ssl_prescreen(&mut pre, &binary, &transitions, &cfg).unwrap();
    let loss = |range: std::ops::Range<usize>| {
        log[range.clone()].iter().map(|m| m.ssl_loss.unwrap()).sum::<f64>() / range.len() as f64
    };
    assert!(loss(25..30) < loss(0..5), "{:?}", log.iter().map(|m| m.ssl_loss).collect::<Vec<_>>());
}

#[test]
fn ssl_loss_hand_cases() {
    let t = |v: &[f64], b: usize| Tensor::new(&[b, v.len() / b], v.to_vec()).unwrap();
    let theta = t(&[1.0, 0.0, 0.0, 1.0], 2);
    let swapped = t(&[0.0, 1.0, 1.0, 0.0], 2);
    let l = prescreen_ssl_loss(&theta, &theta, &swapped, 0.3, 2.0).unwrap();
    assert!((l - (0.3 * (-0.5f64).exp() - 1.0)).abs() < 1e-12);
    assert!((l + 0.81804).abs() < 1e-5);
    let same = prescreen_ssl_loss(&theta, &theta, &theta, 0.3, 2.0).unwrap();
    assert!((same + 0.7).abs() < 1e-12);

    let a = t(&[1.0, 0.0], 1);
    let b = t(&[0.0, 1.0], 1);
    let l = classification_ssl_loss(&a, &b, 2.0).unwrap();
    assert!((l + (-0.25f64).exp()).abs() < 1e-12);
    assert_eq!(classification_ssl_loss(&a, &a, 2.0).unwrap(), -1.0);
}

#[test]
fn classification_ssl_loss_lies_in_range() {
    let mut r = common::rng(21);
    for _ in 0..200 {
        let a = common::random_tensor(&mut r, &[3, 5], 1.0);
        let b = common::random_tensor(&mut r, &[3, 5], 1.0);
        let l = classification_ssl_loss(&a, &b, 2.0).unwrap();
        assert!((-1.0..0.0).contains(&l), "{l}");
    }
}

fn stream_windows(seed: u64, n: usize) -> Vec<ChannelMatrix> {
    let rec = synth_recording(&SynthSpec {
        n_events: 6,
        ..easy_spec(seed)
    })
    .unwrap();
    (0..n).map(|i| rec.samples.columns(i * 40, 128)).collect()
}

#[test]
fn zero_epoch_adaptation_is_a_no_op() {
    let windows = stream_windows(6, 30);
    let mut pre = ModelBundle::init(NetConfig::eegnet_lite(2, 128.0, 128, 2), 1).unwrap();
    let mut cls = ModelBundle::init(NetConfig::eegnet_lite(2, 128.0, 128, 2), 2).unwrap();
    let (p0, c0) = (pre.clone(), cls.clone());
    let report = ssl_offline_adapt(&mut pre, &mut cls, &windows, 0.5, &ssl_cfg(0), &AugmentParams::default()).unwrap();
    assert_eq!((pre, cls), (p0, c0));
    assert!(!report.prescreen_adapted && !report.classifier_adapted);
}

#[test]
fn adaptation_without_predicted_mi_warns() {
    let windows = stream_windows(7, 10);
    let mut pre = ModelBundle::init(NetConfig::eegnet_lite(2, 128.0, 128, 2), 1).unwrap();
    let mut cls = ModelBundle::init(NetConfig::eegnet_lite(2, 128.0, 128, 2), 2).unwrap();
    let c0 = cls.clone();
    // A gate above 1 rejects every window.
    let report = ssl_offline_adapt(&mut pre, &mut cls, &windows, 1.5, &ssl_cfg(2), &AugmentParams::default()).unwrap();
    assert_eq!(report.n_predicted_mi, 0);
    assert_eq!(report.warnings.len(), 2);
    assert!(!report.prescreen_adapted && !report.classifier_adapted);
    assert_eq!(cls, c0);
}

#[test]
fn offline_adaptation_does_not_hurt() {
    let (mut online, mut offline) = (0.0, 0.0);
    for seed in 0..5 {
        let spec = easy_spec(seed);
        let train = synth_recording(&spec).unwrap();
        let test = synth_recording(&SynthSpec { seed: seed + 500, n_events: 10, ..spec }).unwrap();
        let mut cfg = PipelineConfig { seed, ..PipelineConfig::default() };
        cfg.supervised.max_epochs = 30;
        let data = prepare_training(&[train], &cfg).unwrap();
        let trained = train_swpc(&data, &cfg).unwrap();
        online += evaluate_recording(&mut trained.clone(), &test, &cfg).unwrap().report.acc;
        cfg.offline_adapt = true;
        let ev = evaluate_recording(&mut trained.clone(), &test, &cfg).unwrap();
        assert!(ev.adaptation.is_some());
        offline += ev.report.acc;
    }
    assert!(offline / 5.0 >= online / 5.0 - 0.01, "offline {offline} online {online}");
}
