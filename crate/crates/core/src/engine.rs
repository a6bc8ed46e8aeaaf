//! Sliding-window decoder: prescreen gating, classification of gated windows
//! and running-average smoothing within each gated run.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsp::{sliding_windows, window_samples, WindowSequence};
use crate::error::{Error, Result};
use crate::model::{argmax, batch_tensor, ModelBundle};
use crate::recording::{ChannelMatrix, ContinuousRecording, REST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub lw_seconds: f64,
    pub step_samples: usize,
    pub tau: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            lw_seconds: 1.0,
            step_samples: 10,
            tau: 0.2,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.lw_seconds > 0.0) || self.step_samples == 0 {
            return Err(Error::InvalidConfig("window length and step must be positive".into()));
        }
        Ok(())
    }

    pub fn window_len(&self, fs: f64) -> usize {
        window_samples(self.lw_seconds, fs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    #[serde(rename = "i")]
    pub index: usize,
    pub start_sample: usize,
    /// Prescreen probability of MI.
    pub p_bar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<Vec<f64>>,
    /// MI class code, or `REST` when gated out.
    pub label: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_start: Option<usize>,
}

impl DecisionRecord {
    pub fn is_gated(&self) -> bool {
        self.p_hat.is_some()
    }
}

/// Elementwise mean of a non-empty run of probability vectors.
pub fn running_average(run: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = run.first().ok_or(Error::Empty("probability run"))?;
    let mut sum = alloc::vec![0.0; first.len()];
    for p in run {
        if p.len() != sum.len() {
            return Err(Error::Shape {
                op: "running_average",
                detail: format!("{} vs {} classes", p.len(), sum.len()),
            });
        }
        sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let n = run.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Per-window state machine; keeps a running sum and count for the current
/// gated run.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamDecoder {
    tau: f64,
    averaging: bool,
    run_start: Option<usize>,
    sum: Vec<f64>,
    count: usize,
}

impl StreamDecoder {
    pub fn new(tau: f64, averaging: bool) -> Self {
        Self {
            tau,
            averaging,
            run_start: None,
            sum: Vec::new(),
            count: 0,
        }
    }

    pub fn run_start(&self) -> Option<usize> {
        self.run_start
    }

    /// Consumes window `index`. `classify` is called only when `p_bar`
    /// passes the gate.
    pub fn step(
        &mut self,
        index: usize,
        start_sample: usize,
        p_bar: f64,
        classify: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<DecisionRecord> {
        if p_bar < self.tau {
            self.run_start = None;
            self.count = 0;
            return Ok(DecisionRecord {
                index,
                start_sample,
                p_bar,
                p: None,
                p_hat: None,
                label: REST,
                run_start: None,
            });
        }
        let p = classify()?;
        if self.run_start.is_none() {
            self.run_start = Some(index);
            self.sum = alloc::vec![0.0; p.len()];
            self.count = 0;
        }
        if p.len() != self.sum.len() {
            return Err(Error::Shape {
                op: "stream_decoder",
                detail: format!("{} vs {} classes", p.len(), self.sum.len()),
            });
        }
        self.sum.iter_mut().zip(&p).for_each(|(s, v)| *s += v);
        self.count += 1;
        let p_hat = if self.averaging {
            let n = self.count as f64;
            self.sum.iter().map(|s| s / n).collect()
        } else {
            p.clone()
        };
        let label = argmax(&p_hat) as u16 + 1;
        Ok(DecisionRecord {
            index,
            start_sample,
            p_bar,
            p: Some(p),
            p_hat: Some(p_hat),
            label,
            run_start: self.run_start,
        })
    }
}

fn check_model(bundle: &ModelBundle, rec: &ContinuousRecording, window_len: usize, what: &str) -> Result<()> {
    let c = &bundle.config;
    if c.input_len != window_len || c.n_channels != rec.n_channels() {
        return Err(Error::Shape {
            op: "decode_stream",
            detail: format!(
                "{what} expects {}x{}, stream windows are {}x{}",
                c.n_channels,
                c.input_len,
                rec.n_channels(),
                window_len
            ),
        });
    }
    Ok(())
}

const CHUNK: usize = 64;

fn predict(bundle: &ModelBundle, windows: &[ChannelMatrix]) -> Result<Vec<Vec<f64>>> {
    bundle.predict_windows(windows, CHUNK)
}

/// Prescreen MI probability of every window, in order.
pub fn prescreen_probabilities(prescreen: &ModelBundle, seq: &WindowSequence<'_>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        let end = (i + CHUNK).min(seq.len());
        let windows: Vec<ChannelMatrix> = (i..end).map(|j| seq.window(j)).collect();
        out.extend(predict(prescreen, &windows)?.into_iter().map(|p| p[1]));
        i = end;
    }
    Ok(out)
}

/// Classifier probabilities of the windows at `indices`.
pub fn class_probabilities(classifier: &ModelBundle, seq: &WindowSequence<'_>, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for part in indices.chunks(CHUNK) {
        let windows: Vec<ChannelMatrix> = part.iter().map(|&j| seq.window(j)).collect();
        out.extend(predict(classifier, &windows)?);
    }
    Ok(out)
}

/// Runs the decoder over precomputed probabilities. `p[i]` is consulted only
/// for gated windows and may be `None` elsewhere.
pub fn decode_from_probabilities(
    starts: &[usize],
    p_bar: &[f64],
    p: &[Option<Vec<f64>>],
    tau: f64,
    averaging: bool,
) -> Result<Vec<DecisionRecord>> {
    if starts.len() != p_bar.len() || p.len() != p_bar.len() {
        return Err(Error::Shape {
            op: "decode_from_probabilities",
            detail: format!("{} starts, {} p_bar, {} p", starts.len(), p_bar.len(), p.len()),
        });
    }
    let mut dec = StreamDecoder::new(tau, averaging);
    (0..p_bar.len())
        .map(|i| {
            dec.step(i, starts[i], p_bar[i], || {
                p[i].clone().ok_or(Error::InvalidStream(format!("window {i} gated without class probabilities")))
            })
        })
        .collect()
}

/// Decodes a (preprocessed) recording. The prescreen runs batched over all
/// windows; the classifier only over windows passing the gate. With
/// `averaging` off each gated window reports its own probabilities.
pub fn decode_stream(
    prescreen: &ModelBundle,
    classifier: &ModelBundle,
    rec: &ContinuousRecording,
    cfg: &StreamConfig,
    averaging: bool,
) -> Result<Vec<DecisionRecord>> {
    cfg.validate()?;
    let wl = cfg.window_len(rec.fs);
    check_model(prescreen, rec, wl, "prescreen")?;
    check_model(classifier, rec, wl, "classifier")?;
    let seq = sliding_windows(rec, wl, cfg.step_samples)?;
    let p_bar = prescreen_probabilities(prescreen, &seq)?;
    let gated: Vec<usize> = (0..p_bar.len()).filter(|&i| p_bar[i] >= cfg.tau).collect();
    let probs = class_probabilities(classifier, &seq, &gated)?;
    let mut p = alloc::vec![None; p_bar.len()];
    for (i, v) in gated.into_iter().zip(probs) {
        p[i] = Some(v);
    }
    let starts: Vec<usize> = seq.starts().collect();
    decode_from_probabilities(&starts, &p_bar, &p, cfg.tau, averaging)
}

/// Window-at-a-time decoding with one model call per window; the reference
/// for streaming equivalence.
pub fn decode_stream_online(
    prescreen: &ModelBundle,
    classifier: &ModelBundle,
    rec: &ContinuousRecording,
    cfg: &StreamConfig,
    averaging: bool,
) -> Result<Vec<DecisionRecord>> {
    cfg.validate()?;
    let wl = cfg.window_len(rec.fs);
    check_model(prescreen, rec, wl, "prescreen")?;
    check_model(classifier, rec, wl, "classifier")?;
    let seq = sliding_windows(rec, wl, cfg.step_samples)?;
    let mut dec = StreamDecoder::new(cfg.tau, averaging);
    let mut out = Vec::with_capacity(seq.len());
    for (i, (start, w)) in seq.iter().enumerate() {
        let p_bar = prescreen.predict_proba(batch_tensor(&[&w])?)?.data()[1];
        out.push(dec.step(i, start, p_bar, || {
            Ok(classifier.predict_proba(batch_tensor(&[&w])?)?.into_data())
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn run(p_bar: &[f64], p: &[Vec<f64>], tau: f64, averaging: bool) -> Vec<DecisionRecord> {
        let starts: Vec<usize> = (0..p_bar.len()).map(|i| i * 10).collect();
        let p: Vec<Option<Vec<f64>>> = p.iter().cloned().map(Some).collect();
        decode_from_probabilities(&starts, p_bar, &p, tau, averaging).unwrap()
    }

    #[test]
    fn gating_and_run_mean() {
        let p = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]];
        let r = run(&[0.1, 0.3, 0.3, 0.1], &p, 0.2, true);
        let labels: Vec<u16> = r.iter().map(|d| d.label).collect();
        assert_eq!(labels, [REST, 2, 2, REST]);
        assert_eq!(r[1].p_hat.as_deref(), Some(&[0.2, 0.8][..]));
        let hat = r[2].p_hat.as_ref().unwrap();
        assert!((hat[0] - 0.4).abs() < 1e-15 && (hat[1] - 0.6).abs() < 1e-15);
        assert_eq!(r[2].run_start, Some(1));
        assert_eq!(r[3].run_start, None);
        assert!(r[0].p.is_none() && r[0].p_hat.is_none());
    }

    #[test]
    fn gate_is_inclusive() {
        let r = run(&[0.2], &[vec![0.3, 0.7]], 0.2, true);
        assert!(r[0].is_gated());
    }

    #[test]
    fn scalar_run_mean() {
        let p: Vec<Vec<f64>> = [0.2, 0.4, 0.6].iter().map(|&q| vec![1.0 - q, q]).collect();
        let r = run(&[0.9; 3], &p, 0.2, true);
        assert!((r[2].p_hat.as_ref().unwrap()[1] - 0.4).abs() < 1e-15);
        let r = run(&[0.9; 3], &p, 0.2, false);
        assert_eq!(r[2].p_hat, r[2].p);
    }

    #[test]
    fn running_average_examples() {
        assert_eq!(running_average(&[vec![0.3, 0.7]]).unwrap(), [0.3, 0.7]);
        let m = running_average(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-15 && (m[1] - 0.3).abs() < 1e-15);
        let v = vec![0.25, 0.5, 0.25];
        assert_eq!(running_average(&[v.clone(), v.clone(), v.clone()]).unwrap(), v);
        assert_eq!(running_average(&[]), Err(Error::Empty("probability run")));
    }

    #[test]
    fn run_restarts_after_gap() {
        let p = vec![vec![0.5, 0.5]; 5];
        let r = run(&[0.5, 0.5, 0.0, 0.5, 0.5], &p, 0.2, true);
        let starts: Vec<Option<usize>> = r.iter().map(|d| d.run_start).collect();
        assert_eq!(starts, [Some(0), Some(0), None, Some(3), Some(3)]);
    }

    #[test]
    fn missing_gated_probabilities_is_an_error() {
        let e = decode_from_probabilities(&[0], &[0.9], &[None], 0.2, true);
        assert!(matches!(e, Err(Error::InvalidStream(_))));
    }
}
