//! Synthetic MI recordings: a mu-band rhythm on every channel plus pink noise,
//! with class-specific channels losing mu amplitude during MI events.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::{extract_adjacent_rest, extract_mi_trials, ChannelMatrix, ContinuousRecording, Event, TrialSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_channels: usize,
    pub fs: f64,
    pub n_classes: usize,
    pub mu_freq: f64,
    pub mu_amplitude: f64,
    /// Coherence time of the mu rhythm; its phase diffuses so that channels
    /// hold no fixed phase relation.
    pub mu_coherence_seconds: f64,
    /// Fractional mu amplitude suppression during MI.
    pub erd_depth: f64,
    /// Channels desynchronizing for class `k` at position `k − 1`. Empty means
    /// class `k` uses channel `(k − 1) mod n_channels`.
    pub erd_channels: Vec<Vec<usize>>,
    pub noise_amplitude: f64,
    pub trial_seconds: f64,
    /// Inclusive range of rest gaps before each event, and after the last.
    pub rest_seconds: (f64, f64),
    pub n_events: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_channels: 4,
            fs: 128.0,
            n_classes: 2,
            mu_freq: 11.0,
            mu_amplitude: 10.0,
            mu_coherence_seconds: 0.5,
            erd_depth: 0.6,
            erd_channels: Vec::new(),
            noise_amplitude: 5.0,
            trial_seconds: 3.0,
            rest_seconds: (3.0, 5.0),
            n_events: 40,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidSynth(m));
        if !(0.0..1.0).contains(&self.erd_depth) {
            return bad(format!("erd depth {} outside [0, 1)", self.erd_depth));
        }
        if !(self.fs > 0.0) || !(self.mu_freq > 0.0 && self.mu_freq < self.fs / 2.0) {
            return bad(format!("mu frequency {} must lie in (0, fs/2 = {})", self.mu_freq, self.fs / 2.0));
        }
        if !(self.mu_coherence_seconds > 0.0) {
            return bad(format!("mu coherence {} s must be positive", self.mu_coherence_seconds));
        }
        if self.n_channels == 0 || self.n_classes == 0 || self.n_events == 0 {
            return bad("channels, classes and events must be positive".into());
        }
        let (lo, hi) = self.rest_seconds;
        if !(lo >= 0.0 && hi >= lo) || !(self.trial_seconds > 0.0) {
            return bad(format!("invalid durations: trial {} s, rest {lo}..{hi} s", self.trial_seconds));
        }
        if !self.erd_channels.is_empty() && self.erd_channels.len() != self.n_classes {
            return bad(format!("{} ERD maps for {} classes", self.erd_channels.len(), self.n_classes));
        }
        if self.erd_channels.iter().flatten().any(|&c| c >= self.n_channels) {
            return bad("ERD channel index out of range".into());
        }
        Ok(())
    }

    pub fn trial_len(&self) -> usize {
        libm::round(self.trial_seconds * self.fs) as usize
    }

    /// Channels suppressed for class code `label` (1-based).
    pub fn erd_map(&self, label: u16) -> Vec<usize> {
        let k = label as usize - 1;
        match self.erd_channels.get(k) {
            Some(chs) => chs.clone(),
            None => vec![k % self.n_channels],
        }
    }
}

/// Voss-McCartney pink noise, unit variance on average.
pub fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const ROWS: usize = 16;
    let mut rows = [0.0f64; ROWS];
    for r in rows.iter_mut() {
        *r = rng.gen_range(-1.0..1.0);
    }
    let mut running: f64 = rows.iter().sum();
    let norm = libm::sqrt((ROWS + 1) as f64 / 3.0);
    (0..n)
        .map(|i| {
            if i > 0 {
                let k = (i.trailing_zeros() as usize).min(ROWS - 1);
                let v = rng.gen_range(-1.0..1.0);
                running += v - rows[k];
                rows[k] = v;
            }
            (running + rng.gen_range(-1.0..1.0)) / norm
        })
        .collect()
}

/// A recording with `n_events` class-balanced MI events in shuffled order,
/// each preceded by a rest gap drawn from `rest_seconds`.
pub fn synth_recording(spec: &SynthSpec) -> Result<ContinuousRecording> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fs = spec.fs;
    let trial_len = spec.trial_len();
    if trial_len == 0 {
        return Err(Error::InvalidSynth("trial shorter than one sample".into()));
    }
    let mut labels: Vec<u16> = (0..spec.n_events).map(|i| (i % spec.n_classes) as u16 + 1).collect();
    labels.shuffle(&mut rng);

    let (lo, hi) = spec.rest_seconds;
    let gap = |rng: &mut ChaCha8Rng| libm::round(rng.gen_range(lo..=hi) * fs) as usize;
    let mut events = Vec::with_capacity(spec.n_events);
    let mut t = 0usize;
    for &label in &labels {
        t += gap(&mut rng);
        events.push(Event {
            onset: t,
            duration: trial_len,
            label,
        });
        t += trial_len;
    }
    let n_samples = t + gap(&mut rng);

    // Phase random walk with uniform steps: variance per sample 2 / coherence.
    let step = libm::sqrt(3.0 * 2.0 / (spec.mu_coherence_seconds * fs));
    let mut gain = vec![1.0; spec.n_channels * n_samples];
    for ev in &events {
        for c in spec.erd_map(ev.label) {
            gain[c * n_samples + ev.onset..c * n_samples + ev.end()]
                .iter_mut()
                .for_each(|g| *g = 1.0 - spec.erd_depth);
        }
    }
    let omega = core::f64::consts::TAU * spec.mu_freq / fs;
    let mut data = Vec::with_capacity(spec.n_channels * n_samples);
    for c in 0..spec.n_channels {
        let mut phase = rng.gen_range(0.0..core::f64::consts::TAU);
        let noise = pink_noise(n_samples, &mut rng);
        for (i, n) in noise.iter().enumerate() {
            phase += omega + rng.gen_range(-step..step);
            data.push(spec.mu_amplitude * gain[c * n_samples + i] * libm::sin(phase) + spec.noise_amplitude * n);
        }
    }
    ContinuousRecording::new(fs, ChannelMatrix::from_vec(spec.n_channels, n_samples, data)?, events)
}

/// Multiclass and binary training sets drawn from one synthetic recording
/// with `n_per_class × n_classes` events.
pub fn synth_dataset(spec: &SynthSpec, n_per_class: usize) -> Result<(TrialSet, TrialSet)> {
    let spec = SynthSpec {
        n_events: n_per_class * spec.n_classes,
        ..spec.clone()
    };
    let rec = synth_recording(&spec)?;
    let multi = extract_mi_trials(&rec, spec.trial_len())?;
    let binary = extract_adjacent_rest(&rec, spec.trial_len())?;
    Ok((multi, binary.set))
}
