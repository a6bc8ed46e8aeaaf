//! Continuous recordings, labelled trials, and the extraction of training
//! trials (MI epochs and the rest epochs that precede them) from a recording.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label code reserved for the resting state in every dataset.
pub const REST: u16 = 0;
/// Label code of the MI class in a binary (MI vs rest) trial set.
pub const MI: u16 = 1;

/// Dense channel-major matrix `[n_channels × n_samples]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    n_channels: usize,
    n_samples: usize,
    data: Vec<f64>,
}

impl ChannelMatrix {
    pub fn zeros(n_channels: usize, n_samples: usize) -> Self {
        Self {
            n_channels,
            n_samples,
            data: vec![0.0; n_channels * n_samples],
        }
    }

    pub fn from_vec(n_channels: usize, n_samples: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_channels * n_samples {
            return Err(Error::Shape {
                op: "ChannelMatrix::from_vec",
                detail: format!(
                    "{} values for {n_channels}x{n_samples}",
                    data.len()
                ),
            });
        }
        Ok(Self {
            n_channels,
            n_samples,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(Error::Shape {
                op: "ChannelMatrix::from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            n_channels: rows.len(),
            n_samples,
            data,
        })
    }

    #[inline]
    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    #[inline]
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_samples.max(1)).take(self.n_channels)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies the columns `[start, start + len)`.
    pub fn columns(&self, start: usize, len: usize) -> ChannelMatrix {
        assert!(start + len <= self.n_samples, "column range out of bounds");
        let mut data = Vec::with_capacity(self.n_channels * len);
        for row in self.rows() {
            data.extend_from_slice(&row[start..start + len]);
        }
        ChannelMatrix {
            n_channels: self.n_channels,
            n_samples: len,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A ground-truth event in a continuous recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub onset: usize,
    pub duration: usize,
    pub label: u16,
}

impl Event {
    #[inline]
    pub fn end(&self) -> usize {
        self.onset + self.duration
    }

    /// True when `[start, start + len)` lies entirely inside the event.
    #[inline]
    pub fn contains_span(&self, start: usize, len: usize) -> bool {
        start >= self.onset && start + len <= self.end()
    }

    #[inline]
    pub fn intersects_span(&self, start: usize, len: usize) -> bool {
        start < self.end() && self.onset < start + len
    }
}

/// A long multichannel stream and its event table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousRecording {
    pub fs: f64,
    pub samples: ChannelMatrix,
    pub events: Vec<Event>,
}

impl ContinuousRecording {
    pub fn new(fs: f64, samples: ChannelMatrix, events: Vec<Event>) -> Result<Self> {
        let rec = Self {
            fs,
            samples,
            events,
        };
        rec.validate()?;
        Ok(rec)
    }

    #[inline]
    pub fn n_channels(&self) -> usize {
        self.samples.n_channels()
    }

    #[inline]
    pub fn n_samples(&self) -> usize {
        self.samples.n_samples()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRecording(msg));
        if self.n_samples() == 0 {
            return bad("recording has no samples".into());
        }
        if self.n_channels() == 0 {
            return bad("recording has no channels".into());
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return bad(format!("sampling rate {} is not positive", self.fs));
        }
        let mut prev_end = 0usize;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.duration == 0 {
                return bad(format!("event {i} has zero duration"));
            }
            if ev.end() > self.n_samples() {
                return bad(format!(
                    "event {i} ends at {} past the recording length {}",
                    ev.end(),
                    self.n_samples()
                ));
            }
            if i > 0 && ev.onset < prev_end {
                return bad(format!("event {i} overlaps or precedes its predecessor"));
            }
            prev_end = ev.end();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub samples: ChannelMatrix,
    pub label: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialSetKind {
    /// MI trials labelled with their task code (1..=K).
    Multiclass,
    /// MI trials (label 1) and rest trials (label 0) in equal numbers.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub kind: TrialSetKind,
    pub class_names: Vec<String>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<u16> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Number of classes the head must distinguish.
    pub fn n_classes(&self) -> usize {
        match self.kind {
            TrialSetKind::Binary => 2,
            TrialSetKind::Multiclass => self.class_names.len(),
        }
    }

    /// Zero-based class index of `label` for this set's head.
    pub fn class_index(&self, label: u16) -> usize {
        match self.kind {
            TrialSetKind::Binary => label as usize,
            TrialSetKind::Multiclass => label as usize - 1,
        }
    }

    /// Concatenates sets of the same kind (cross-subject pooling).
    pub fn concat(sets: &[TrialSet]) -> Result<TrialSet> {
        let first = sets.first().ok_or(Error::Empty("trial sets"))?;
        if sets.iter().any(|s| s.kind != first.kind) {
            return Err(Error::Shape {
                op: "TrialSet::concat",
                detail: "mixed set kinds".into(),
            });
        }
        let class_names = sets
            .iter()
            .max_by_key(|s| s.class_names.len())
            .map(|s| s.class_names.clone())
            .unwrap_or_default();
        Ok(TrialSet {
            trials: sets.iter().flat_map(|s| s.trials.iter().cloned()).collect(),
            kind: first.kind,
            class_names,
        })
    }
}

fn default_class_names(k: usize) -> Vec<String> {
    (1..=k).map(|c| format!("class{c}")).collect()
}

/// One trial per event, `[onset, onset + trial_len)`, in event order.
pub fn extract_mi_trials(rec: &ContinuousRecording, trial_len: usize) -> Result<TrialSet> {
    let mut trials = Vec::with_capacity(rec.events.len());
    for (index, ev) in rec.events.iter().enumerate() {
        if ev.duration < trial_len {
            return Err(Error::EventTooShort {
                index,
                duration: ev.duration,
                trial_len,
            });
        }
        trials.push(Trial {
            samples: rec.samples.columns(ev.onset, trial_len),
            label: ev.label,
        });
    }
    let k = rec.events.iter().map(|e| e.label).max().unwrap_or(0) as usize;
    Ok(TrialSet {
        trials,
        kind: TrialSetKind::Multiclass,
        class_names: default_class_names(k),
    })
}

/// Binary trial set plus the number of events dropped for lack of a clean
/// rest interval before them.
#[derive(Debug, Clone, PartialEq)]
pub struct RestExtraction {
    pub set: TrialSet,
    pub skipped: usize,
}

/// Pairs every MI event with the rest window `[onset - trial_len, onset)`
/// immediately preceding it. Events whose preceding window is cut by the
/// stream start or by the previous event are skipped together with their MI
/// trial so the classes stay balanced.
pub fn extract_adjacent_rest(rec: &ContinuousRecording, trial_len: usize) -> Result<RestExtraction> {
    let mut trials = Vec::with_capacity(2 * rec.events.len());
    let mut skipped = 0;
    let mut prev_end = 0usize;
    for (index, ev) in rec.events.iter().enumerate() {
        if ev.duration < trial_len {
            return Err(Error::EventTooShort {
                index,
                duration: ev.duration,
                trial_len,
            });
        }
        let clear = ev.onset >= trial_len && ev.onset - trial_len >= prev_end;
        prev_end = ev.end();
        if !clear {
            skipped += 1;
            continue;
        }
        trials.push(Trial {
            samples: rec.samples.columns(ev.onset - trial_len, trial_len),
            label: REST,
        });
        trials.push(Trial {
            samples: rec.samples.columns(ev.onset, trial_len),
            label: MI,
        });
    }
    if trials.is_empty() {
        return Err(Error::NoRestTrials { trial_len });
    }
    Ok(RestExtraction {
        set: TrialSet {
            trials,
            kind: TrialSetKind::Binary,
            class_names: vec!["rest".into(), "mi".into()],
        },
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_recording(n_samples: usize, events: Vec<Event>) -> ContinuousRecording {
        let data = (0..2 * n_samples).map(|v| v as f64).collect();
        ContinuousRecording::new(
            250.0,
            ChannelMatrix::from_vec(2, n_samples, data).unwrap(),
            events,
        )
        .unwrap()
    }

    fn ev(onset: usize, duration: usize, label: u16) -> Event {
        Event {
            onset,
            duration,
            label,
        }
    }

    #[test]
    fn mi_trials_follow_event_order() {
        let rec = ramp_recording(
            5000,
            vec![ev(600, 500, 1), ev(1800, 600, 2), ev(3000, 500, 1)],
        );
        let set = extract_mi_trials(&rec, 500).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.labels(), vec![1, 2, 1]);
        assert_eq!(set.trials[1].samples.row(0)[0], 1800.0);
        assert_eq!(set.trials[1].samples.row(1)[499], 5000.0 + 2299.0);
        assert_eq!(set.class_names.len(), 2);
    }

    #[test]
    fn short_event_is_rejected() {
        let rec = ramp_recording(2000, vec![ev(600, 400, 1)]);
        assert!(matches!(
            extract_mi_trials(&rec, 500),
            Err(Error::EventTooShort { duration: 400, .. })
        ));
    }

    #[test]
    fn rest_window_precedes_onset() {
        let rec = ramp_recording(3000, vec![ev(1000, 500, 1)]);
        let out = extract_adjacent_rest(&rec, 500).unwrap();
        assert_eq!(out.skipped, 0);
        let rest = &out.set.trials[0];
        assert_eq!(rest.label, REST);
        assert_eq!(rest.samples.row(0)[0], 500.0);
        assert_eq!(rest.samples.row(0)[499], 999.0);
    }

    #[test]
    fn binary_set_is_balanced() {
        let events = (0..6).map(|i| ev(600 + i * 1200, 500, 1 + (i % 2) as u16)).collect();
        let rec = ramp_recording(8000, events);
        let out = extract_adjacent_rest(&rec, 500).unwrap();
        assert_eq!(out.set.len(), 12);
        let rest = out.set.trials.iter().filter(|t| t.label == REST).count();
        assert_eq!(rest, 6);
        assert!(out.set.trials.iter().all(|t| t.label == REST || t.label == MI));
    }

    #[test]
    fn pair_without_room_is_skipped() {
        let rec = ramp_recording(3000, vec![ev(100, 500, 1), ev(1200, 500, 2)]);
        let out = extract_adjacent_rest(&rec, 500).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.set.len(), 2);

        let only_bad = ramp_recording(3000, vec![ev(100, 500, 1)]);
        assert!(matches!(
            extract_adjacent_rest(&only_bad, 500),
            Err(Error::NoRestTrials { .. })
        ));
    }

    #[test]
    fn gap_after_previous_event_must_be_clean() {
        // 300 samples between the events: not enough for a 500-sample rest window.
        let rec = ramp_recording(4000, vec![ev(600, 500, 1), ev(1400, 500, 1)]);
        let out = extract_adjacent_rest(&rec, 500).unwrap();
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn validation_rejects_overlap_and_overflow() {
        let m = ChannelMatrix::zeros(1, 100);
        assert!(ContinuousRecording::new(100.0, m.clone(), vec![ev(10, 20, 1), ev(20, 5, 1)]).is_err());
        assert!(ContinuousRecording::new(100.0, m.clone(), vec![ev(90, 20, 1)]).is_err());
        assert!(ContinuousRecording::new(100.0, m.clone(), vec![ev(90, 0, 1)]).is_err());
        assert!(ContinuousRecording::new(100.0, ChannelMatrix::zeros(1, 0), vec![]).is_err());
        assert!(ContinuousRecording::new(100.0, m, vec![ev(10, 20, 1), ev(30, 5, 2)]).is_ok());
    }
}
