//! Event-level scoring of decoder output and window-level prescreen metrics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::DecisionRecord;
use crate::error::{Error, Result};
use crate::recording::{Event, REST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventVerdict {
    pub event_index: usize,
    pub label: u16,
    /// Window whose averaged probabilities decided the event.
    pub decided_by: Option<usize>,
    pub predicted: Option<u16>,
    pub correct: bool,
    /// No window fits inside the event.
    pub too_short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub acc: f64,
    pub n_events: usize,
    pub n_correct: usize,
    pub verdicts: Vec<EventVerdict>,
    pub prescreen_acc: f64,
    pub false_alarm_rate: f64,
    pub n_mi_windows: usize,
    pub n_rest_windows: usize,
}

/// Ground truth of one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowTruth {
    Mi,
    Rest,
    Excluded,
}

/// MI if the window lies inside an MI event, rest if it touches no event,
/// excluded otherwise.
pub fn window_truth(start: usize, window_len: usize, events: &[Event]) -> WindowTruth {
    let mut touched = false;
    for ev in events {
        if ev.contains_span(start, window_len) {
            return if ev.label == REST {
                WindowTruth::Rest
            } else {
                WindowTruth::Mi
            };
        }
        touched |= ev.intersects_span(start, window_len);
    }
    if touched {
        WindowTruth::Excluded
    } else {
        WindowTruth::Rest
    }
}

fn sorted(records: &[DecisionRecord]) -> Vec<&DecisionRecord> {
    let mut v: Vec<&DecisionRecord> = records.iter().collect();
    v.sort_by_key(|r| r.index);
    v
}

/// Per MI event, the last fully contained window with `p_bar ≥ tau` decides
/// via argmax of its averaged probabilities; no such window means wrong.
pub fn score_stream(records: &[DecisionRecord], events: &[Event], window_len: usize, tau: f64) -> Result<ScoreReport> {
    if records.is_empty() {
        return Err(Error::Empty("decision log"));
    }
    let recs = sorted(records);
    let mut verdicts = Vec::new();
    for (event_index, ev) in events.iter().enumerate().filter(|(_, e)| e.label != REST) {
        let inside: Vec<&&DecisionRecord> = recs
            .iter()
            .filter(|r| ev.contains_span(r.start_sample, window_len))
            .collect();
        let decider = inside.iter().rev().find(|r| r.p_bar >= tau);
        let predicted = decider.map(|r| match &r.p_hat {
            Some(p) => crate::model::argmax(p) as u16 + 1,
            None => r.label,
        });
        verdicts.push(EventVerdict {
            event_index,
            label: ev.label,
            decided_by: decider.map(|r| r.index),
            predicted,
            correct: predicted == Some(ev.label),
            too_short: inside.is_empty(),
        });
    }
    let n_events = verdicts.len();
    let n_correct = verdicts.iter().filter(|v| v.correct).count();
    let windows = window_stats(&recs, events, window_len, tau);
    Ok(ScoreReport {
        acc: ratio(n_correct, n_events),
        n_events,
        n_correct,
        verdicts,
        prescreen_acc: windows.accuracy(),
        false_alarm_rate: ratio(windows.rest_gated, windows.rest),
        n_mi_windows: windows.mi,
        n_rest_windows: windows.rest,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

struct WindowStats {
    mi: usize,
    mi_gated: usize,
    rest: usize,
    rest_gated: usize,
}

impl WindowStats {
    fn accuracy(&self) -> f64 {
        ratio(self.mi_gated + self.rest - self.rest_gated, self.mi + self.rest)
    }
}

fn window_stats(records: &[&DecisionRecord], events: &[Event], window_len: usize, tau: f64) -> WindowStats {
    let mut s = WindowStats {
        mi: 0,
        mi_gated: 0,
        rest: 0,
        rest_gated: 0,
    };
    for r in records {
        let gated = r.p_bar >= tau;
        match window_truth(r.start_sample, window_len, events) {
            WindowTruth::Mi => {
                s.mi += 1;
                s.mi_gated += usize::from(gated);
            }
            WindowTruth::Rest => {
                s.rest += 1;
                s.rest_gated += usize::from(gated);
            }
            WindowTruth::Excluded => {}
        }
    }
    s
}

/// Binary accuracy of the gate against window truth; straddling windows are
/// excluded. Zero when no window qualifies.
pub fn prescreen_accuracy(records: &[DecisionRecord], events: &[Event], window_len: usize, tau: f64) -> f64 {
    window_stats(&sorted(records), events, window_len, tau).accuracy()
}

/// Fraction of pure-rest windows passing the gate.
pub fn false_alarm_rate(records: &[DecisionRecord], events: &[Event], window_len: usize, tau: f64) -> f64 {
    let s = window_stats(&sorted(records), events, window_len, tau);
    ratio(s.rest_gated, s.rest)
}

/// One grid point of an L_w × τ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lw_seconds: f64,
    pub tau: f64,
    pub acc: f64,
    pub prescreen_acc: f64,
    pub false_alarm_rate: f64,
}

impl SweepRow {
    pub fn new(lw_seconds: f64, tau: f64, report: &ScoreReport) -> Self {
        Self {
            lw_seconds,
            tau,
            acc: report.acc,
            prescreen_acc: report.prescreen_acc,
            false_alarm_rate: report.false_alarm_rate,
        }
    }
}
