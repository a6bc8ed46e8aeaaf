//! IIR filter design, zero-phase filtering, and sliding-window segmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::{ChannelMatrix, ContinuousRecording};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    Bandpass,
    Notch,
    Identity,
}

/// Transfer-function coefficients, `a[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoeffs {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    pub kind: FilterKind,
}

impl FilterCoeffs {
    pub fn identity() -> Self {
        Self {
            numerator: vec![1.0],
            denominator: vec![1.0],
            kind: FilterKind::Identity,
        }
    }

    /// `H(e^{jω})` at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs;
        let z_inv = Complex64::from_polar(1.0, -w);
        horner(&self.numerator, z_inv) / horner(&self.denominator, z_inv)
    }

    pub fn gain_db(&self, freq_hz: f64, fs: f64) -> f64 {
        20.0 * libm::log10(self.response(freq_hz, fs).norm())
    }

    fn order(&self) -> usize {
        self.numerator.len().max(self.denominator.len())
    }
}

fn horner(coeffs: &[f64], z_inv: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z_inv + c)
}

/// Expands `prod (z - r)` into real coefficients of descending powers of z.
fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

/// Butterworth bandpass through the bilinear transform with prewarped band
/// edges. `order` is the order of the lowpass prototype, so the returned
/// filter has `2 * order` poles. The passband gain is normalized to exactly 1
/// at the digital image of the geometric centre frequency.
pub fn design_bandpass(low_hz: f64, high_hz: f64, fs: f64, order: usize) -> Result<FilterCoeffs> {
    if !(fs > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::InvalidFilter(format!(
            "band edges must satisfy 0 < {low_hz} < {high_hz} < {}",
            fs / 2.0
        )));
    }
    if order < 2 || !order.is_multiple_of(2) {
        return Err(Error::InvalidFilter(format!("order {order} must be even and >= 2")));
    }
    let w1 = libm::tan(PI * low_hz / fs);
    let w2 = libm::tan(PI * high_hz / fs);
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    let mut poles = Vec::with_capacity(2 * order);
    for k in 1..=order {
        let theta = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let half = proto * (bw / 2.0);
        let disc = (half * half - w0_sq).sqrt();
        for s in [half + disc, half - disc] {
            poles.push((Complex64::new(1.0, 0.0) + s) / (Complex64::new(1.0, 0.0) - s));
        }
    }
    let max_mag = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if max_mag >= 1.0 {
        return Err(Error::UnstableFilter(max_mag));
    }

    let mut zeros = vec![Complex64::new(1.0, 0.0); order];
    zeros.extend(core::iter::repeat_n(Complex64::new(-1.0, 0.0), order));

    let mut coeffs = FilterCoeffs {
        numerator: poly_from_roots(&zeros),
        denominator: poly_from_roots(&poles),
        kind: FilterKind::Bandpass,
    };
    let centre_hz = fs / PI * libm::atan(libm::sqrt(w0_sq));
    let g = coeffs.response(centre_hz, fs).norm();
    for b in &mut coeffs.numerator {
        *b /= g;
    }
    Ok(coeffs)
}

/// Second-order IIR notch with bandwidth `freq_hz / quality`.
pub fn design_notch(freq_hz: f64, fs: f64, quality: f64) -> Result<FilterCoeffs> {
    if !(fs > 0.0 && freq_hz > 0.0 && freq_hz < fs / 2.0) {
        return Err(Error::InvalidFilter(format!(
            "notch frequency {freq_hz} outside (0, {})",
            fs / 2.0
        )));
    }
    if !(quality > 0.0) {
        return Err(Error::InvalidFilter(format!("quality {quality} must be positive")));
    }
    let w0 = 2.0 * PI * freq_hz / fs;
    let bw = w0 / quality;
    let gain = 1.0 / (1.0 + libm::tan(bw / 2.0));
    let cos_w0 = libm::cos(w0);
    Ok(FilterCoeffs {
        numerator: vec![gain, -2.0 * gain * cos_w0, gain],
        denominator: vec![1.0, -2.0 * gain * cos_w0, 2.0 * gain - 1.0],
        kind: FilterKind::Notch,
    })
}

fn padded(coeffs: &FilterCoeffs) -> (Vec<f64>, Vec<f64>) {
    let n = coeffs.order();
    let mut b = coeffs.numerator.clone();
    let mut a = coeffs.denominator.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    (b, a)
}

/// Steady-state initial conditions of the transposed direct-form II filter
/// for a unit step input.
fn steady_state_zi(b: &[f64], a: &[f64]) -> Vec<f64> {
    let n = b.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    // (I - C^T) zi = b[1:] - a[1:] * b[0], C the companion matrix of `a`.
    let mut m = vec![vec![0.0; n + 1]; n];
    for i in 0..n {
        m[i][i] += 1.0;
        m[i][0] += a[i + 1];
        if i + 1 < n {
            m[i][i + 1] -= 1.0;
        }
        m[i][n] = b[i + 1] - a[i + 1] * b[0];
    }
    solve_in_place(&mut m)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_in_place(m: &mut [Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap_or(col);
        m.swap(col, pivot);
        let (top, below) = m.split_at_mut(col + 1);
        let pivot_row = &top[col];
        for row in below.iter_mut() {
            let f = row[col] / pivot_row[col];
            if f != 0.0 {
                for (dst, src) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                    *dst -= f * src;
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = m[row][n];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x
}

fn lfilter(b: &[f64], a: &[f64], x: &[f64], mut z: Vec<f64>) -> Vec<f64> {
    let n = b.len() - 1;
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = b[0] * xi + z.first().copied().unwrap_or(0.0);
        for k in 0..n {
            let next = if k + 1 < n { z[k + 1] } else { 0.0 };
            z[k] = b[k + 1] * xi + next - a[k + 1] * yi;
        }
        y.push(yi);
    }
    y
}

/// Minimum signal length accepted by [`filtfilt`] is `padding_len + 1`.
pub fn padding_len(coeffs: &FilterCoeffs) -> usize {
    3 * coeffs.order()
}

/// Zero-phase forward-backward filtering with odd reflection padding at both
/// edges and steady-state initial conditions.
pub fn filtfilt(coeffs: &FilterCoeffs, signal: &[f64]) -> Result<Vec<f64>> {
    let pad = padding_len(coeffs);
    if signal.len() <= pad {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            min: pad,
        });
    }
    let (b, a) = padded(coeffs);
    let zi = steady_state_zi(&b, &a);
    let n = signal.len();
    let first = signal[0];
    let last = signal[n - 1];

    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let forward = lfilter(&b, &a, &ext, zi.iter().map(|z| z * ext[0]).collect());
    let mut reversed: Vec<f64> = forward.into_iter().rev().collect();
    let start = reversed[0];
    reversed = lfilter(&b, &a, &reversed, zi.iter().map(|z| z * start).collect());
    reversed.reverse();
    Ok(reversed[pad..pad + n].to_vec())
}

/// Band edges, order, and notch used to clean raw recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocessing {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    /// `None` disables the notch.
    pub notch_hz: Option<f64>,
    pub notch_quality: f64,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            low_hz: 8.0,
            high_hz: 30.0,
            order: 4,
            notch_hz: Some(50.0),
            notch_quality: 30.0,
        }
    }
}

impl Preprocessing {
    /// Filters that apply at `fs`; the notch is dropped when it sits at or
    /// above Nyquist.
    pub fn filters(&self, fs: f64) -> Result<Vec<FilterCoeffs>> {
        let mut out = vec![design_bandpass(self.low_hz, self.high_hz, fs, self.order)?];
        if let Some(f) = self.notch_hz.filter(|&f| f < fs / 2.0) {
            out.push(design_notch(f, fs, self.notch_quality)?);
        }
        Ok(out)
    }

    /// Bandpass then notch, zero-phase, every channel independently.
    pub fn apply(&self, rec: &ContinuousRecording) -> Result<ContinuousRecording> {
        let filters = self.filters(rec.fs)?;
        let mut samples = ChannelMatrix::zeros(rec.n_channels(), rec.n_samples());
        for c in 0..rec.n_channels() {
            let mut row = rec.samples.row(c).to_vec();
            for f in &filters {
                row = filtfilt(f, &row)?;
            }
            samples.row_mut(c).copy_from_slice(&row);
        }
        Ok(ContinuousRecording {
            fs: rec.fs,
            samples,
            events: rec.events.clone(),
        })
    }
}

/// Window length in samples for a length given in seconds.
pub fn window_samples(seconds: f64, fs: f64) -> usize {
    libm::round(seconds * fs) as usize
}

/// Lazily materialized sliding windows over a recording.
#[derive(Debug, Clone, Copy)]
pub struct WindowSequence<'a> {
    source: &'a ChannelMatrix,
    pub window_len: usize,
    pub step: usize,
    count: usize,
}

impl<'a> WindowSequence<'a> {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    #[inline]
    pub fn start(&self, i: usize) -> usize {
        i * self.step
    }

    pub fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count).map(move |i| i * self.step)
    }

    pub fn window(&self, i: usize) -> ChannelMatrix {
        assert!(i < self.count, "window index out of range");
        self.source.columns(self.start(i), self.window_len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, ChannelMatrix)> + '_ {
        (0..self.count).map(move |i| (self.start(i), self.window(i)))
    }
}

pub fn window_count(stream_len: usize, window_len: usize, step: usize) -> usize {
    (stream_len - window_len) / step + 1
}

/// Windows `[i * step, i * step + window_len)` for every start that keeps the
/// window inside the stream.
pub fn sliding_windows(
    rec: &ContinuousRecording,
    window_len: usize,
    step: usize,
) -> Result<WindowSequence<'_>> {
    let len = rec.n_samples();
    if window_len == 0 || window_len > len {
        return Err(Error::WindowTooLong {
            window: window_len,
            len,
        });
    }
    if step == 0 {
        return Err(Error::InvalidStream("window step must be at least 1".into()));
    }
    Ok(WindowSequence {
        source: &rec.samples,
        window_len,
        step,
        count: window_count(len, window_len, step),
    })
}
