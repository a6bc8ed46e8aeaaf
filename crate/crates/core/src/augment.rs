//! Stochastic signal-space augmentations for the classification module's
//! self-supervised stage. Every function is a pure function of its input and
//! seed.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::ChannelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugmentKind {
    AddNoise,
    ScaleAmplitude,
    MaskChannels,
    MaskSegments,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::AddNoise,
        AugmentKind::ScaleAmplitude,
        AugmentKind::MaskChannels,
        AugmentKind::MaskSegments,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Multiplier of the per-channel uniform noise.
    pub noise_scale: f64,
    pub scale_choices: [f64; 2],
    /// Fraction of channels zeroed by channel masking (rounded up).
    pub channel_fraction: f64,
    pub n_segments: usize,
    /// Length of each masked segment as a fraction of the trial.
    pub segment_fraction: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            noise_scale: 0.5,
            scale_choices: [0.75, 1.25],
            channel_fraction: 0.25,
            n_segments: 2,
            segment_fraction: 0.1,
        }
    }
}

fn channel_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    libm::sqrt(row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Adds `scale · U(−δ_c, δ_c)` to every sample, δ_c the channel's standard
/// deviation.
pub fn add_noise(trial: &ChannelMatrix, scale: f64, seed: u64) -> ChannelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = trial.clone();
    for c in 0..out.n_channels() {
        let delta = channel_std(trial.row(c));
        if delta == 0.0 {
            continue;
        }
        for v in out.row_mut(c) {
            *v += scale * rng.gen_range(-delta..delta);
        }
    }
    out
}

/// Multiplies the whole trial by one of `choices`, drawn with equal odds.
pub fn scale_amplitude(trial: &ChannelMatrix, choices: [f64; 2], seed: u64) -> ChannelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = if rng.gen_bool(0.5) { choices[0] } else { choices[1] };
    let mut out = trial.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
    out
}

/// Zeroes `ceil(fraction × ch)` distinct channels.
pub fn mask_channels(trial: &ChannelMatrix, fraction: f64, seed: u64) -> Result<ChannelMatrix> {
    let ch = trial.n_channels();
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidAugment(format!("channel fraction {fraction} outside (0, 1)")));
    }
    let n_mask = libm::ceil(fraction * ch as f64 - 1e-9) as usize;
    if n_mask >= ch {
        return Err(Error::InvalidAugment(format!(
            "masking {n_mask} of {ch} channels would zero the whole trial"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates over channel indices.
    let mut idx: Vec<usize> = (0..ch).collect();
    for i in 0..n_mask {
        let j = rng.gen_range(i..ch);
        idx.swap(i, j);
    }
    let mut out = trial.clone();
    for &c in &idx[..n_mask] {
        out.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Zeroes `n_segments` random intervals of `round(seg_fraction × ts)` samples
/// across all channels; intervals may overlap.
pub fn mask_segments(
    trial: &ChannelMatrix,
    n_segments: usize,
    seg_fraction: f64,
    seed: u64,
) -> Result<ChannelMatrix> {
    let ts = trial.n_samples();
    let len = libm::round(seg_fraction * ts as f64) as usize;
    if len == 0 || len > ts {
        return Err(Error::InvalidAugment(format!(
            "segment fraction {seg_fraction} gives {len} samples of {ts}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = trial.clone();
    for _ in 0..n_segments {
        let start = rng.gen_range(0..=ts - len);
        for c in 0..out.n_channels() {
            out.row_mut(c)[start..start + len].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

pub fn apply(kind: AugmentKind, trial: &ChannelMatrix, params: &AugmentParams, seed: u64) -> Result<ChannelMatrix> {
    match kind {
        AugmentKind::AddNoise => Ok(add_noise(trial, params.noise_scale, seed)),
        AugmentKind::ScaleAmplitude => Ok(scale_amplitude(trial, params.scale_choices, seed)),
        AugmentKind::MaskChannels => mask_channels(trial, params.channel_fraction, seed),
        AugmentKind::MaskSegments => mask_segments(trial, params.n_segments, params.segment_fraction, seed),
    }
}

/// Two views of one trial produced by two different augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub first: ChannelMatrix,
    pub second: ChannelMatrix,
    pub kinds: [AugmentKind; 2],
}

/// Draws two distinct augmentation kinds without replacement and applies each
/// to `trial` with its own sub-seed.
pub fn pick_two_distinct(trial: &ChannelMatrix, params: &AugmentParams, seed: u64) -> Result<AugmentedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.gen_range(0..4);
    let mut b = rng.gen_range(0..3);
    if b >= a {
        b += 1;
    }
    let kinds = [AugmentKind::ALL[a], AugmentKind::ALL[b]];
    let (s1, s2) = (rng.gen::<u64>(), rng.gen::<u64>());
    Ok(AugmentedPair {
        first: apply(kinds[0], trial, params, s1)?,
        second: apply(kinds[1], trial, params, s2)?,
        kinds,
    })
}
