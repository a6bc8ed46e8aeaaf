mod common;

use proptest::prelude::*;
use swpc_core::dsp::{design_bandpass, design_notch, filtfilt, sliding_windows, window_count, FilterCoeffs};
use swpc_core::recording::{ChannelMatrix, ContinuousRecording};

fn sine(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (std::f64::consts::TAU * freq * i as f64 / fs + phase).sin())
        .collect()
}

#[test]
fn bandpass_passes_geometric_centre() {
    let bp = design_bandpass(8.0, 30.0, 250.0, 4).unwrap();
    let centre = (8.0f64 * 30.0).sqrt();
    assert!(bp.gain_db(centre, 250.0) >= -1.0);
    assert!(bp.gain_db(1.0, 250.0) <= -20.0);
}

#[test]
fn notch_keeps_alpha_band() {
    let n = design_notch(50.0, 250.0, 30.0).unwrap();
    assert!(n.gain_db(50.0, 250.0) <= -30.0);
    assert!(n.gain_db(10.0, 250.0) >= -1.0);
}

#[test]
fn constant_input_decays_to_zero() {
    let bp = design_bandpass(8.0, 30.0, 250.0, 4).unwrap();
    let y = filtfilt(&bp, &vec![3.0; 2000]).unwrap();
    let peak = y[500..1500].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < 1e-6 * 3.0, "{peak}");
}

#[test]
fn filtfilt_has_zero_phase_in_the_passband() {
    let bp = design_bandpass(8.0, 30.0, 250.0, 4).unwrap();
    let x = sine(15.0, 250.0, 2500, 0.3);
    let y = filtfilt(&bp, &x).unwrap();
    // A delayed copy would lose correlation with the input; zero phase keeps
    // the central part nearly identical.
    let mid = 800..1700;
    let err = mid.clone().map(|i| (y[i] - x[i]).abs()).fold(0.0f64, f64::max);
    assert!(err < 0.02, "{err}");
}

#[test]
fn window_count_examples() {
    assert_eq!(window_count(1000, 250, 10), 76);
    assert_eq!(window_count(250, 250, 10), 1);
    let rec = ContinuousRecording::new(250.0, ChannelMatrix::zeros(1, 250), vec![]).unwrap();
    assert!(sliding_windows(&rec, 300, 10).is_err());
}

fn filter_strategy() -> impl Strategy<Value = FilterCoeffs> {
    prop_oneof![
        (1.0f64..20.0, 5.0f64..40.0).prop_map(|(lo, width)| design_bandpass(lo, lo + width, 128.0, 2).unwrap()),
        (5.0f64..55.0, 5.0f64..40.0).prop_map(|(f, q)| design_notch(f, 128.0, q).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtfilt_is_linear(
        f in filter_strategy(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        let x: Vec<f64> = (0..200).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
        let z: Vec<f64> = (0..200).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
        let mix: Vec<f64> = x.iter().zip(&z).map(|(x, z)| a * x + b * z).collect();
        let lhs = filtfilt(&f, &mix).unwrap();
        let fx = filtfilt(&f, &x).unwrap();
        let fz = filtfilt(&f, &z).unwrap();
        for i in 0..200 {
            prop_assert!((lhs[i] - (a * fx[i] + b * fz[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn passband_sines_keep_their_phase(freq in 12.0f64..25.0, phase in 0.0f64..std::f64::consts::TAU) {
        let bp = design_bandpass(8.0, 30.0, 250.0, 4).unwrap();
        let x = sine(freq, 250.0, 2500, phase);
        let y = filtfilt(&bp, &x).unwrap();
        let gain = bp.response(freq, 250.0).norm().powi(2);
        for i in 800..1700 {
            prop_assert!((y[i] - gain * x[i]).abs() < 0.02);
        }
    }

    #[test]
    fn windows_match_direct_slices(
        ch in 1usize..4,
        len in 1usize..300,
        wl_frac in 0.01f64..1.0,
        step in 1usize..40,
    ) {
        let wl = ((len as f64 * wl_frac).ceil() as usize).clamp(1, len);
        let data: Vec<f64> = (0..ch * len).map(|i| i as f64).collect();
        let m = ChannelMatrix::from_vec(ch, len, data).unwrap();
        let rec = ContinuousRecording::new(100.0, m.clone(), vec![]).unwrap();
        let seq = sliding_windows(&rec, wl, step).unwrap();
        prop_assert_eq!(seq.len(), (len - wl) / step + 1);
        for (i, (start, w)) in seq.iter().enumerate() {
            prop_assert_eq!(start, i * step);
            prop_assert!(start + wl <= len);
            for c in 0..ch {
                prop_assert_eq!(w.row(c), &m.row(c)[start..start + wl]);
            }
        }
    }
}
