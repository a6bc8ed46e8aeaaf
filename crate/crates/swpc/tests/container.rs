use proptest::prelude::*;
use swpc::container::{decode, encode, read_header, read_recording, write_recording, ContainerError, HEADER_LEN};
use swpc_core::recording::{ChannelMatrix, ContinuousRecording, Event};

fn recording(ch: usize, n: usize, fs: f64, events: Vec<Event>) -> ContinuousRecording {
    let data = (0..ch * n).map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.125).collect();
    ContinuousRecording::new(fs, ChannelMatrix::from_vec(ch, n, data).unwrap(), events).unwrap()
}

fn one_event() -> ContinuousRecording {
    recording(
        3,
        600,
        250.0,
        vec![Event {
            onset: 100,
            duration: 250,
            label: 1,
        }],
    )
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.swpc");
    let rec = one_event();
    write_recording(&rec, &path).unwrap();
    assert_eq!(read_recording(&path).unwrap(), rec);
    let h = read_header(&path).unwrap();
    assert_eq!((h.n_channels, h.n_samples, h.fs, h.n_events), (3, 600, 250.0, 1));
}

#[test]
fn bad_magic() {
    let mut bytes = encode(&one_event()).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode(&bytes), Err(ContainerError::BadMagic(m)) if &m == b"XXXX"));
}

#[test]
fn truncated_mid_sample_block() {
    let bytes = encode(&one_event()).unwrap();
    let cut = HEADER_LEN + 3 * 600 * 4 / 2 + 1;
    match decode(&bytes[..cut]) {
        Err(ContainerError::Truncated { section, .. }) => assert_eq!(section, "sample block"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        decode(&bytes[..bytes.len() - 1]),
        Err(ContainerError::Truncated { section: "event table", .. })
    ));
    assert!(matches!(decode(&bytes[..10]), Err(ContainerError::Truncated { section: "header", .. })));
    assert!(matches!(decode(b"SW"), Err(ContainerError::Truncated { section: "magic", .. })));
}

#[test]
fn other_version() {
    let mut bytes = encode(&one_event()).unwrap();
    bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
    assert!(matches!(decode(&bytes), Err(ContainerError::UnsupportedVersion(2))));
}

#[test]
fn invalid_recording_never_written() {
    let mut rec = one_event();
    rec.events.push(Event {
        onset: 300,
        duration: 10,
        label: 2,
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.swpc");
    assert!(matches!(write_recording(&rec, &path), Err(ContainerError::Invalid(_))));
    assert!(!path.exists());
}

#[test]
fn out_of_range_event_in_file_rejected() {
    let mut bytes = encode(&one_event()).unwrap();
    let at = bytes.len() - 18;
    bytes[at..at + 8].copy_from_slice(&590u64.to_le_bytes());
    assert!(matches!(decode(&bytes), Err(ContainerError::Invalid(_))));
}

#[test]
fn missing_file_is_io() {
    assert!(matches!(read_recording("/nonexistent/x.swpc"), Err(ContainerError::Io(_))));
}

fn arb_recording() -> impl Strategy<Value = ContinuousRecording> {
    (1usize..6, 1usize..300, 1.0f64..2000.0, any::<u64>()).prop_flat_map(|(ch, n, fs, seed)| {
        let events = prop::collection::vec((1usize..40, 1usize..40, 1u16..5), 0..6);
        let samples = prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), ch * n);
        (Just((ch, n, fs, seed)), events, samples)
    })
    .prop_map(|((ch, n, fs, _), gaps, samples)| {
        let mut events = Vec::new();
        let mut t = 0;
        for (gap, dur, label) in gaps {
            if t + gap + dur > n {
                break;
            }
            events.push(Event {
                onset: t + gap,
                duration: dur,
                label,
            });
            t += gap + dur;
        }
        let data = samples.into_iter().map(f64::from).collect();
        ContinuousRecording::new(fs, ChannelMatrix::from_vec(ch, n, data).unwrap(), events).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f32_valued_recordings_round_trip_exactly(rec in arb_recording()) {
        let bytes = encode(&rec).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * rec.n_channels() * rec.n_samples() + 18 * rec.events.len());
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn every_strict_prefix_is_rejected(rec in arb_recording(), frac in 0.0f64..1.0) {
        let bytes = encode(&rec).unwrap();
        let cut = (frac * bytes.len() as f64) as usize;
        let is_truncated = matches!(decode(&bytes[..cut]), Err(ContainerError::Truncated { .. }));
        prop_assert!(is_truncated);
    }

    #[test]
    fn f64_input_is_quantized_once(v in -1e6f64..1e6) {
        let rec = ContinuousRecording::new(100.0, ChannelMatrix::from_rows(&[vec![v]]).unwrap(), vec![]).unwrap();
        let once = decode(&encode(&rec).unwrap()).unwrap();
        prop_assert_eq!(once.samples.row(0)[0], v as f32 as f64);
        prop_assert_eq!(decode(&encode(&once).unwrap()).unwrap(), once);
    }
}
