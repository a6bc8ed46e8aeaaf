mod common;

use proptest::prelude::*;
use rand::Rng;
use swpc_core::engine::{decode_from_probabilities, running_average, DecisionRecord};
use swpc_core::eval::{false_alarm_rate, prescreen_accuracy, score_stream};
use swpc_core::recording::{Event, REST};

fn decode(p_bar: &[f64], p: &[Vec<f64>], tau: f64, averaging: bool) -> Vec<DecisionRecord> {
    let starts: Vec<usize> = (0..p_bar.len()).map(|i| i * 10).collect();
    let p: Vec<Option<Vec<f64>>> = p.iter().cloned().map(Some).collect();
    decode_from_probabilities(&starts, p_bar, &p, tau, averaging).unwrap()
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn stream(k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (1usize..60).prop_flat_map(move |n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(simplex(k), n)))
}

#[test]
fn averaging_off_reports_raw_probabilities() {
    let p_bar = [0.5, 0.9, 0.1, 0.7];
    let p = vec![vec![0.2, 0.8], vec![0.9, 0.1], vec![0.5, 0.5], vec![0.3, 0.7]];
    for r in decode(&p_bar, &p, 0.2, false).iter().filter(|r| r.is_gated()) {
        assert_eq!(r.p_hat, r.p);
    }
}

#[test]
fn random_gate_accuracy_is_chance() {
    let mut r = common::rng(11);
    // Alternating blocks of 10 MI and 10 rest windows, none straddling.
    let mut events = Vec::new();
    let mut records = Vec::new();
    for block in 0..1000 {
        if block % 2 == 0 {
            events.push(Event {
                onset: block * 100,
                duration: 100,
                label: 1,
            });
        }
        for j in 0..10 {
            let index = records.len();
            records.push(DecisionRecord {
                index,
                start_sample: block * 100 + j * 10,
                p_bar: r.gen_range(0.0..1.0),
                p: None,
                p_hat: None,
                label: REST,
                run_start: None,
            });
        }
    }
    let acc = prescreen_accuracy(&records, &events, 10, 0.5);
    assert!((acc - 0.5).abs() < 0.03, "{acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn run_mean_matches_brute_force((p_bar, p) in stream(3), tau in 0.05f64..0.95) {
        let records = decode(&p_bar, &p, tau, true);
        for r in records.iter().filter(|r| r.is_gated()) {
            let start = r.run_start.unwrap();
            prop_assert!(records[start..=r.index].iter().all(|w| w.p_bar >= tau));
            prop_assert!(start == 0 || records[start - 1].p_bar < tau);
            let want = running_average(&p[start..=r.index]).unwrap();
            for (a, b) in r.p_hat.as_ref().unwrap().iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn raising_tau_never_gates_more((p_bar, p) in stream(2), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = decode(&p_bar, &p, lo, true);
        let b = decode(&p_bar, &p, hi, true);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.is_gated() || !y.is_gated());
        }
        let events = [Event { onset: 100, duration: 200, label: 1 }];
        prop_assert!(false_alarm_rate(&a, &events, 10, lo) >= false_alarm_rate(&b, &events, 10, hi));
    }

    #[test]
    fn scores_are_fractions((p_bar, p) in stream(2), tau in 0.05f64..0.95, onset in 0usize..300, duration in 1usize..300) {
        let records = decode(&p_bar, &p, tau, true);
        let events = [Event { onset, duration, label: 2 }];
        let r = score_stream(&records, &events, 20, tau).unwrap();
        prop_assert_eq!(r.n_events, 1);
        for v in [r.acc, r.prescreen_acc, r.false_alarm_rate] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if r.verdicts[0].too_short {
            prop_assert!(!r.verdicts[0].correct);
        }
    }

    #[test]
    fn running_average_of_copies_is_identity(v in simplex(4), n in 1usize..20) {
        let avg = running_average(&vec![v.clone(); n]).unwrap();
        for (a, b) in avg.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
