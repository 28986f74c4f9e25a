use std::sync::OnceLock;

use proptest::prelude::*;
use spinflux::bath::BathSpec;
use spinflux::ensemble::{run_ensemble, EnsembleConfig, EnsembleResult};
use spinflux::grid::TimeGrid;
use spinflux::observables::{
    backflow_windows, blp_measure, bloch_grid, info_loss_gain, information_flow, positive_area, thresholds,
    trace_distance, AntipodalPair, FlowOptions, InfoFlowReport, PairDynamics, PauliReconstruction,
};
use spinflux::propagator::{DensityMatrix, SystemSpec};

fn bloch_vector() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU, 0.0f64..=1.0)
        .prop_map(|(th, ph, r)| [r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()])
}

fn grid(n: usize) -> Vec<f64> {
    TimeGrid::new(std::f64::consts::TAU, n).unwrap().times()
}

/// A `D(t)` in `[0, 1]` starting at 1: decay plus a bounded oscillation.
fn synthetic_distance(t: &[f64], rate: f64, amp: f64, freq: f64) -> Vec<f64> {
    t.iter()
        .map(|&x| {
            let base = 0.5 + 0.5 * (-rate * x).exp();
            (base + amp * (1.0 - (-x).exp()) * (freq * x).sin()).clamp(0.0, 1.0)
        })
        .collect()
}

fn driven_ensemble() -> &'static EnsembleResult {
    static CELL: OnceLock<EnsembleResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = EnsembleConfig {
            grid: TimeGrid::new(3.0, 600).unwrap(),
            ..EnsembleConfig::pauli(BathSpec::new(0.1, 10.0, 5.0).unwrap(), SystemSpec::driven(1.0), 128, 6)
        };
        run_ensemble(&config).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_distance_is_a_symmetric_bounded_metric(a in bloch_vector(), b in bloch_vector(), c in bloch_vector()) {
        let (ra, rb, rc) = (DensityMatrix::from_bloch(a), DensityMatrix::from_bloch(b), DensityMatrix::from_bloch(c));
        let ab = trace_distance(&ra, &rb).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - trace_distance(&rb, &ra).unwrap()).abs() <= 1e-15);
        prop_assert!(trace_distance(&ra, &ra).unwrap() <= 1e-15);
        let via = trace_distance(&ra, &rc).unwrap() + trace_distance(&rc, &rb).unwrap();
        prop_assert!(ab <= via + 1e-12);
        // half the Euclidean distance of the Bloch vectors
        let half = 0.5 * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        prop_assert!((ab - half).abs() <= 1e-12);
    }

    #[test]
    fn integrated_raw_flow_recovers_the_distance(rate in 0.0f64..1.5, amp in 0.0f64..0.2, freq in 0.5f64..3.0) {
        let t = grid(4096);
        let d: Vec<f64> =
            t.iter().map(|&x| 0.45 + 0.4 * (-rate * x).exp() + amp * 0.5 * (freq * x).sin()).collect();
        let delta = information_flow(&d, &t, None).unwrap();
        let mut integral = 0.0;
        for k in 1..t.len() {
            integral += 0.5 * (t[k] - t[k - 1]) * (delta[k] + delta[k - 1]);
            prop_assert!((integral - (d[k] - d[0])).abs() <= 1e-6, "node {k}: {integral} vs {}", d[k] - d[0]);
        }
    }

    #[test]
    fn flow_statistics_respect_their_signs(rate in 0.0f64..1.5, amp in 0.0f64..0.3, freq in 0.5f64..4.0, eps in 1e-4f64..0.05) {
        let t = grid(2048);
        let d = synthetic_distance(&t, rate, amp, freq);
        let delta = information_flow(&d, &t, None).unwrap();
        let epsilon = vec![eps; t.len()];
        let windows = backflow_windows(&delta, &t, &epsilon).unwrap();
        prop_assert!(positive_area(&delta, &t, &windows) >= 0.0);
        for w in windows.windows(2) {
            prop_assert!(w[0].last_node < w[1].first_node && w[0].t_end <= w[1].t_start);
        }
        for (k, x) in delta.iter().enumerate() {
            if *x > eps {
                prop_assert!(windows.iter().any(|w| (w.first_node..=w.last_node).contains(&k)));
            }
        }
        let lg = info_loss_gain(&d, &delta, &t, &epsilon).unwrap();
        prop_assert!(lg.i_loss <= 0.0);
        prop_assert!(lg.i_gain >= 0.0);
        prop_assert_eq!(lg.first_backflow_time, windows.first().map(|w| w.t_start));
    }

    #[test]
    fn report_invariants_hold_for_noisy_estimates(noise in proptest::collection::vec(-0.05f64..0.05, 3), se in 0.0f64..0.02) {
        let t = grid(512);
        // Bloch difference of an orthogonal pair that shrinks, wobbles and may overshoot length 2
        let rdiff: Vec<[f64; 3]> = t
            .iter()
            .map(|&x| {
                let s = 2.0 * (0.6 + 0.4 * (-x).exp()) + noise[0] * (3.0 * x).sin();
                [s, noise[1] * x.sin(), noise[2] * (2.0 * x).cos()]
            })
            .collect();
        let cov = vec![[[se * se, 0.0, 0.0], [0.0, se * se, 0.0], [0.0, 0.0, se * se]]; t.len()];
        let r = InfoFlowReport::from_series(["a".into(), "b".into()], &t, &rdiff, &cov, 100, &FlowOptions::default()).unwrap();
        prop_assert!(r.d_series.iter().all(|d| (0.0..=1.0).contains(d)));
        prop_assert!(r.blp_value >= 0.0);
        prop_assert!(r.i_delta_loss <= 0.0);
        prop_assert!(r.i_delta_gain >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_of_a_pair_does_not_depend_on_its_orientation(theta in 0.0f64..std::f64::consts::PI, phi in 0.0f64..std::f64::consts::TAU) {
        let dynamics = PauliReconstruction::new(driven_ensemble(), FlowOptions::default()).unwrap();
        let pair = AntipodalPair { theta, phi };
        let a = dynamics.flow(&pair).unwrap();
        let b = dynamics.flow(&pair.swapped()).unwrap();
        prop_assert!((a.blp_value - b.blp_value).abs() <= 1e-9);
        for (x, y) in a.d_series.iter().zip(&b.d_series) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn measure_dominates_every_pair_on_the_grid() {
    let dynamics = PauliReconstruction::new(driven_ensemble(), FlowOptions::default()).unwrap();
    let pairs = bloch_grid(8, 5);
    let blp = blp_measure(&pairs, &dynamics).unwrap();
    assert_eq!(blp.per_pair.len(), pairs.len());
    for (pair, value) in &blp.per_pair {
        assert!(blp.value >= *value);
        assert!(*value >= 0.0);
        assert!((dynamics.flow(pair).unwrap().blp_value - value).abs() <= 1e-15);
    }
    let single = blp_measure(&pairs[7..8], &dynamics).unwrap();
    assert_eq!(single.value, blp.per_pair[7].1);
}

#[test]
fn empty_grid_is_an_input_error() {
    let dynamics = PauliReconstruction::new(driven_ensemble(), FlowOptions::default()).unwrap();
    assert!(blp_measure(&[], &dynamics).is_err());
}

#[test]
fn thresholds_have_a_floor() {
    let eps = thresholds(&[0.0, 1e-9, 0.1], 3.0);
    assert_eq!(eps[0], 1e-6);
    assert_eq!(eps[1], 1e-6);
    assert!((eps[2] - 0.3).abs() < 1e-15);
}

#[test]
fn decay_from_the_initial_value_is_not_backflow() {
    let t = grid(4096);
    // monotone decay with D'''(0) = −18; the one-sided end formula is not exact for it
    let rdiff: Vec<[f64; 3]> = t.iter().map(|&x| [2.0 * (-3.0 * x * x * x).exp(), 0.0, 0.0]).collect();
    let cov = vec![[[0.0; 3]; 3]; t.len()];
    let r = InfoFlowReport::from_series(["a".into(), "b".into()], &t, &rdiff, &cov, 100, &FlowOptions::default()).unwrap();
    assert!(r.delta_series[0] > 1e-6, "the end formula should overshoot here: {}", r.delta_series[0]);
    assert!(r.backflow_windows.is_empty(), "{:?}", r.backflow_windows);
    assert_eq!(r.first_backflow_time, None);
}
