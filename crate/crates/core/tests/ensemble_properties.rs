use proptest::prelude::*;
use spinflux::bath::BathSpec;
use spinflux::ensemble::{merge, run_ensemble, EnsembleConfig, EnsembleResult, LabeledState};
use spinflux::grid::TimeGrid;
use spinflux::observables::{distance_series, AntipodalPair};
use spinflux::propagator::{Dissipation, SystemSpec};

fn short(n: u64, seed: u64) -> EnsembleConfig {
    EnsembleConfig {
        grid: TimeGrid::new(2.0, 400).unwrap(),
        ..EnsembleConfig::pauli(BathSpec::new(0.05, 10.0, 5.0).unwrap(), SystemSpec::driven(1.0), n, seed)
    }
}

fn csv_bytes(r: &EnsembleResult) -> Vec<Vec<u8>> {
    (0..r.states.len())
        .map(|s| {
            let mut buf = Vec::new();
            r.write_state_csv(s, &mut buf).unwrap();
            buf
        })
        .collect()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let config = short(200, 9);
    let one = in_pool(1, || run_ensemble(&config).unwrap());
    let three = in_pool(3, || run_ensemble(&config).unwrap());
    assert_eq!(csv_bytes(&one), csv_bytes(&three));
    assert_eq!(one.states, three.states);
    assert_eq!(one.pairs, three.pairs);
}

#[test]
fn merging_disjoint_ranges_reproduces_the_full_run() {
    let full = run_ensemble(&short(300, 4)).unwrap();
    let head = run_ensemble(&EnsembleConfig { n_realizations: 137, ..short(300, 4) }).unwrap();
    let tail =
        run_ensemble(&EnsembleConfig { first_realization: 137, n_realizations: 163, ..short(300, 4) }).unwrap();
    let forward = merge(&[head.clone(), tail.clone()]).unwrap();
    let backward = merge(&[tail, head]).unwrap();
    assert_eq!(forward.n_used, 300);
    for merged in [&forward, &backward] {
        for (m, f) in merged.states.iter().zip(&full.states) {
            assert_eq!(m.rho_bar, f.rho_bar);
            for (a, b) in m.stderr_parts.iter().zip(&f.stderr_parts) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-3), "{x} vs {y}");
                }
            }
        }
    }
    assert_eq!(forward.states, backward.states);
    assert_eq!(forward.pairs, backward.pairs);
}

#[test]
fn overlapping_ranges_are_refused() {
    let a = run_ensemble(&short(10, 1)).unwrap();
    let b = run_ensemble(&EnsembleConfig { first_realization: 5, ..short(10, 1) }).unwrap();
    assert!(merge(&[a, b]).is_err());
}

#[test]
fn standard_error_falls_as_inverse_square_root() {
    let base = || EnsembleConfig {
        grid: TimeGrid::new(1.0, 100).unwrap(),
        ..EnsembleConfig::pauli(BathSpec::new(0.05, 10.0, 5.0).unwrap(), SystemSpec::undriven(), 8000, 17)
    };
    let piece = |first: u64, n: u64| {
        run_ensemble(&EnsembleConfig { first_realization: first, n_realizations: n, ..base() }).unwrap()
    };
    let (a, b, c) = (piece(0, 2000), piece(2000, 2000), piece(4000, 4000));
    let nested = [a.clone(), merge(&[a.clone(), b.clone()]).unwrap(), merge(&[a, b, c]).unwrap()];
    let log_n: Vec<f64> = nested.iter().map(|r| (r.n_used as f64).ln()).collect();
    let k = 100;
    for s in 0..nested[0].states.len() {
        for e in 0..8 {
            let se: Vec<f64> = nested.iter().map(|r| r.states[s].stderr_parts[k][e]).collect();
            if se[0] < 1e-12 {
                continue;
            }
            let log_se: Vec<f64> = se.iter().map(|x| x.ln()).collect();
            let mx = log_n.iter().sum::<f64>() / 3.0;
            let my = log_se.iter().sum::<f64>() / 3.0;
            let slope = log_n.iter().zip(&log_se).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / log_n.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            assert!((slope + 0.5).abs() <= 0.05, "state {s} entry {e}: slope {slope}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_coupling_keeps_trace_distance_constant(theta in 0.0f64..std::f64::consts::PI, phi in 0.0f64..std::f64::consts::TAU, driven in any::<bool>()) {
        let pair = AntipodalPair { theta, phi };
        let (p, m) = pair.states();
        let system = if driven { SystemSpec::driven(1.0) } else { SystemSpec::undriven() };
        let config = EnsembleConfig {
            states: vec![LabeledState::new("n", p), LabeledState::new("-n", m)],
            pairs: vec![[0, 1]],
            grid: TimeGrid::new(3.0, 600).unwrap(),
            ..EnsembleConfig::pauli(BathSpec::new(0.0, 10.0, 5.0).unwrap(), system, 4, 1)
        };
        let r = run_ensemble(&config).unwrap();
        for d in distance_series(&r.states[0], &r.states[1]) {
            prop_assert!((d - 1.0).abs() <= 1e-6);
        }
        for s in &r.states {
            prop_assert!(s.stderr_parts.iter().flatten().all(|&x| x <= 1e-12));
        }
    }

    #[test]
    fn ensemble_means_are_physical_within_noise(seed in any::<u64>(), lambda in 0.0f64..1.5, hierarchy in any::<bool>()) {
        let dissipation = if hierarchy { Dissipation::Hierarchy { depth: 3 } } else { Dissipation::NuNoise };
        let config = EnsembleConfig {
            grid: TimeGrid::new(1.5, 300).unwrap(),
            dissipation,
            ..EnsembleConfig::pauli(BathSpec::new(0.05, 10.0, 5.0).unwrap(), SystemSpec::driven(lambda), 64, seed)
        };
        let r = run_ensemble(&config).unwrap();
        for s in &r.states {
            for k in 0..r.t_grid.len() {
                let rho = s.rho_bar[k];
                let se = s.stderr_parts[k];
                let worst = se.iter().cloned().fold(0.0, f64::max);
                // 4 SE: every node of every state is tested at once
                prop_assert!((rho.trace().re - 1.0).abs() <= 4.0 * s.trace_se[k] + 1e-12);
                let skew = rho.0[1] - rho.0[2].conj();
                prop_assert!(skew.re.abs() <= 4.0 * (se[2] + se[4]) + 1e-12);
                prop_assert!(skew.im.abs() <= 4.0 * (se[3] + se[5]) + 1e-12);
                let ev = rho.hermitian_part().eigenvalues();
                prop_assert!(ev[0] >= -4.0 * worst - 1e-12 && ev[1] >= -4.0 * worst - 1e-12, "{ev:?} at node {k}");
            }
        }
    }
}
