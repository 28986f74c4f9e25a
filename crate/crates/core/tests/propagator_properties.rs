use num_complex::Complex64;
use proptest::prelude::*;
use spinflux::bath::{tabulate_correlation, BathSpec};
use spinflux::grid::TimeGrid;
use spinflux::noise::{NoiseGenerator, NoisePath};
use spinflux::propagator::{propagate, DensityMatrix, Dissipation, IntegratorSettings, Propagator, Scheme, SystemSpec};

fn generator(gamma: f64, grid: TimeGrid) -> NoiseGenerator {
    let spec = BathSpec::new(gamma, 10.0, 5.0).unwrap();
    let table = tabulate_correlation(&spec, &grid).unwrap();
    NoiseGenerator::new(&spec, &table).unwrap()
}

fn settings(substeps: usize) -> IntegratorSettings {
    IntegratorSettings { substeps, scheme: Scheme::Rk4 }
}

/// Final states of `run` along `path`.
fn finals(p: &Propagator, states: &[DensityMatrix], path: &NoisePath) -> Vec<DensityMatrix> {
    let mut s = states.to_vec();
    let mut last = Vec::new();
    p.run(&mut s, path, |node| {
        if node.k + 1 == path.len() {
            last = node.states.to_vec();
        }
    })
    .unwrap();
    last
}

fn bloch_state() -> impl Strategy<Value = DensityMatrix> {
    (0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU, 0.0f64..=1.0)
        .prop_map(|(th, ph, r)| DensityMatrix::from_bloch([r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]))
}

fn closed_form_unitary(rho0: &DensityMatrix, t: f64) -> DensityMatrix {
    // exp(iωtσx/2) with ω = 1
    let (c, s) = ((0.5 * t).cos(), (0.5 * t).sin());
    let u = [Complex64::new(c, 0.0), Complex64::new(0.0, s), Complex64::new(0.0, s), Complex64::new(c, 0.0)];
    let ud = [u[0].conj(), u[2].conj(), u[1].conj(), u[3].conj()];
    let mul = |a: &[Complex64; 4], b: &[Complex64; 4]| {
        [a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]]
    };
    DensityMatrix(mul(&mul(&u, &rho0.0), &ud))
}

#[test]
fn zero_noise_evolution_matches_closed_form_rotation() {
    let path = NoisePath::zeros(TimeGrid::standard().dt(), TimeGrid::standard().len(), 0);
    let rho0 = DensityMatrix::pure(0.7, 2.1);
    let tr = propagate(&rho0, &path, &SystemSpec::undriven(), &settings(1)).unwrap();
    for (t, r) in tr.t_grid.iter().zip(&tr.rho_series) {
        assert!((*r - closed_form_unitary(&rho0, *t)).norm() < 1e-8, "t = {t}");
    }
}

#[test]
fn zero_noise_step_halving_changes_final_state_below_tolerance() {
    let grid = TimeGrid::standard();
    let path = NoisePath::zeros(grid.dt(), grid.len(), 0);
    let rho0 = DensityMatrix::pure(1.0, 0.4);
    for system in [SystemSpec::undriven(), SystemSpec::driven(1.0)] {
        let a = propagate(&rho0, &path, &system, &settings(1)).unwrap();
        let b = propagate(&rho0, &path, &system, &settings(2)).unwrap();
        let diff = (*a.rho_series.last().unwrap() - *b.rho_series.last().unwrap()).norm();
        assert!(diff <= 1e-6, "difference {diff}");
    }
}

#[test]
fn noisy_step_halving_converges_faster_than_second_order() {
    let grid = TimeGrid::new(2.0, 200).unwrap();
    let path = generator(0.05, grid).generate(3, 7);
    let rho0 = [DensityMatrix::pure(0.9, 0.2)];
    for dissipation in [Dissipation::NuNoise, Dissipation::Hierarchy { depth: 3 }] {
        let run = |sub: usize| {
            let p = Propagator::new(SystemSpec::driven(1.0), settings(sub), dissipation, 0.05, 10.0).unwrap();
            finals(&p, &rho0, &path)[0]
        };
        let reference = run(32);
        let e1 = (run(1) - reference).norm();
        let e2 = (run(2) - reference).norm();
        let e4 = (run(4) - reference).norm();
        assert!(e1 / e2 > 4.0 && e2 / e4 > 4.0, "{dissipation:?}: errors {e1:e} {e2:e} {e4:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagation_is_linear_in_the_initial_state(
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        r1 in bloch_state(),
        r2 in bloch_state(),
        lambda in 0.0f64..1.5,
        hierarchy in any::<bool>(),
    ) {
        let path = generator(0.05, TimeGrid::new(1.5, 150).unwrap()).generate(seed, 0);
        let dissipation = if hierarchy { Dissipation::Hierarchy { depth: 2 } } else { Dissipation::NuNoise };
        let p = Propagator::new(SystemSpec::driven(lambda), settings(1), dissipation, 0.05, 10.0).unwrap();
        let out = finals(&p, &[r1, r2, r1 * a + r2 * b], &path);
        let combined = out[0] * a + out[1] * b;
        prop_assert!((out[2] - combined).norm() <= 1e-10 * (1.0 + out[2].norm()));
    }

    #[test]
    fn trace_is_conserved_without_nu(seed in any::<u64>(), rho0 in bloch_state(), lambda in 0.0f64..1.5) {
        let mut path = generator(0.1, TimeGrid::new(3.0, 400).unwrap()).generate(seed, 1);
        path.nu.iter_mut().for_each(|n| *n = Complex64::new(0.0, 0.0));
        let tr = propagate(&rho0, &path, &SystemSpec::driven(lambda), &settings(1)).unwrap();
        for r in &tr.rho_series {
            prop_assert!((r.trace() - 1.0).norm() <= 1e-8);
            prop_assert!(r.hermiticity_error() <= 1e-12);
        }
    }

    #[test]
    fn hierarchy_realizations_keep_trace_and_hermiticity(seed in any::<u64>(), rho0 in bloch_state(), lambda in 0.0f64..1.5) {
        let path = generator(0.05, TimeGrid::new(3.0, 400).unwrap()).generate(seed, 2);
        let p = Propagator::new(SystemSpec::driven(lambda), settings(1), Dissipation::Hierarchy { depth: 3 }, 0.05, 10.0).unwrap();
        let mut s = [rho0];
        let mut worst: f64 = 0.0;
        p.run(&mut s, &path, |node| {
            let r = node.states[0];
            worst = worst.max((r.trace() - 1.0).norm()).max(r.hermiticity_error());
        }).unwrap();
        prop_assert!(worst <= 1e-10, "worst deviation {}", worst);
    }

    #[test]
    fn zero_noise_evolution_preserves_bloch_norm(rho0 in bloch_state(), lambda in 0.0f64..2.0) {
        let grid = TimeGrid::standard();
        let path = NoisePath::zeros(grid.dt(), grid.len(), 0);
        let tr = propagate(&rho0, &path, &SystemSpec::driven(lambda), &settings(1)).unwrap();
        let n0 = norm(rho0.bloch());
        for r in &tr.rho_series {
            prop_assert!((norm(r.bloch()) - n0).abs() <= 1e-6);
        }
    }
}

fn norm(b: [f64; 3]) -> f64 {
    (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt()
}
