use proptest::prelude::*;
use spinflux::bath::{tabulate_correlation, BathSpec};
use spinflux::grid::TimeGrid;
use spinflux::noise::{default_lags, run_noise_selftest, verify_noise_statistics, NoiseGenerator};

fn setup(gamma: f64, grid: TimeGrid) -> (spinflux::bath::CorrelationTable, NoiseGenerator) {
    let spec = BathSpec::new(gamma, 10.0, 5.0).unwrap();
    let table = tabulate_correlation(&spec, &grid).unwrap();
    let generator = NoiseGenerator::new(&spec, &table).unwrap();
    (table, generator)
}

#[test]
fn contract_holds_on_the_standard_grid() {
    let (table, generator) = setup(0.05, TimeGrid::standard());
    let report = run_noise_selftest(&generator, &table, 2024, 3000, &default_lags(20, 16)).unwrap();
    assert!(report.pass, "{:#?}", report.failures());
    assert_eq!(report.lags.len(), 20);
    assert!(report.xi_excess_kurtosis.pass);
    assert!(report.xi_mean.pass);
}

#[test]
fn scaled_paths_fail_with_four_times_the_target() {
    let (table, generator) = setup(0.05, TimeGrid::new(3.0, 600).unwrap());
    let paths: Vec<_> = (0..1500)
        .map(|i| {
            let mut p = generator.generate(8, i);
            p.xi.iter_mut().for_each(|x| *x *= 2.0);
            p
        })
        .collect();
    let report = verify_noise_statistics(&paths, &table, &[0, 10, 20]).unwrap();
    assert!(!report.pass);
    let zero = &report.lags[0].xi_xi;
    assert!(!zero.pass);
    assert!((zero.estimate / zero.target - 4.0).abs() < 0.3, "ratio {}", zero.estimate / zero.target);
}

#[test]
fn noise_dump_has_documented_columns() {
    let (_, generator) = setup(0.05, TimeGrid::new(1.0, 10).unwrap());
    let mut buf = Vec::new();
    generator.generate(1, 1).write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("t,re_xi,im_xi,re_nu,im_nu"));
    assert_eq!(text.lines().count(), 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn paths_depend_only_on_seed_and_index(seed in any::<u64>(), a in 0u64..1_000_000, b in 0u64..1_000_000) {
        let (_, generator) = setup(0.05, TimeGrid::new(2.0, 256).unwrap());
        let first_a = generator.generate(seed, a);
        let _ = generator.generate(seed, b);
        let again_a = generator.generate(seed, a);
        prop_assert_eq!(&first_a, &again_a);
        prop_assert_eq!(first_a.len(), 257);
        prop_assert_eq!(first_a.nu.len(), first_a.xi.len());
        prop_assert!(first_a.xi.iter().all(|x| x.is_finite()));
        prop_assert_eq!(first_a.seed_id, a);
    }

    #[test]
    fn zero_coupling_is_silent(seed in any::<u64>(), index in any::<u64>()) {
        let (_, generator) = setup(0.0, TimeGrid::new(1.0, 64).unwrap());
        let p = generator.generate(seed, index);
        prop_assert!(p.xi.iter().all(|&x| x == 0.0));
        prop_assert!(p.nu.iter().all(|x| x.re == 0.0 && x.im == 0.0));
    }
}
