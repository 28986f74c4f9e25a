//! Ohmic bath with algebraic cutoff and its complex force autocorrelation.
//!
//! Natural units throughout: the system frequency, `ħ` and `k_B` are one.
//! The correlation function is
//!
//! ```text
//! L(t) = (1/π) ∫₀^ω_max dω J(ω) [coth(βω/2) cos ωt − i sin ωt]
//! ```
//!
//! evaluated with composite 8-point Gauss–Legendre panels. Every evaluation
//! is repeated with twice the node count and rejected if the two disagree by
//! more than the configured tolerance.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{uniform_spacing, TimeGrid};

const GL8_NODES: [f64; 4] =
    [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL8_WEIGHTS: [f64; 4] =
    [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];

/// Re-seed the phasor recurrence from `sin_cos` every this many steps.
const RESEED_EVERY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSettings {
    /// Upper integration limit.
    pub omega_max: f64,
    /// Number of quadrature nodes; rounded up to a multiple of 8.
    pub n_points: usize,
    /// Largest accepted change under node doubling, relative to `|L(0)|`.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    /// Dimensionless coupling constant.
    pub gamma: f64,
    /// Cutoff frequency.
    pub omega_c: f64,
    /// Inverse temperature.
    pub beta: f64,
    pub quadrature: QuadratureSettings,
}

impl BathSpec {
    /// Bath with default quadrature: `omega_max = 50 ω_c`, 16384 nodes, tolerance `1e-6`.
    pub fn new(gamma: f64, omega_c: f64, beta: f64) -> Result<Self> {
        let spec = Self {
            gamma,
            omega_c,
            beta,
            quadrature: QuadratureSettings {
                omega_max: 50.0 * omega_c,
                n_points: 16384,
                tolerance: 1e-6,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_quadrature(mut self, quadrature: QuadratureSettings) -> Result<Self> {
        self.quadrature = quadrature;
        self.validate()?;
        Ok(self)
    }

    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            v.push(format!("gamma must be >= 0 and finite, got {}", self.gamma));
        }
        if !(self.omega_c > 0.0 && self.omega_c.is_finite()) {
            v.push(format!("omega_c must be > 0, got {}", self.omega_c));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be > 0, got {}", self.beta));
        }
        let q = &self.quadrature;
        if !(q.omega_max > self.omega_c && q.omega_max.is_finite()) {
            v.push(format!(
                "quadrature.omega_max must exceed omega_c ({}), got {}",
                self.omega_c, q.omega_max
            ));
        }
        if q.n_points < 2 {
            v.push(format!("quadrature.n_points must be >= 2, got {}", q.n_points));
        }
        if !(q.tolerance > 0.0) {
            v.push(format!("quadrature.tolerance must be > 0, got {}", q.tolerance));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(v.join("; ")))
        }
    }

    fn panels(&self, n_points: usize) -> usize {
        n_points.div_ceil(8).max(1)
    }
}

/// `J(ω) = γω / (1 + (ω/ω_c)²)²`.
pub fn spectral_density(omega: f64, spec: &BathSpec) -> Result<f64> {
    if omega < 0.0 || omega.is_nan() {
        return Err(Error::Domain(format!("spectral density needs omega >= 0, got {omega}")));
    }
    Ok(ohmic(omega, spec.gamma, spec.omega_c))
}

#[inline]
fn ohmic(omega: f64, gamma: f64, omega_c: f64) -> f64 {
    let u = omega / omega_c;
    gamma * omega / ((1.0 + u * u) * (1.0 + u * u))
}

/// `J(ω) coth(βω/2)` for `ω >= 0`; the `ω → 0` limit is `2γ/β`.
#[inline]
pub(crate) fn thermal_density(omega: f64, gamma: f64, omega_c: f64, beta: f64) -> f64 {
    let x = 0.5 * beta * omega;
    if x < 1e-8 {
        let u = omega / omega_c;
        2.0 * gamma / beta / ((1.0 + u * u) * (1.0 + u * u))
    } else {
        ohmic(omega, gamma, omega_c) / x.tanh()
    }
}

/// Symmetric power spectrum of `Re L`: `S(ω) = J(|ω|) coth(β|ω|/2)`, so that
/// `Re L(t) = (1/2π) ∫ S(ω) e^{iωt} dω`.
pub fn power_spectrum(omega: f64, spec: &BathSpec) -> f64 {
    thermal_density(omega.abs(), spec.gamma, spec.omega_c, spec.beta)
}

struct Nodes {
    omega: Vec<f64>,
    /// `w_j S(ω_j) / π`
    cos_weight: Vec<f64>,
    /// `w_j J(ω_j) / π`
    sin_weight: Vec<f64>,
}

fn nodes(spec: &BathSpec, n_points: usize) -> Nodes {
    let panels = spec.panels(n_points);
    let h = spec.quadrature.omega_max / panels as f64;
    let mut omega = Vec::with_capacity(panels * 8);
    let mut cos_weight = Vec::with_capacity(panels * 8);
    let mut sin_weight = Vec::with_capacity(panels * 8);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in GL8_NODES.iter().zip(GL8_WEIGHTS.iter()) {
            for sign in [-1.0, 1.0] {
                let om = mid + sign * 0.5 * h * x;
                let wt = 0.5 * h * w / std::f64::consts::PI;
                omega.push(om);
                cos_weight.push(wt * thermal_density(om, spec.gamma, spec.omega_c, spec.beta));
                sin_weight.push(wt * ohmic(om, spec.gamma, spec.omega_c));
            }
        }
    }
    Nodes { omega, cos_weight, sin_weight }
}

fn correlation_at(nodes: &Nodes, t: f64) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for ((om, cw), sw) in nodes.omega.iter().zip(&nodes.cos_weight).zip(&nodes.sin_weight) {
        let (s, c) = (om * t).sin_cos();
        re += cw * c;
        im -= sw * s;
    }
    Complex64::new(re, im)
}

/// Samples `L` on the uniform grid `k * dt`, `k = 0..n`.
fn correlation_on_grid(nodes: &Nodes, dt: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for ((om, cw), sw) in nodes.omega.iter().zip(&nodes.cos_weight).zip(&nodes.sin_weight) {
        let rot = Complex64::from_polar(1.0, om * dt);
        let mut phase = Complex64::new(1.0, 0.0);
        for k in 0..n {
            if k % RESEED_EVERY == 0 {
                let (s, c) = (om * dt * k as f64).sin_cos();
                phase = Complex64::new(c, s);
            }
            re[k] += cw * phase.re;
            im[k] -= sw * phase.im;
            phase *= rot;
        }
    }
    (re, im)
}

fn check_doubling(
    spec: &BathSpec,
    times: &[f64],
    coarse: (&[f64], &[f64]),
    fine: (&[f64], &[f64]),
    scale: f64,
) -> Result<()> {
    if scale == 0.0 {
        return Ok(());
    }
    let mut worst = (0.0, 0usize);
    for k in 0..times.len() {
        let d = (coarse.0[k] - fine.0[k]).hypot(coarse.1[k] - fine.1[k]) / scale;
        if d > worst.0 {
            worst = (d, k);
        }
    }
    if worst.0 > spec.quadrature.tolerance {
        return Err(Error::Quadrature {
            t: times[worst.1],
            change: worst.0,
            tolerance: spec.quadrature.tolerance,
        });
    }
    Ok(())
}

/// `L(t)` by quadrature, checked against a doubled node count.
pub fn bath_correlation(t: f64, spec: &BathSpec) -> Result<Complex64> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Domain(format!("bath correlation needs finite t >= 0, got {t}")));
    }
    spec.validate()?;
    let n = spec.quadrature.n_points;
    let coarse = correlation_at(&nodes(spec, n), t);
    let fine = correlation_at(&nodes(spec, 2 * n), t);
    // tolerance is relative to |L(0)|, the largest value L takes
    let scale = correlation_at(&nodes(spec, 2 * n), 0.0).re.abs();
    check_doubling(spec, &[t], (&[coarse.re], &[coarse.im]), (&[fine.re], &[fine.im]), scale)?;
    Ok(coarse)
}

/// `L` sampled on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub t_grid: Vec<f64>,
    pub re_l: Vec<f64>,
    pub im_l: Vec<f64>,
}

impl CorrelationTable {
    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.t_grid[1] - self.t_grid[0]
    }

    pub fn value(&self, k: usize) -> Complex64 {
        Complex64::new(self.re_l[k], self.im_l[k])
    }

    /// `∫₀ᵗ (t − s) Re L(s) ds` at every grid node, by the trapezoid rule.
    ///
    /// Computed as `t·∫₀ᵗ Re L − ∫₀ᵗ s Re L`, both running integrals.
    pub fn dephasing_exponent(&self) -> Vec<f64> {
        let dt = self.dt();
        let mut out = Vec::with_capacity(self.len());
        let mut i0 = 0.0;
        let mut i1 = 0.0;
        out.push(0.0);
        for k in 1..self.len() {
            let (a, b) = (self.re_l[k - 1], self.re_l[k]);
            i0 += 0.5 * dt * (a + b);
            i1 += 0.5 * dt * (self.t_grid[k - 1] * a + self.t_grid[k] * b);
            out.push(self.t_grid[k] * i0 - i1);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,re_L,im_L")?;
        for k in 0..self.len() {
            writeln!(w, "{},{},{}", self.t_grid[k], self.re_l[k], self.im_l[k])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

/// Tabulates `L` on `grid`; fails if node doubling moves any value beyond tolerance.
pub fn tabulate_correlation(spec: &BathSpec, grid: &TimeGrid) -> Result<CorrelationTable> {
    spec.validate()?;
    let t_grid = grid.times();
    uniform_spacing(&t_grid)?;
    let n = spec.quadrature.n_points;
    let (re_l, im_l) = correlation_on_grid(&nodes(spec, n), grid.dt(), t_grid.len());
    let (re_f, im_f) = correlation_on_grid(&nodes(spec, 2 * n), grid.dt(), t_grid.len());
    check_doubling(spec, &t_grid, (&re_l, &im_l), (&re_f, &im_f), re_f[0].abs())?;
    Ok(CorrelationTable { t_grid, re_l, im_l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_bath() -> BathSpec {
        BathSpec::new(0.05, 10.0, 5.0).unwrap()
    }

    #[test]
    fn spectral_density_values() {
        let spec = paper_bath();
        assert_eq!(spectral_density(0.0, &spec).unwrap(), 0.0);
        assert_relative_eq!(spectral_density(10.0, &spec).unwrap(), 0.125, epsilon = 1e-15);
        assert!(matches!(spectral_density(-1.0, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn spectral_density_peak_by_scan() {
        let spec = paper_bath();
        let (mut best, mut arg) = (0.0, 0.0);
        for i in 0..=200_000 {
            let w = i as f64 * 1e-4;
            let j = spectral_density(w, &spec).unwrap();
            if j > best {
                best = j;
                arg = w;
            }
        }
        assert!((arg - 5.773_502_691_896_258).abs() < 2e-4, "argmax {arg}");
    }

    #[test]
    fn thermal_density_small_frequency_limit() {
        let spec = paper_bath();
        let limit = 2.0 * spec.gamma / spec.beta;
        assert_relative_eq!(power_spectrum(0.0, &spec), limit, epsilon = 1e-15);
        assert_relative_eq!(power_spectrum(1e-6, &spec), limit, max_relative = 1e-9);
        assert_relative_eq!(power_spectrum(1e-3, &spec), limit, max_relative = 1e-5);
    }

    #[test]
    fn imaginary_part_vanishes_at_origin() {
        let l0 = bath_correlation(0.0, &paper_bath()).unwrap();
        assert_eq!(l0.im, 0.0);
        assert!(l0.re > 0.0);
    }

    #[test]
    fn zero_coupling_gives_zero_table() {
        let spec = BathSpec::new(0.0, 10.0, 5.0).unwrap();
        let table = tabulate_correlation(&spec, &TimeGrid::new(1.0, 64).unwrap()).unwrap();
        assert!(table.re_l.iter().chain(&table.im_l).all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(BathSpec::new(-0.1, 10.0, 5.0).is_err());
        assert!(BathSpec::new(0.1, 0.0, 5.0).is_err());
        assert!(BathSpec::new(0.1, 10.0, 0.0).is_err());
        let q = QuadratureSettings { omega_max: 5.0, n_points: 1, tolerance: 1e-6 };
        let err = paper_bath().with_quadrature(q).unwrap_err().to_string();
        assert!(err.contains("omega_max") && err.contains("n_points"), "{err}");
        assert!(bath_correlation(-1.0, &paper_bath()).is_err());
    }

    #[test]
    fn too_coarse_quadrature_is_reported() {
        let q = QuadratureSettings { omega_max: 500.0, n_points: 16, tolerance: 1e-6 };
        let spec = paper_bath().with_quadrature(q).unwrap();
        let err = tabulate_correlation(&spec, &TimeGrid::new(6.0, 64).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Quadrature { .. }), "{err}");
    }

    #[test]
    fn grid_recurrence_matches_direct_evaluation() {
        let spec = paper_bath();
        let grid = TimeGrid::new(std::f64::consts::TAU, 1024).unwrap();
        let table = tabulate_correlation(&spec, &grid).unwrap();
        for k in [0, 1, 17, 300, 1024] {
            let direct = bath_correlation(grid.time(k), &spec).unwrap();
            assert!((direct.re - table.re_l[k]).abs() < 1e-12, "k={k}");
            assert!((direct.im - table.im_l[k]).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn dephasing_exponent_of_constant_kernel() {
        // Re L ≡ c gives c t²/2
        let t_grid: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let table = CorrelationTable {
            re_l: vec![2.0; 101],
            im_l: vec![0.0; 101],
            t_grid: t_grid.clone(),
        };
        let e = table.dephasing_exponent();
        for (k, t) in t_grid.iter().enumerate() {
            assert!((e[k] - t * t).abs() < 1e-12);
        }
    }
}
