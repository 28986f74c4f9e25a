//! Gaussian noise pair `(ξ, ν)` driving the stochastic Liouville equation.
//!
//! Second-moment contract, with `L` the bath correlation:
//!
//! ```text
//! ⟨ξ(t) ξ(t')⟩ = Re L(t − t')
//! ⟨ξ(t) ν(t')⟩ = 2i θ(t − t') Im L(t − t')
//! ⟨ν(t) ν(t')⟩ = 0
//! ```
//!
//! `ξ` is real. On a circulant embedding of length `M ≥ 2n` both processes are
//! filters of the same complex white noise `z = w + i w'`:
//!
//! * `ξ = A w` with `A = C^{1/2}`, `C` the circulant covariance of `ξ`;
//! * `ν = B (w' + i w)` with `A Bᵀ` equal to the causal kernel `2θ(τ) Im L(τ)`.
//!
//! Any `B` gives `⟨νν⟩ = 0` because `w' + iw` has vanishing pseudo-covariance;
//! choosing `B` diagonal in the Fourier basis is the minimum-variance solution.
//! The eigenvalues of `C` come from the power spectrum of `Re L` folded onto the
//! embedding frequencies; the cross kernel is taken from the tabulated `Im L`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::bath::{power_spectrum, BathSpec, CorrelationTable};
use crate::error::{Error, Result};

/// Negative spectral values above this fraction of the peak are treated as roundoff.
pub const SPECTRUM_CLIP_FRACTION: f64 = 1e-10;

/// Number of aliased images of the spectrum folded into each embedding bin.
const ALIAS_IMAGES: i32 = 2;

/// Counter-based random stream for one realization.
///
/// The stream depends only on `(master_seed, realization_index)`, so any subset of
/// realizations can be generated in any order or on any number of workers.
pub fn realization_rng(master_seed: u64, realization_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(realization_index);
    rng
}

/// One realization of the noise pair on a uniform grid starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub dt: f64,
    pub xi: Vec<f64>,
    pub nu: Vec<Complex64>,
    pub seed_id: u64,
}

impl NoisePath {
    pub fn zeros(dt: f64, len: usize, seed_id: u64) -> Self {
        Self { dt, xi: vec![0.0; len], nu: vec![Complex64::new(0.0, 0.0); len], seed_id }
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,re_xi,im_xi,re_nu,im_nu")?;
        for k in 0..self.len() {
            writeln!(w, "{},{},{},{},{}", self.time(k), self.xi[k], 0.0, self.nu[k].re, self.nu[k].im)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Scratch buffers for [`NoiseGenerator::generate_into`].
pub struct NoiseWorkspace {
    z: Vec<Complex64>,
    xi_hat: Vec<Complex64>,
    nu_hat: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

/// Precomputed spectral filters for a bath table.
pub struct NoiseGenerator {
    len: usize,
    dt: f64,
    embedding: usize,
    /// `sqrt(λ_k) / M`
    xi_filter: Vec<f64>,
    /// `conj(κ_k) / sqrt(λ_k) / M`
    nu_filter: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NoiseGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoiseGenerator")
            .field("len", &self.len)
            .field("dt", &self.dt)
            .field("embedding", &self.embedding)
            .finish()
    }
}

impl NoiseGenerator {
    pub fn new(spec: &BathSpec, table: &CorrelationTable) -> Result<Self> {
        spec.validate()?;
        if table.len() < 2 {
            return Err(Error::Input("correlation table needs at least 2 nodes".into()));
        }
        crate::grid::uniform_spacing(&table.t_grid)?;
        if table.t_grid[0] != 0.0 {
            return Err(Error::Input("correlation table must start at t = 0".into()));
        }
        let n = table.len();
        let dt = table.dt();
        let m = (2 * n).next_power_of_two();

        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);

        let lambda = embedding_spectrum(spec, m, dt)?;

        let mut kappa = vec![Complex64::new(0.0, 0.0); m];
        for k in 1..n {
            kappa[k] = Complex64::new(2.0 * table.im_l[k], 0.0);
        }
        forward.process(&mut kappa);

        let scale = 1.0 / m as f64;
        let xi_filter: Vec<f64> = lambda.iter().map(|l| l.sqrt() * scale).collect();
        let nu_filter = lambda
            .iter()
            .zip(&kappa)
            .map(|(&l, k)| if l > 0.0 { k.conj() * (scale / l.sqrt()) } else { Complex64::new(0.0, 0.0) })
            .collect();

        Ok(Self { len: n, dt, embedding: m, xi_filter, nu_filter, forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn embedding_len(&self) -> usize {
        self.embedding
    }

    /// Mean of `|ν(t)|²`, a stationary property of the filters.
    pub fn nu_variance(&self) -> f64 {
        // E|ν|² = (2/M) Σ|β_k|², with the 1/M folded into the stored filter
        2.0 * self.embedding as f64 * self.nu_filter.iter().map(|b| b.norm_sqr()).sum::<f64>()
    }

    pub fn workspace(&self) -> NoiseWorkspace {
        let zero = Complex64::new(0.0, 0.0);
        let scratch_len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        NoiseWorkspace {
            z: vec![zero; self.embedding],
            xi_hat: vec![zero; self.embedding],
            nu_hat: vec![zero; self.embedding],
            scratch: vec![zero; scratch_len],
        }
    }

    pub fn generate(&self, master_seed: u64, realization_index: u64) -> NoisePath {
        let mut ws = self.workspace();
        let mut path = NoisePath::zeros(self.dt, self.len, realization_index);
        self.generate_into(master_seed, realization_index, &mut ws, &mut path);
        path
    }

    pub fn generate_into(
        &self,
        master_seed: u64,
        realization_index: u64,
        ws: &mut NoiseWorkspace,
        path: &mut NoisePath,
    ) {
        let m = self.embedding;
        let mut rng = realization_rng(master_seed, realization_index);
        for z in ws.z.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z = Complex64::new(re, im);
        }
        self.forward.process_with_scratch(&mut ws.z, &mut ws.scratch);

        let i = Complex64::new(0.0, 1.0);
        for k in 0..m {
            let mirrored = ws.z[(m - k) % m].conj();
            // FFT(w) and FFT(w' + i w)
            let w_hat = 0.5 * (ws.z[k] + mirrored);
            ws.xi_hat[k] = w_hat * self.xi_filter[k];
            ws.nu_hat[k] = self.nu_filter[k] * i * mirrored;
        }
        self.inverse.process_with_scratch(&mut ws.xi_hat, &mut ws.scratch);
        self.inverse.process_with_scratch(&mut ws.nu_hat, &mut ws.scratch);

        path.dt = self.dt;
        path.seed_id = realization_index;
        path.xi.clear();
        path.xi.extend(ws.xi_hat[..self.len].iter().map(|c| c.re));
        path.nu.clear();
        path.nu.extend_from_slice(&ws.nu_hat[..self.len]);
    }
}

/// Eigenvalues of the circulant covariance of `ξ` on an `m`-point embedding.
///
/// `λ_k = (1/dt) Σ_j S(ω_k + 2πj/dt)`, which is the discrete Fourier transform of
/// the periodized, sampled `Re L`.
pub fn embedding_spectrum(spec: &BathSpec, m: usize, dt: f64) -> Result<Vec<f64>> {
    let two_pi = std::f64::consts::TAU;
    let mut lambda: Vec<f64> = (0..m)
        .map(|k| {
            let kk = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 };
            let omega = two_pi * kk / (m as f64 * dt);
            (-ALIAS_IMAGES..=ALIAS_IMAGES)
                .map(|j| power_spectrum(omega + two_pi * j as f64 / dt, spec))
                .sum::<f64>()
                / dt
        })
        .collect();
    clip_spectrum(&mut lambda, m as f64 * dt)?;
    Ok(lambda)
}

/// Zeroes roundoff-level negative bins; larger violations are an error.
pub fn clip_spectrum(lambda: &mut [f64], period: f64) -> Result<()> {
    let peak = lambda.iter().cloned().fold(0.0, f64::max);
    let m = lambda.len();
    for (k, l) in lambda.iter_mut().enumerate() {
        if l.is_nan() || *l < -SPECTRUM_CLIP_FRACTION * peak {
            let kk = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 };
            return Err(Error::NegativeSpectrum {
                bin: k,
                omega: std::f64::consts::TAU * kk / period,
                value: *l,
                peak,
            });
        }
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub target: f64,
    pub estimate: f64,
    pub standard_error: f64,
    pub pass: bool,
}

impl MomentCheck {
    fn new(target: f64, estimate: f64, standard_error: f64) -> Self {
        let pass = (estimate - target).abs() <= 3.0 * standard_error;
        Self { target, estimate, standard_error, pass }
    }
}

/// Real and imaginary parts of one complex second moment, checked separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexMomentCheck {
    pub re: MomentCheck,
    pub im: MomentCheck,
}

impl ComplexMomentCheck {
    pub fn pass(&self) -> bool {
        self.re.pass && self.im.pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagStatistics {
    pub lag_nodes: usize,
    pub lag: f64,
    /// `⟨ξ(t + τ) ξ(t)⟩` against `Re L(τ)`.
    pub xi_xi: MomentCheck,
    /// `⟨ξ(t + τ) ν(t)⟩` against `2i Im L(τ)`.
    pub xi_nu_causal: ComplexMomentCheck,
    /// `⟨ξ(t) ν(t + τ)⟩` against zero (anti-causal side, τ > 0).
    pub xi_nu_anticausal: ComplexMomentCheck,
    /// `⟨ν(t + τ) ν(t)⟩` against zero.
    pub nu_nu: ComplexMomentCheck,
}

impl LagStatistics {
    pub fn pass(&self) -> bool {
        self.xi_xi.pass && self.xi_nu_causal.pass() && self.xi_nu_anticausal.pass() && self.nu_nu.pass()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStatReport {
    pub n_paths: u64,
    pub lags: Vec<LagStatistics>,
    /// Node at which the one-point statistics are taken.
    pub probe_node: usize,
    /// Sample mean of `ξ` at the probe node against zero.
    pub xi_mean: MomentCheck,
    /// Sample excess kurtosis of `ξ` at the probe node against zero.
    pub xi_excess_kurtosis: MomentCheck,
    pub pass: bool,
}

impl NoiseStatReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.lags {
            let mut push = |name: &str, c: &MomentCheck| {
                if !c.pass {
                    out.push(format!(
                        "lag {} ({:.4}): {name} estimate {:.4e} vs target {:.4e} (se {:.2e})",
                        l.lag_nodes, l.lag, c.estimate, c.target, c.standard_error
                    ));
                }
            };
            push("xi_xi", &l.xi_xi);
            push("re xi_nu causal", &l.xi_nu_causal.re);
            push("im xi_nu causal", &l.xi_nu_causal.im);
            push("re xi_nu anticausal", &l.xi_nu_anticausal.re);
            push("im xi_nu anticausal", &l.xi_nu_anticausal.im);
            push("re nu_nu", &l.nu_nu.re);
            push("im nu_nu", &l.nu_nu.im);
        }
        if !self.xi_mean.pass {
            out.push(format!("mean of xi {:.3e} (se {:.2e})", self.xi_mean.estimate, self.xi_mean.standard_error));
        }
        if !self.xi_excess_kurtosis.pass {
            out.push(format!(
                "excess kurtosis of xi {:.3e} (se {:.2e})",
                self.xi_excess_kurtosis.estimate, self.xi_excess_kurtosis.standard_error
            ));
        }
        out
    }
}

/// Number of real per-path statistics gathered per lag.
const STATS_PER_LAG: usize = 7;

/// Order-independent accumulator of per-path lag-averaged second moments.
///
/// Each path contributes one sample per statistic; the across-path spread gives
/// the standard error, so correlations along a path are accounted for.
#[derive(Debug, Clone)]
pub struct NoiseStatAccumulator {
    len: usize,
    dt: f64,
    lags: Vec<usize>,
    probe_node: usize,
    count: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    /// Power sums of ξ at the probe node.
    probe: [f64; 4],
}

impl NoiseStatAccumulator {
    pub fn new(len: usize, dt: f64, lags: &[usize]) -> Result<Self> {
        if let Some(&bad) = lags.iter().find(|&&l| l >= len) {
            return Err(Error::Input(format!("lag {bad} does not fit a grid of {len} nodes")));
        }
        let width = lags.len() * STATS_PER_LAG;
        Ok(Self {
            len,
            dt,
            lags: lags.to_vec(),
            probe_node: len / 2,
            count: 0,
            sum: vec![0.0; width],
            sum_sq: vec![0.0; width],
            probe: [0.0; 4],
        })
    }

    pub fn push(&mut self, path: &NoisePath) -> Result<()> {
        if path.len() != self.len || (path.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::Input(format!(
                "noise path {} has grid ({} nodes, dt {}) but expected ({} nodes, dt {})",
                path.seed_id,
                path.len(),
                path.dt,
                self.len,
                self.dt
            )));
        }
        let n = self.len;
        for (li, &lag) in self.lags.iter().enumerate() {
            let pairs = (n - lag) as f64;
            let mut xx = 0.0;
            let mut xn_c = Complex64::new(0.0, 0.0);
            let mut xn_a = Complex64::new(0.0, 0.0);
            let mut nn = Complex64::new(0.0, 0.0);
            for k in 0..n - lag {
                xx += path.xi[k + lag] * path.xi[k];
                xn_c += path.nu[k] * path.xi[k + lag];
                xn_a += path.nu[k + lag] * path.xi[k];
                nn += path.nu[k + lag] * path.nu[k];
            }
            let values = [
                xx / pairs,
                xn_c.re / pairs,
                xn_c.im / pairs,
                xn_a.re / pairs,
                xn_a.im / pairs,
                nn.re / pairs,
                nn.im / pairs,
            ];
            let base = li * STATS_PER_LAG;
            for (j, v) in values.iter().enumerate() {
                self.sum[base + j] += v;
                self.sum_sq[base + j] += v * v;
            }
        }
        let x = path.xi[self.probe_node];
        self.probe[0] += x;
        self.probe[1] += x * x;
        self.probe[2] += x * x * x;
        self.probe[3] += x * x * x * x;
        self.count += 1;
        Ok(())
    }

    /// Combines two accumulators; the caller fixes the combination order.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.len != other.len || self.lags != other.lags {
            return Err(Error::Input("cannot merge noise statistics over different grids or lags".into()));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        for (a, b) in self.probe.iter_mut().zip(&other.probe) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self, table: &CorrelationTable) -> Result<NoiseStatReport> {
        if table.len() < self.len {
            return Err(Error::Input(format!(
                "correlation table has {} nodes, paths have {}",
                table.len(),
                self.len
            )));
        }
        if self.count < 2 {
            return Err(Error::Input("noise statistics need at least 2 paths".into()));
        }
        let n = self.count as f64;
        let stat = |j: usize| {
            let mean = self.sum[j] / n;
            let var = ((self.sum_sq[j] - n * mean * mean) / (n - 1.0)).max(0.0);
            (mean, (var / n).sqrt())
        };
        let check = |j: usize, target: f64| {
            let (m, se) = stat(j);
            MomentCheck::new(target, m, se)
        };
        let lags: Vec<LagStatistics> = self
            .lags
            .iter()
            .enumerate()
            .map(|(li, &lag)| {
                let b = li * STATS_PER_LAG;
                let cross = if lag > 0 { 2.0 * table.im_l[lag] } else { 0.0 };
                LagStatistics {
                    lag_nodes: lag,
                    lag: lag as f64 * self.dt,
                    xi_xi: check(b, table.re_l[lag]),
                    xi_nu_causal: ComplexMomentCheck { re: check(b + 1, 0.0), im: check(b + 2, cross) },
                    xi_nu_anticausal: ComplexMomentCheck {
                        re: check(b + 3, 0.0),
                        im: check(b + 4, if lag == 0 { cross } else { 0.0 }),
                    },
                    nu_nu: ComplexMomentCheck { re: check(b + 5, 0.0), im: check(b + 6, 0.0) },
                }
            })
            .collect();

        let [s1, s2, s3, s4] = self.probe;
        let mean = s1 / n;
        let m2 = s2 / n - mean * mean;
        let m4 = s4 / n - 4.0 * mean * s3 / n + 6.0 * mean * mean * s2 / n - 3.0 * mean.powi(4);
        let var = m2 * n / (n - 1.0);
        let xi_mean = MomentCheck::new(0.0, mean, (var / n).sqrt());
        let (kurt, kurt_se) = if m2 > 0.0 {
            (m4 / (m2 * m2) - 3.0, (24.0 / n).sqrt())
        } else {
            (0.0, 0.0)
        };
        let xi_excess_kurtosis = MomentCheck::new(0.0, kurt, kurt_se);
        let pass = lags.iter().all(LagStatistics::pass) && xi_mean.pass && xi_excess_kurtosis.pass;
        Ok(NoiseStatReport {
            n_paths: self.count,
            lags,
            probe_node: self.probe_node,
            xi_mean,
            xi_excess_kurtosis,
            pass,
        })
    }
}

/// Estimates the noise second moments from a collection of paths on a common grid.
pub fn verify_noise_statistics<'a, I>(paths: I, table: &CorrelationTable, lags: &[usize]) -> Result<NoiseStatReport>
where
    I: IntoIterator<Item = &'a NoisePath>,
{
    let mut iter = paths.into_iter().peekable();
    let first = iter.peek().ok_or_else(|| Error::Input("no noise paths given".into()))?;
    let mut acc = NoiseStatAccumulator::new(first.len(), first.dt, lags)?;
    for p in iter {
        acc.push(p)?;
    }
    acc.finish(table)
}

/// `count` evenly spaced lags (in nodes) with the given stride, starting at 0.
pub fn default_lags(count: usize, stride: usize) -> Vec<usize> {
    (0..count).map(|j| j * stride).collect()
}

/// Generates `n_paths` realizations and verifies them without storing them.
///
/// Realizations are processed in fixed blocks and combined in index order, so the
/// report does not depend on the rayon pool size.
pub fn run_noise_selftest(
    generator: &NoiseGenerator,
    table: &CorrelationTable,
    master_seed: u64,
    n_paths: u64,
    lags: &[usize],
) -> Result<NoiseStatReport> {
    const BLOCK: u64 = 64;
    let n_blocks = n_paths.div_ceil(BLOCK);
    let partials: Vec<Result<NoiseStatAccumulator>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = NoiseStatAccumulator::new(generator.len(), generator.dt(), lags)?;
            let mut ws = generator.workspace();
            let mut path = NoisePath::zeros(generator.dt(), generator.len(), 0);
            for idx in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                generator.generate_into(master_seed, idx, &mut ws, &mut path);
                acc.push(&path)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = NoiseStatAccumulator::new(generator.len(), generator.dt(), lags)?;
    for p in partials {
        total.merge(&p?)?;
    }
    total.finish(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::tabulate_correlation;
    use crate::grid::TimeGrid;

    fn setup(gamma: f64) -> (BathSpec, CorrelationTable, NoiseGenerator) {
        let spec = BathSpec::new(gamma, 10.0, 5.0).unwrap();
        let table = tabulate_correlation(&spec, &TimeGrid::new(std::f64::consts::TAU, 1024).unwrap()).unwrap();
        let gen = NoiseGenerator::new(&spec, &table).unwrap();
        (spec, table, gen)
    }

    #[test]
    fn zero_coupling_gives_zero_noise() {
        let (_, _, gen) = setup(0.0);
        let p = gen.generate(7, 3);
        assert!(p.xi.iter().all(|&x| x == 0.0));
        assert!(p.nu.iter().all(|&x| x == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let (_, _, gen) = setup(0.05);
        let a = gen.generate(42, 11);
        let b = gen.generate(42, 11);
        assert_eq!(a, b);
        let c = gen.generate(42, 12);
        assert_ne!(a.xi, c.xi);
        assert_eq!(a.len(), gen.len());
        assert_eq!(a.nu.len(), gen.len());
    }

    #[test]
    fn workspace_reuse_does_not_leak_state() {
        let (_, _, gen) = setup(0.05);
        let mut ws = gen.workspace();
        let mut p = NoisePath::zeros(gen.dt(), gen.len(), 0);
        gen.generate_into(5, 1, &mut ws, &mut p);
        gen.generate_into(5, 2, &mut ws, &mut p);
        assert_eq!(p, gen.generate(5, 2));
    }

    #[test]
    fn spectrum_is_positive_and_clipping_rules_hold() {
        let (spec, _, _) = setup(0.05);
        let lambda = embedding_spectrum(&spec, 4096, 0.01).unwrap();
        assert!(lambda.iter().all(|&l| l > 0.0));
        let mut tiny = vec![1.0, -1e-12, 0.5];
        clip_spectrum(&mut tiny, 1.0).unwrap();
        assert_eq!(tiny[1], 0.0);
        let mut bad = vec![1.0, 0.2, -1e-3, 0.2];
        match clip_spectrum(&mut bad, 4.0) {
            Err(Error::NegativeSpectrum { bin, .. }) => assert_eq!(bin, 2),
            other => panic!("expected negative spectrum error, got {other:?}"),
        }
    }

    #[test]
    fn zero_coupling_selftest_passes_exactly() {
        let (_, table, gen) = setup(0.0);
        let report = run_noise_selftest(&gen, &table, 1, 200, &[0, 5, 10]).unwrap();
        assert!(report.pass);
        for l in &report.lags {
            assert_eq!(l.xi_xi.estimate, 0.0);
            assert_eq!(l.nu_nu.re.estimate, 0.0);
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let (_, table, gen) = setup(0.05);
        let a = gen.generate(1, 0);
        let mut b = gen.generate(1, 1);
        b.xi.pop();
        b.nu.pop();
        let err = verify_noise_statistics([&a, &b], &table, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(verify_noise_statistics(std::iter::empty(), &table, &[0]).is_err());
    }

    #[test]
    fn selftest_is_independent_of_pool_size() {
        let (_, table, gen) = setup(0.05);
        let lags = [0, 4, 16];
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| run_noise_selftest(&gen, &table, 9, 300, &lags)).unwrap();
        let b = three.install(|| run_noise_selftest(&gen, &table, 9, 300, &lags)).unwrap();
        assert_eq!(a, b);
    }
}
