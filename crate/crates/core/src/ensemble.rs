//! Monte Carlo average of the stochastic dynamics over noise realizations.
//!
//! Realizations are processed in fixed blocks of [`BLOCK`] indices. Within a
//! block, moments are updated in index order; blocks are pooled in block
//! order. Means are additionally kept as exact fixed-point sums, so the
//! reported mean does not depend on how the index range was split.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{tabulate_correlation, BathSpec};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::{NoiseGenerator, NoisePath};
use crate::propagator::{DensityMatrix, Dissipation, IntegratorSettings, Propagator, SystemSpec};

/// Realizations per accumulation block.
pub const BLOCK: u64 = 64;

/// Default tolerated fraction of diverged realizations.
pub const DEFAULT_DIVERGED_LIMIT: f64 = 1e-3;

/// Default hierarchy depth used by the figure presets.
pub const DEFAULT_HIERARCHY_DEPTH: usize = 3;

/// Fixed-point scale of the exact sums.
const FIXED_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

/// Values recorded per state and node: ρ entries (8), trace (2), force sample (2).
const STATE_CHANNELS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledState {
    pub label: String,
    pub rho0: DensityMatrix,
}

impl LabeledState {
    pub fn new(label: impl Into<String>, rho0: DensityMatrix) -> Self {
        Self { label: label.into(), rho0 }
    }
}

/// The six Pauli eigenstates `+x, −x, +y, −y, +z, −z`.
pub fn pauli_states() -> Vec<LabeledState> {
    let axes = [("x", [1.0, 0.0, 0.0]), ("y", [0.0, 1.0, 0.0]), ("z", [0.0, 0.0, 1.0])];
    let mut out = Vec::with_capacity(6);
    for (name, r) in axes {
        out.push(LabeledState::new(format!("+{name}"), DensityMatrix::from_bloch(r)));
        out.push(LabeledState::new(format!("-{name}"), DensityMatrix::from_bloch(r.map(|c| -c))));
    }
    out
}

/// Pairs `(+x, −x)`, `(+y, −y)`, `(+z, −z)` of [`pauli_states`].
pub fn pauli_pairs() -> Vec<[usize; 2]> {
    vec![[0, 1], [2, 3], [4, 5]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub bath: BathSpec,
    pub system: SystemSpec,
    pub states: Vec<LabeledState>,
    /// Index pairs into `states` whose Bloch-difference derivative statistics are kept.
    pub pairs: Vec<[usize; 2]>,
    pub n_realizations: u64,
    /// Index of the first realization; lets disjoint runs be merged.
    pub first_realization: u64,
    pub master_seed: u64,
    pub integrator: IntegratorSettings,
    pub dissipation: Dissipation,
    pub grid: TimeGrid,
    pub diverged_limit: f64,
}

impl EnsembleConfig {
    /// The six Pauli eigenstates and their three pairs on the standard grid.
    pub fn pauli(bath: BathSpec, system: SystemSpec, n_realizations: u64, master_seed: u64) -> Self {
        Self {
            bath,
            system,
            states: pauli_states(),
            pairs: pauli_pairs(),
            n_realizations,
            first_realization: 0,
            master_seed,
            integrator: IntegratorSettings::default(),
            dissipation: Dissipation::Hierarchy { depth: DEFAULT_HIERARCHY_DEPTH },
            grid: TimeGrid::standard(),
            diverged_limit: DEFAULT_DIVERGED_LIMIT,
        }
    }

    /// A single state on the standard grid.
    pub fn single(bath: BathSpec, system: SystemSpec, state: LabeledState, n_realizations: u64, master_seed: u64) -> Self {
        Self { states: vec![state], pairs: Vec::new(), ..Self::pauli(bath, system, n_realizations, master_seed) }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.bath.violations();
        v.extend(self.system.violations());
        if self.n_realizations < 1 {
            v.push("n_realizations must be >= 1".into());
        }
        if self.states.is_empty() {
            v.push("at least one initial state is required".into());
        }
        for s in &self.states {
            if let Err(e) = s.rho0.check_physical() {
                v.push(format!("state {}: {e}", s.label));
            }
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.iter().any(|&j| j >= self.states.len()) {
                v.push(format!("pair {i} refers to a state index outside 0..{}", self.states.len()));
            }
        }
        if self.integrator.substeps == 0 {
            v.push("integrator.substeps must be >= 1".into());
        }
        if let Dissipation::Hierarchy { depth: 0 } = self.dissipation {
            v.push("dissipation.depth must be >= 1".into());
        }
        if !(self.grid.t_end > 0.0 && self.grid.t_end.is_finite()) {
            v.push(format!("t_end must be positive, got {}", self.grid.t_end));
        }
        if self.grid.steps < 2 {
            v.push(format!("steps must be >= 2, got {}", self.grid.steps));
        }
        if !(0.0..=1.0).contains(&self.diverged_limit) {
            v.push(format!("diverged_limit must lie in [0, 1], got {}", self.diverged_limit));
        }
        if self.first_realization.checked_add(self.n_realizations).is_none() {
            v.push("realization index range overflows".into());
        }
        v
    }

    fn width(&self) -> usize {
        self.states.len() * STATE_CHANNELS + 3 * self.pairs.len()
    }

    /// Same ensemble definition, possibly different index range.
    fn compatible(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self { n_realizations: 0, first_realization: 0, ..c.clone() };
        strip(self) == strip(other)
    }
}

/// Streaming moments over a fixed layout of `nodes × width` channels, the
/// last `3 × groups` of which form 3-vectors with full covariance.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    count: u64,
    nodes: usize,
    width: usize,
    groups: usize,
    sum: Vec<i128>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    /// Off-diagonal co-moments `xy, xz, yz` per group and node.
    co: Vec<f64>,
}

#[inline]
fn to_fixed(x: f64) -> i128 {
    (x * FIXED_SCALE) as i128
}

impl Moments {
    fn new(nodes: usize, width: usize, groups: usize) -> Self {
        let n = nodes * width;
        Self {
            count: 0,
            nodes,
            width,
            groups,
            sum: vec![0; n],
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            co: vec![0.0; nodes * groups * 3],
        }
    }

    fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.nodes * self.width);
        self.count += 1;
        let n = self.count as f64;
        let scalar = self.width - 3 * self.groups;
        for k in 0..self.nodes {
            let base = k * self.width;
            for c in base..base + scalar {
                let x = sample[c];
                self.sum[c] += to_fixed(x);
                let d = x - self.mean[c];
                self.mean[c] += d / n;
                self.m2[c] += d * (x - self.mean[c]);
            }
            for g in 0..self.groups {
                let c0 = base + scalar + 3 * g;
                let x = [sample[c0], sample[c0 + 1], sample[c0 + 2]];
                let d_old = [0, 1, 2].map(|i| x[i] - self.mean[c0 + i]);
                for i in 0..3 {
                    self.sum[c0 + i] += to_fixed(x[i]);
                    self.mean[c0 + i] += d_old[i] / n;
                }
                let d_new = [0, 1, 2].map(|i| x[i] - self.mean[c0 + i]);
                for i in 0..3 {
                    self.m2[c0 + i] += d_old[i] * d_new[i];
                }
                let o = (k * self.groups + g) * 3;
                self.co[o] += d_old[0] * d_new[1];
                self.co[o + 1] += d_old[0] * d_new[2];
                self.co[o + 2] += d_old[1] * d_new[2];
            }
        }
    }

    /// Pools `other` into `self` as if its samples had been pushed after ours.
    fn merge(&mut self, other: &Self) {
        debug_assert!(self.nodes == other.nodes && self.width == other.width && self.groups == other.groups);
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let w = na * nb / n;
        let scalar = self.width - 3 * self.groups;
        for k in 0..self.nodes {
            for g in 0..self.groups {
                let c0 = k * self.width + scalar + 3 * g;
                let d = [0, 1, 2].map(|i| other.mean[c0 + i] - self.mean[c0 + i]);
                let o = (k * self.groups + g) * 3;
                self.co[o] += other.co[o] + d[0] * d[1] * w;
                self.co[o + 1] += other.co[o + 1] + d[0] * d[2] * w;
                self.co[o + 2] += other.co[o + 2] + d[1] * d[2] * w;
            }
        }
        for c in 0..self.sum.len() {
            self.sum[c] += other.sum[c];
            let d = other.mean[c] - self.mean[c];
            self.mean[c] += d * nb / n;
            self.m2[c] += other.m2[c] + d * d * w;
        }
        self.count += other.count;
    }

    /// Mean from the exact sums.
    fn exact_mean(&self, c: usize) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.sum[c] as f64) / FIXED_SCALE / self.count as f64
    }

    /// Sample variance, NaN for fewer than two samples.
    fn variance(&self, c: usize) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        (self.m2[c] / (self.count - 1) as f64).max(0.0)
    }

    fn standard_error(&self, c: usize) -> f64 {
        (self.variance(c) / self.count as f64).sqrt()
    }

    fn covariance(&self, k: usize, g: usize) -> [[f64; 3]; 3] {
        if self.count < 2 {
            return [[f64::NAN; 3]; 3];
        }
        let scalar = self.width - 3 * self.groups;
        let c0 = k * self.width + scalar + 3 * g;
        let o = (k * self.groups + g) * 3;
        let m = (self.count - 1) as f64;
        let v = |i: usize| self.m2[c0 + i] / m;
        let (xy, xz, yz) = (self.co[o] / m, self.co[o + 1] / m, self.co[o + 2] / m);
        [[v(0), xy, xz], [xy, v(1), yz], [xz, yz, v(2)]]
    }
}

/// Averaged series of one initial state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSeries {
    pub label: String,
    pub rho0: DensityMatrix,
    pub rho_bar: Vec<DensityMatrix>,
    /// Per entry, `sqrt(SE(Re)² + SE(Im)²)`.
    pub stderr: Vec<[f64; 4]>,
    /// Standard errors of `Re ρ₀₀, Im ρ₀₀, Re ρ₀₁, …, Im ρ₁₁`.
    pub stderr_parts: Vec<[f64; 8]>,
    /// Standard error of `Re Tr ρ`.
    pub trace_se: Vec<f64>,
    /// Mean of the force sample `ξ(t) Tr(σ_y ρ_Z(t))`.
    pub jq_mean: Vec<Complex64>,
    /// Standard errors of its real and imaginary parts.
    pub jq_se: Vec<f64>,
    pub jq_se_im: Vec<f64>,
}

/// Statistics of the Bloch-vector difference derivative of a state pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSeries {
    pub states: [usize; 2],
    pub labels: [String; 2],
    /// Mean of `d/dt (r_a − r_b)`.
    pub derivative_mean: Vec<[f64; 3]>,
    /// Per-realization covariance of `d/dt (r_a − r_b)`.
    pub derivative_cov: Vec<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub config: EnsembleConfig,
    pub t_grid: Vec<f64>,
    pub states: Vec<StateSeries>,
    pub pairs: Vec<PairSeries>,
    /// Realizations that entered the averages.
    pub n_used: u64,
    pub diverged_count: u64,
    pub first_diverged: Option<u64>,
    /// False when fewer than two realizations were averaged.
    pub stderr_defined: bool,
    #[serde(skip)]
    moments: Moments,
}

impl EnsembleResult {
    fn from_moments(config: EnsembleConfig, moments: Moments, diverged_count: u64, first_diverged: Option<u64>) -> Self {
        let t_grid = config.grid.times();
        let nodes = t_grid.len();
        let width = config.width();
        let mut states = Vec::with_capacity(config.states.len());
        for (s, ls) in config.states.iter().enumerate() {
            let mut series = StateSeries {
                label: ls.label.clone(),
                rho0: ls.rho0,
                rho_bar: Vec::with_capacity(nodes),
                stderr: Vec::with_capacity(nodes),
                stderr_parts: Vec::with_capacity(nodes),
                trace_se: Vec::with_capacity(nodes),
                jq_mean: Vec::with_capacity(nodes),
                jq_se: Vec::with_capacity(nodes),
                jq_se_im: Vec::with_capacity(nodes),
            };
            for k in 0..nodes {
                let c = k * width + s * STATE_CHANNELS;
                let m = |i: usize| moments.exact_mean(c + i);
                let se = |i: usize| moments.standard_error(c + i);
                series.rho_bar.push(DensityMatrix(
                    [0, 1, 2, 3].map(|e| Complex64::new(m(2 * e), m(2 * e + 1))),
                ));
                let parts: [f64; 8] = std::array::from_fn(se);
                series.stderr.push([0, 1, 2, 3].map(|e| parts[2 * e].hypot(parts[2 * e + 1])));
                series.stderr_parts.push(parts);
                series.trace_se.push(se(8));
                series.jq_mean.push(Complex64::new(m(10), m(11)));
                series.jq_se.push(se(10));
                series.jq_se_im.push(se(11));
            }
            states.push(series);
        }
        let scalar = config.states.len() * STATE_CHANNELS;
        let pairs = config
            .pairs
            .iter()
            .enumerate()
            .map(|(g, &[a, b])| PairSeries {
                states: [a, b],
                labels: [config.states[a].label.clone(), config.states[b].label.clone()],
                derivative_mean: (0..nodes)
                    .map(|k| [0, 1, 2].map(|i| moments.exact_mean(k * width + scalar + 3 * g + i)))
                    .collect(),
                derivative_cov: (0..nodes).map(|k| moments.covariance(k, g)).collect(),
            })
            .collect();
        Self {
            t_grid,
            states,
            pairs,
            n_used: moments.count,
            diverged_count,
            first_diverged,
            stderr_defined: moments.count >= 2,
            config,
            moments,
        }
    }

    pub fn state(&self, label: &str) -> Option<&StateSeries> {
        self.states.iter().find(|s| s.label == label)
    }

    /// Attempted realizations, including diverged ones.
    pub fn n_attempted(&self) -> u64 {
        self.n_used + self.diverged_count
    }

    /// Writes one CSV per state: `t`, real and imaginary parts of each entry,
    /// per-entry standard errors and the force-sample mean and error.
    pub fn write_state_csv<W: Write>(&self, state: usize, mut w: W) -> std::io::Result<()> {
        let s = &self.states[state];
        writeln!(
            w,
            "t,re_rho_00,im_rho_00,re_rho_01,im_rho_01,re_rho_10,im_rho_10,re_rho_11,im_rho_11,\
             stderr_00,stderr_01,stderr_10,stderr_11,jq_mean_re,jq_mean_im,jq_se"
        )?;
        for (k, t) in self.t_grid.iter().enumerate() {
            write!(w, "{t:e}")?;
            for z in s.rho_bar[k].0 {
                write!(w, ",{:e},{:e}", z.re, z.im)?;
            }
            for e in s.stderr[k] {
                write!(w, ",{e:e}")?;
            }
            writeln!(w, ",{:e},{:e},{:e}", s.jq_mean[k].re, s.jq_mean[k].im, s.jq_se[k])?;
        }
        Ok(())
    }

    pub fn save_state_csv(&self, state: usize, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_state_csv(state, &mut f)?;
        f.flush()
    }

    /// JSON sidecar: configuration, seed, realization counts and provenance.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "master_seed": self.config.master_seed,
            "realizations": {
                "first": self.config.first_realization,
                "requested": self.config.n_realizations,
                "used": self.n_used,
                "diverged": self.diverged_count,
                "first_diverged": self.first_diverged,
            },
            "states": self.states.iter().map(|s| &s.label).collect::<Vec<_>>(),
            "provenance": provenance(),
        })
    }
}

/// Code version and wall-clock timestamp.
pub fn provenance() -> serde_json::Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp_unix": now,
    })
}

/// Inputs `I/2, σ_x/2, σ_y/2, σ_z/2`; every state is a combination of these.
fn operator_basis() -> [DensityMatrix; 4] {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    [[one, zero, zero, zero], [zero, one, zero, zero], [zero, zero, one, zero], [zero, zero, zero, one]]
        .map(DensityMatrix::from_pauli)
}

fn combine(c: &[Complex64; 4], basis: &[DensityMatrix]) -> DensityMatrix {
    let mut out = DensityMatrix::zero();
    for (ci, b) in c.iter().zip(basis) {
        out = out + *b * *ci;
    }
    out
}

struct Runner<'a> {
    config: &'a EnsembleConfig,
    generator: &'a NoiseGenerator,
    propagator: Propagator,
    coefficients: Vec<[Complex64; 4]>,
}

struct BlockOutcome {
    moments: Moments,
    diverged: Vec<u64>,
}

impl Runner<'_> {
    /// Runs one realization into `buf`; `Ok(false)` if it diverged.
    fn realization(&self, index: u64, path: &mut NoisePath, ws: &mut crate::noise::NoiseWorkspace, buf: &mut [f64]) -> Result<bool> {
        self.generator.generate_into(self.config.master_seed, index, ws, path);
        let mut inputs = operator_basis();
        let width = self.config.width();
        let n_states = self.config.states.len();
        let scalar = n_states * STATE_CHANNELS;
        let coeffs = &self.coefficients;
        let pairs = &self.config.pairs;
        let mut derivs = vec![DensityMatrix::zero(); n_states];
        let outcome = self.propagator.run(&mut inputs, path, |node| {
            let row = &mut buf[node.k * width..(node.k + 1) * width];
            for (s, c) in coeffs.iter().enumerate() {
                let rho = combine(c, node.states);
                derivs[s] = combine(c, node.derivatives);
                let force: Complex64 = c.iter().zip(node.force_sigma_y).map(|(a, f)| a * f).sum();
                let tr = rho.trace();
                let o = s * STATE_CHANNELS;
                for (e, z) in rho.0.iter().enumerate() {
                    row[o + 2 * e] = z.re;
                    row[o + 2 * e + 1] = z.im;
                }
                row[o + 8] = tr.re;
                row[o + 9] = tr.im;
                row[o + 10] = force.re;
                row[o + 11] = force.im;
            }
            for (g, &[a, b]) in pairs.iter().enumerate() {
                let d = (derivs[a] - derivs[b]).pauli_expectations();
                for i in 0..3 {
                    row[scalar + 3 * g + i] = d[i].re;
                }
            }
        });
        match outcome {
            Ok(()) => Ok(true),
            Err(Error::Diverged { .. }) => Ok(false),
            Err(e) => Err(Error::Realization { index, source: Box::new(e) }),
        }
    }

    fn block(&self, range: std::ops::Range<u64>) -> Result<BlockOutcome> {
        let nodes = self.config.grid.len();
        let width = self.config.width();
        let mut moments = Moments::new(nodes, width, self.config.pairs.len());
        let mut ws = self.generator.workspace();
        let mut path = NoisePath::zeros(self.generator.dt(), self.generator.len(), 0);
        let mut buf = vec![0.0; nodes * width];
        let mut diverged = Vec::new();
        for index in range {
            if self.realization(index, &mut path, &mut ws, &mut buf)? {
                moments.push(&buf);
            } else {
                diverged.push(index);
            }
        }
        Ok(BlockOutcome { moments, diverged })
    }
}

/// Averages realizations `first_realization .. first_realization + n_realizations`.
///
/// Blocks run on the current rayon pool; the result is bitwise independent
/// of the pool size.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleResult> {
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::Input(v.join("; ")));
    }
    let table = tabulate_correlation(&config.bath, &config.grid)?;
    let generator = NoiseGenerator::new(&config.bath, &table)?;
    run_ensemble_with(config, &generator)
}

/// As [`run_ensemble`], reusing a generator built for `config.bath` and `config.grid`.
pub fn run_ensemble_with(config: &EnsembleConfig, generator: &NoiseGenerator) -> Result<EnsembleResult> {
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::Input(v.join("; ")));
    }
    if generator.len() != config.grid.len() || (generator.dt() - config.grid.dt()).abs() > 1e-12 * config.grid.dt() {
        return Err(Error::Input("noise generator grid does not match the ensemble grid".into()));
    }
    let propagator = Propagator::new(
        config.system,
        config.integrator,
        config.dissipation,
        config.bath.gamma,
        config.bath.omega_c,
    )?;
    let runner = Runner {
        config,
        generator,
        propagator,
        coefficients: config.states.iter().map(|s| s.rho0.pauli_coefficients()).collect(),
    };

    let start = config.first_realization;
    let end = start + config.n_realizations;
    let n_blocks = config.n_realizations.div_ceil(BLOCK);
    let chunk = (rayon::current_num_threads() as u64 * 2).max(1);
    let mut total = Moments::new(config.grid.len(), config.width(), config.pairs.len());
    let mut diverged: Vec<u64> = Vec::new();
    let mut b0 = 0;
    while b0 < n_blocks {
        let b1 = (b0 + chunk).min(n_blocks);
        let outcomes: Vec<Result<BlockOutcome>> = (b0..b1)
            .into_par_iter()
            .map(|b| runner.block(start + b * BLOCK..(start + (b + 1) * BLOCK).min(end)))
            .collect();
        for o in outcomes {
            let o = o?;
            total.merge(&o.moments);
            diverged.extend(o.diverged);
        }
        b0 = b1;
    }
    let diverged_count = diverged.len() as u64;
    let fraction = diverged_count as f64 / config.n_realizations as f64;
    if diverged_count > 0 && (fraction > config.diverged_limit || total.count == 0) {
        return Err(Error::TooManyDiverged {
            diverged: diverged_count,
            total: config.n_realizations,
            fraction,
            limit: config.diverged_limit,
            first_index: diverged[0],
        });
    }
    Ok(EnsembleResult::from_moments(config.clone(), total, diverged_count, diverged.first().copied()))
}

/// Pools results of the same ensemble over disjoint index ranges.
pub fn merge(results: &[EnsembleResult]) -> Result<EnsembleResult> {
    let first = results.first().ok_or_else(|| Error::Input("nothing to merge".into()))?;
    let mut order: Vec<&EnsembleResult> = results.iter().collect();
    order.sort_by_key(|r| r.config.first_realization);
    for r in &order {
        if !r.config.compatible(&first.config) {
            return Err(Error::Input("results to merge differ in configuration".into()));
        }
    }
    for w in order.windows(2) {
        let a_end = w[0].config.first_realization + w[0].config.n_realizations;
        if w[1].config.first_realization < a_end {
            return Err(Error::Input(format!(
                "realization ranges overlap: {}..{} and {}..",
                w[0].config.first_realization, a_end, w[1].config.first_realization
            )));
        }
    }
    let mut moments = order[0].moments.clone();
    let mut diverged = order[0].diverged_count;
    let mut first_diverged = order[0].first_diverged;
    let mut requested = order[0].config.n_realizations;
    for r in &order[1..] {
        moments.merge(&r.moments);
        diverged += r.diverged_count;
        first_diverged = first_diverged.or(r.first_diverged);
        requested += r.config.n_realizations;
    }
    let mut config = order[0].config.clone();
    config.n_realizations = requested;
    Ok(EnsembleResult::from_moments(config, moments, diverged, first_diverged))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config(n: u64) -> EnsembleConfig {
        let bath = BathSpec::new(0.05, 10.0, 5.0).unwrap();
        let mut c = EnsembleConfig::pauli(bath, SystemSpec::undriven(), n, 3);
        c.grid = TimeGrid::new(1.0, 128).unwrap();
        c
    }

    #[test]
    fn moments_match_two_pass() {
        let xs: Vec<[f64; 4]> = (0..37)
            .map(|i| {
                let t = i as f64;
                [(t * 0.37).sin() + 3.0, (t * 1.3).cos(), (t * 0.11).sin() * 1e-3, t * 0.01]
            })
            .collect();
        let mut a = Moments::new(1, 4, 1);
        let mut b = Moments::new(1, 4, 1);
        for (i, x) in xs.iter().enumerate() {
            if i < 20 { a.push(x) } else { b.push(x) }
        }
        a.merge(&b);
        let n = xs.len() as f64;
        for c in 0..4 {
            let mean = xs.iter().map(|x| x[c]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((a.exact_mean(c) - mean).abs() < 1e-14 * mean.abs().max(1.0));
            assert!((a.variance(c) - var).abs() <= 1e-12 * var, "channel {c}");
        }
        let cov = a.covariance(0, 0);
        let m: Vec<f64> = (1..4).map(|c| xs.iter().map(|x| x[c]).sum::<f64>() / n).collect();
        let two_pass = |i: usize, j: usize| {
            xs.iter().map(|x| (x[i + 1] - m[i]) * (x[j + 1] - m[j])).sum::<f64>() / (n - 1.0)
        };
        for i in 0..3 {
            for j in 0..3 {
                let e = two_pass(i, j);
                assert!((cov[i][j] - e).abs() <= 1e-12 * e.abs().max(1e-300) + 1e-20, "{i}{j}");
            }
        }
    }

    #[test]
    fn merge_order_does_not_change_exact_sums() {
        let mut parts: Vec<Moments> = (0..3).map(|_| Moments::new(1, 1, 0)).collect();
        for i in 0..30 {
            parts[i % 3].push(&[0.1 * i as f64 + 1e-9]);
        }
        let mut ab = parts[0].clone();
        ab.merge(&parts[1]);
        ab.merge(&parts[2]);
        let mut bc = parts[1].clone();
        bc.merge(&parts[2]);
        let mut a_bc = parts[0].clone();
        a_bc.merge(&bc);
        assert_eq!(ab.exact_mean(0).to_bits(), a_bc.exact_mean(0).to_bits());
    }

    #[test]
    fn violations_are_listed_together() {
        let mut c = quiet_config(0);
        c.pairs.push([0, 9]);
        c.integrator.substeps = 0;
        let v = c.violations();
        assert!(v.len() >= 3, "{v:?}");
        assert!(v.iter().any(|s| s.contains("n_realizations")));
    }

    #[test]
    fn single_realization_has_undefined_errors() {
        let r = run_ensemble(&quiet_config(1)).unwrap();
        assert!(!r.stderr_defined);
        assert!(r.states[0].stderr[5][0].is_nan());
        assert_eq!(r.n_used, 1);
    }

    #[test]
    fn zero_coupling_matches_unitary_evolution() {
        let mut c = quiet_config(5);
        c.bath = BathSpec::new(0.0, 10.0, 5.0).unwrap();
        let r = run_ensemble(&c).unwrap();
        let s = &r.states[4];
        for (k, t) in r.t_grid.iter().enumerate() {
            let b = s.rho_bar[k].bloch();
            assert!((b[2] - t.cos()).abs() < 1e-9 && (b[1] - t.sin()).abs() < 1e-9);
            assert!(s.stderr[k].iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn basis_reconstruction_matches_direct_propagation() {
        let c = quiet_config(1);
        let r = run_ensemble(&c).unwrap();
        let table = tabulate_correlation(&c.bath, &c.grid).unwrap();
        let path = NoiseGenerator::new(&c.bath, &table).unwrap().generate(c.master_seed, 0);
        let p = Propagator::new(c.system, c.integrator, c.dissipation, c.bath.gamma, c.bath.omega_c).unwrap();
        let mut states: Vec<DensityMatrix> = c.states.iter().map(|s| s.rho0).collect();
        p.run(&mut states, &path, |_| {}).unwrap();
        for (s, rho) in states.iter().enumerate() {
            let d = (*rho - *r.states[s].rho_bar.last().unwrap()).norm();
            assert!(d < 1e-12, "state {s}: {d}");
        }
    }

    #[test]
    fn too_many_divergences_fail_the_run() {
        let mut c = quiet_config(8);
        c.bath = BathSpec::new(2.0, 10.0, 10.0).unwrap();
        c.dissipation = Dissipation::NuNoise;
        c.grid = TimeGrid::new(6.0, 512).unwrap();
        c.diverged_limit = 0.0;
        match run_ensemble(&c) {
            Err(Error::TooManyDiverged { diverged, first_index, .. }) => {
                assert!(diverged >= 1);
                assert!(first_index < 8);
            }
            other => panic!("expected divergence failure, got {:?}", other.map(|r| r.diverged_count)),
        }
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let r = run_ensemble(&quiet_config(2)).unwrap();
        let mut out = Vec::new();
        r.write_state_csv(0, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,re_rho_00,im_rho_00"));
        assert!(header.ends_with("jq_mean_re,jq_mean_im,jq_se"));
        assert_eq!(lines.count(), r.t_grid.len());
        assert_eq!(header.split(',').count(), 16);
    }
}
