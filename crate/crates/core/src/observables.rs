//! Trace distance, information flow, backflow windows, the BLP measure,
//! information loss and gain, and the heat flux.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::ensemble::{EnsembleResult, StateSeries};
use crate::error::{Error, Result};
use crate::grid::uniform_spacing;
use crate::propagator::DensityMatrix;

/// Largest non-Hermiticity accepted by [`trace_distance`].
pub const HERMITIAN_TOLERANCE: f64 = 1e-9;

/// Lower bound on backflow thresholds, which matters where the standard error
/// vanishes. The end nodes are further raised by [`endpoint_resolution`].
pub const EPSILON_FLOOR: f64 = 1e-6;

/// Default threshold multiplier on the standard error of `Δ`.
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Backflow windows separated by fewer nodes than this are merged.
pub const MERGE_GAP_NODES: usize = 3;

/// `½ Σ |λᵢ(ρ₁ − ρ₂)|` for Hermitian inputs.
///
/// Inputs that deviate from Hermiticity by at most [`HERMITIAN_TOLERANCE`] are
/// symmetrized; larger deviations are rejected.
pub fn trace_distance(rho1: &DensityMatrix, rho2: &DensityMatrix) -> Result<f64> {
    for (name, r) in [("first", rho1), ("second", rho2)] {
        let e = r.hermiticity_error();
        if e > HERMITIAN_TOLERANCE {
            return Err(Error::Input(format!(
                "{name} argument of trace_distance is not Hermitian (deviation {e:.3e})"
            )));
        }
        if e > 0.0 {
            log::warn!("symmetrizing nearly Hermitian matrix (deviation {e:.3e})");
        }
    }
    let diff = rho1.hermitian_part() - rho2.hermitian_part();
    let [lo, hi] = diff.eigenvalues();
    Ok(0.5 * (lo.abs() + hi.abs()))
}

/// Trace distance computed from Hermitian parts, for statistical averages
/// whose anti-Hermitian part is sampling noise.
fn hermitian_distance(rho1: &DensityMatrix, rho2: &DensityMatrix) -> f64 {
    let diff = rho1.hermitian_part() - rho2.hermitian_part();
    let [lo, hi] = diff.eigenvalues();
    0.5 * (lo.abs() + hi.abs())
}

/// Local least-squares polynomial smoother.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SavitzkyGolay {
    /// Odd number of nodes in the fitting window.
    pub window: usize,
    pub order: usize,
}

impl Default for SavitzkyGolay {
    fn default() -> Self {
        Self { window: 31, order: 3 }
    }
}

impl SavitzkyGolay {
    fn check(&self, len: usize) -> Result<()> {
        if self.window.is_multiple_of(2) || self.window <= self.order {
            return Err(Error::Input(format!(
                "smoothing window must be odd and larger than the order, got window {} order {}",
                self.window, self.order
            )));
        }
        if len < self.window {
            return Err(Error::Input(format!("series of {len} nodes is shorter than the smoothing window {}", self.window)));
        }
        Ok(())
    }

    /// Weights of the centred least-squares fit over `window` nodes.
    fn weights(window: usize, order: usize) -> Vec<f64> {
        let p = order.min(window - 1) + 1;
        let half = (window / 2) as f64;
        let x: Vec<f64> = (0..window).map(|j| if half > 0.0 { (j as f64 - half) / half } else { 0.0 }).collect();
        let mut a = vec![vec![0.0; p]; p];
        for xi in &x {
            for r in 0..p {
                for c in 0..p {
                    a[r][c] += xi.powi((r + c) as i32);
                }
            }
        }
        let mut target = vec![0.0; p];
        target[0] = 1.0;
        let z = solve(a, target);
        x.iter().map(|xi| (0..p).map(|r| z[r] * xi.powi(r as i32)).sum()).collect()
    }

    /// Smoothed copy of `y`.
    ///
    /// Every node uses a centred window; within half a window of either end
    /// the window shrinks symmetrically, down to the raw value at the end nodes.
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y.len())?;
        let half = self.window / 2;
        let n = y.len();
        let tables: Vec<Vec<f64>> = (0..=half).map(|h| Self::weights(2 * h + 1, self.order)).collect();
        Ok((0..n)
            .map(|k| {
                let h = half.min(k).min(n - 1 - k);
                tables[h].iter().zip(&y[k - h..=k + h]).map(|(a, b)| a * b).sum()
            })
            .collect())
    }
}

/// Gaussian elimination with partial pivoting for the small normal equations.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Time derivative of `d` by central differences (second-order one-sided at
/// the ends), optionally after smoothing.
pub fn information_flow(d: &[f64], t: &[f64], smoothing: Option<SavitzkyGolay>) -> Result<Vec<f64>> {
    if d.len() != t.len() {
        return Err(Error::Input(format!("series length {} does not match grid length {}", d.len(), t.len())));
    }
    if d.len() < 3 {
        return Err(Error::Input(format!("information flow needs at least 3 nodes, got {}", d.len())));
    }
    let dt = uniform_spacing(t)?;
    let smoothed;
    let y = match smoothing {
        Some(sg) => {
            smoothed = sg.apply(d)?;
            &smoothed[..]
        }
        None => d,
    };
    let n = y.len();
    let mut out = vec![0.0; n];
    for k in 1..n - 1 {
        out[k] = (y[k + 1] - y[k - 1]) / (2.0 * dt);
    }
    out[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dt);
    out[n - 1] = (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * dt);
    Ok(out)
}

/// Interval on which the information flow exceeds its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    /// Interpolated threshold crossings.
    pub t_start: f64,
    pub t_end: f64,
    /// First and last node inside the window.
    pub first_node: usize,
    pub last_node: usize,
}

impl Window {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Maximal intervals with `Δ > ε`; gaps shorter than [`MERGE_GAP_NODES`] are closed.
///
/// `epsilon` holds one threshold per node.
pub fn backflow_windows(delta: &[f64], t: &[f64], epsilon: &[f64]) -> Result<Vec<Window>> {
    if delta.len() != t.len() || epsilon.len() != t.len() {
        return Err(Error::Input("information flow, grid and threshold lengths differ".into()));
    }
    if let Some(e) = epsilon.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Input(format!("backflow threshold must be positive, got {e}")));
    }
    let above: Vec<bool> = delta.iter().zip(epsilon).map(|(d, e)| d > e).collect();
    let excess = |k: usize| delta[k] - epsilon[k];
    let crossing = |a: usize, b: usize| {
        let (fa, fb) = (excess(a), excess(b));
        t[a] + (t[b] - t[a]) * fa / (fa - fb)
    };
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < above.len() {
        if above[k] {
            let start = k;
            while k + 1 < above.len() && above[k + 1] {
                k += 1;
            }
            runs.push((start, k));
        }
        k += 1;
    }
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for r in runs {
        match merged.last_mut() {
            Some(last) if r.0 - last.1 - 1 < MERGE_GAP_NODES => last.1 = r.1,
            _ => merged.push(r),
        }
    }
    Ok(merged
        .into_iter()
        .map(|(a, b)| Window {
            t_start: if a == 0 { t[0] } else { crossing(a - 1, a) },
            t_end: if b + 1 == t.len() { t[b] } else { crossing(b, b + 1) },
            first_node: a,
            last_node: b,
        })
        .collect())
}

/// Linear interpolation of `y` at time `x` on the grid `t`.
fn interpolate(y: &[f64], t: &[f64], x: f64) -> f64 {
    if x <= t[0] {
        return y[0];
    }
    let n = t.len();
    if x >= t[n - 1] {
        return y[n - 1];
    }
    let k = t.partition_point(|&v| v <= x).clamp(1, n - 1);
    let f = (x - t[k - 1]) / (t[k] - t[k - 1]);
    y[k - 1] + f * (y[k] - y[k - 1])
}

/// Trapezoid integral of the piecewise-linear `y` over `[a, b]`.
fn integrate_between(y: &[f64], t: &[f64], a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut xs = vec![a];
    xs.extend(t.iter().copied().filter(|&v| v > a && v < b));
    xs.push(b);
    xs.windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (interpolate(y, t, w[0]) + interpolate(y, t, w[1])))
        .sum()
}

/// Integral of the positive part of `Δ` over the backflow windows.
pub fn positive_area(delta: &[f64], t: &[f64], windows: &[Window]) -> f64 {
    let positive: Vec<f64> = delta.iter().map(|d| d.max(0.0)).collect();
    windows.iter().map(|w| integrate_between(&positive, t, w.t_start, w.t_end)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossGain {
    /// `D(t_onset) − D(0)`, with `t_onset = t_end` when there is no backflow.
    pub i_loss: f64,
    /// Rise of `D` across the first backflow window.
    pub i_gain: f64,
    pub first_backflow_time: Option<f64>,
}

/// Information lost before the first backflow window and gained within it.
pub fn info_loss_gain(d: &[f64], delta: &[f64], t: &[f64], epsilon: &[f64]) -> Result<LossGain> {
    let windows = backflow_windows(delta, t, epsilon)?;
    Ok(loss_gain_from_windows(d, t, &windows))
}

fn loss_gain_from_windows(d: &[f64], t: &[f64], windows: &[Window]) -> LossGain {
    match windows.first() {
        None => LossGain { i_loss: d[d.len() - 1] - d[0], i_gain: 0.0, first_backflow_time: None },
        Some(w) => {
            let d_on = interpolate(d, t, w.t_start);
            let d_off = interpolate(d, t, w.t_end);
            LossGain { i_loss: d_on - d[0], i_gain: (d_off - d_on).max(0.0), first_backflow_time: Some(w.t_start) }
        }
    }
}

/// Truncation-error estimates of the one-sided end derivatives of
/// [`information_flow`]: the gap between the second- and first-order formulas.
pub fn endpoint_resolution(d: &[f64], t: &[f64], smoothing: Option<SavitzkyGolay>) -> Result<[f64; 2]> {
    let delta = information_flow(d, t, smoothing)?;
    let dt = uniform_spacing(t)?;
    let y = match smoothing {
        Some(sg) => sg.apply(d)?,
        None => d.to_vec(),
    };
    let n = y.len();
    Ok([((y[1] - y[0]) / dt - delta[0]).abs(), ((y[n - 1] - y[n - 2]) / dt - delta[n - 1]).abs()])
}

/// Per-node thresholds `max(sigma · se, EPSILON_FLOOR)`.
pub fn thresholds(se: &[f64], sigma: f64) -> Vec<f64> {
    se.iter().map(|s| if s.is_finite() { (sigma * s).max(EPSILON_FLOOR) } else { f64::INFINITY }).collect()
}

/// Analysis options for a state pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowOptions {
    pub smoothing: Option<SavitzkyGolay>,
    /// Threshold in units of the standard error of `Δ`.
    pub sigma: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { smoothing: Some(SavitzkyGolay::default()), sigma: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfoFlowReport {
    pub labels: [String; 2],
    pub t_grid: Vec<f64>,
    pub d_series: Vec<f64>,
    pub delta_series: Vec<f64>,
    /// Standard error of `Δ`.
    pub delta_se: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub backflow_windows: Vec<Window>,
    /// Integral of `Δ` over the backflow windows.
    pub blp_value: f64,
    pub i_delta_loss: f64,
    pub i_delta_gain: f64,
    pub first_backflow_time: Option<f64>,
}

impl InfoFlowReport {
    /// Builds the report from `D(t)` and per-realization derivative statistics
    /// of the Bloch difference `r₁ − r₂` (mean and covariance, `n` samples).
    pub fn from_series(
        labels: [String; 2],
        t: &[f64],
        rdiff: &[[f64; 3]],
        rdiff_dot_cov: &[[[f64; 3]; 3]],
        n: u64,
        options: &FlowOptions,
    ) -> Result<Self> {
        let raw: Vec<f64> = rdiff.iter().map(|r| 0.5 * norm3(r)).collect();
        let delta = information_flow(&raw, t, options.smoothing)?;
        let d: Vec<f64> = raw.iter().copied().map(clamp_distance).collect();
        let delta_se: Vec<f64> = rdiff
            .iter()
            .zip(rdiff_dot_cov)
            .map(|(r, cov)| {
                let len = norm3(r);
                if len == 0.0 || n < 2 {
                    return if n < 2 { f64::NAN } else { 0.0 };
                }
                let u = r.map(|c| c / len);
                let mut q = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        q += u[i] * cov[i][j] * u[j];
                    }
                }
                0.5 * (q.max(0.0) / n as f64).sqrt()
            })
            .collect();
        let mut epsilon = thresholds(&delta_se, options.sigma);
        let [first, last] = endpoint_resolution(&raw, t, options.smoothing)?;
        let n = epsilon.len();
        epsilon[0] = epsilon[0].max(first);
        epsilon[n - 1] = epsilon[n - 1].max(last);
        let windows = backflow_windows(&delta, t, &epsilon)?;
        let lg = loss_gain_from_windows(&d, t, &windows);
        Ok(Self {
            labels,
            t_grid: t.to_vec(),
            blp_value: positive_area(&delta, t, &windows),
            d_series: d,
            delta_series: delta,
            delta_se,
            epsilon,
            backflow_windows: windows,
            i_delta_loss: lg.i_loss,
            i_delta_gain: lg.i_gain,
            first_backflow_time: lg.first_backflow_time,
        })
    }

    /// `t, D, Delta, window_flag`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,D,Delta,window_flag")?;
        for k in 0..self.t_grid.len() {
            let flag = self.backflow_windows.iter().any(|win| (win.first_node..=win.last_node).contains(&k));
            writeln!(w, "{:e},{:e},{:e},{}", self.t_grid[k], self.d_series[k], self.delta_series[k], u8::from(flag))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "labels": self.labels,
            "blp_value": self.blp_value,
            "I_loss": self.i_delta_loss,
            "I_gain": self.i_delta_gain,
            "onset_time": self.first_backflow_time,
            "backflow_windows": self.backflow_windows,
        })
    }
}

/// Sampling noise can push an estimated distance above 1; the excess is clipped.
fn clamp_distance(d: f64) -> f64 {
    if d > 1.0 {
        log::info!("clipping estimated trace distance {d} to 1");
    }
    d.clamp(0.0, 1.0)
}

fn norm3(r: &[f64; 3]) -> f64 {
    (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
}

/// Information-flow report for pair `index` of an ensemble.
pub fn analyze_pair(result: &EnsembleResult, index: usize, options: &FlowOptions) -> Result<InfoFlowReport> {
    let pair = result
        .pairs
        .get(index)
        .ok_or_else(|| Error::Input(format!("ensemble has no pair {index}")))?;
    let [a, b] = pair.states;
    let (sa, sb) = (&result.states[a], &result.states[b]);
    let rdiff: Vec<[f64; 3]> = sa.rho_bar.iter().zip(&sb.rho_bar).map(|(x, y)| (*x - *y).bloch()).collect();
    InfoFlowReport::from_series(pair.labels.clone(), &result.t_grid, &rdiff, &pair.derivative_cov, result.n_used, options)
}

/// Trace-distance series of two ensemble states.
pub fn distance_series(a: &StateSeries, b: &StateSeries) -> Vec<f64> {
    a.rho_bar.iter().zip(&b.rho_bar).map(|(x, y)| clamp_distance(hermitian_distance(x, y))).collect()
}

/// Antipodal pure pair `±n(θ, φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AntipodalPair {
    pub theta: f64,
    pub phi: f64,
}

impl AntipodalPair {
    pub fn direction(&self) -> [f64; 3] {
        [self.theta.sin() * self.phi.cos(), self.theta.sin() * self.phi.sin(), self.theta.cos()]
    }

    pub fn states(&self) -> (DensityMatrix, DensityMatrix) {
        let n = self.direction();
        (DensityMatrix::from_bloch(n), DensityMatrix::from_bloch(n.map(|c| -c)))
    }

    /// The same pair with its two states exchanged.
    pub fn swapped(&self) -> Self {
        Self { theta: std::f64::consts::PI - self.theta, phi: self.phi + std::f64::consts::PI }
    }
}

/// `n_phi × n_theta` grid with `θ_j = jπ/n_theta`, `φ_i = 2πi/n_phi`.
pub fn bloch_grid(n_phi: usize, n_theta: usize) -> Vec<AntipodalPair> {
    let mut out = Vec::with_capacity(n_phi * n_theta);
    for i in 0..n_phi {
        for j in 0..n_theta {
            out.push(AntipodalPair {
                theta: j as f64 * std::f64::consts::PI / n_theta as f64,
                phi: i as f64 * std::f64::consts::TAU / n_phi as f64,
            });
        }
    }
    out
}

/// Produces the information-flow report of an antipodal pair.
pub trait PairDynamics {
    fn flow(&self, pair: &AntipodalPair) -> Result<InfoFlowReport>;
}

/// Pair dynamics reconstructed from an ensemble over the three Pauli pairs.
///
/// The Bloch difference of `±n` is `Σᵢ nᵢ (r₊ᵢ − r₋ᵢ)` by linearity. Its
/// derivative variance along a unit vector `u` is bounded by
/// `(Σᵢ |nᵢ| sqrt(λ_max(Cᵢ)))²`, which is used as the (conservative) error.
pub struct PauliReconstruction<'a> {
    result: &'a EnsembleResult,
    pair_of_axis: [usize; 3],
    options: FlowOptions,
}

impl<'a> PauliReconstruction<'a> {
    pub fn new(result: &'a EnsembleResult, options: FlowOptions) -> Result<Self> {
        let mut pair_of_axis = [usize::MAX; 3];
        for (p, ps) in result.pairs.iter().enumerate() {
            let [a, b] = ps.states;
            let (ra, rb) = (result.states[a].rho0.bloch(), result.states[b].rho0.bloch());
            for axis in 0..3 {
                let mut e = [0.0; 3];
                e[axis] = 1.0;
                let ok = (0..3).all(|i| (ra[i] - e[i]).abs() < 1e-12 && (rb[i] + e[i]).abs() < 1e-12);
                if ok {
                    pair_of_axis[axis] = p;
                }
            }
        }
        if pair_of_axis.contains(&usize::MAX) {
            return Err(Error::Input("ensemble does not contain all three (+, −) Pauli pairs".into()));
        }
        Ok(Self { result, pair_of_axis, options })
    }
}

fn max_eigenvalue_sym3(m: &[[f64; 3]; 3]) -> f64 {
    // Trigonometric solution for real symmetric 3×3 matrices.
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        return m[0][0].max(m[1][1]).max(m[2][2]);
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = |i: usize, j: usize| (m[i][j] - if i == j { q } else { 0.0 }) / p;
    let det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let r = (det / 2.0).clamp(-1.0, 1.0);
    q + 2.0 * p * (r.acos() / 3.0).cos()
}

impl PairDynamics for PauliReconstruction<'_> {
    fn flow(&self, pair: &AntipodalPair) -> Result<InfoFlowReport> {
        let n = pair.direction();
        let res = self.result;
        let nodes = res.t_grid.len();
        let mut rdiff = vec![[0.0; 3]; nodes];
        let mut sd = vec![0.0; nodes];
        for axis in 0..3 {
            let p = &res.pairs[self.pair_of_axis[axis]];
            let [a, b] = p.states;
            for k in 0..nodes {
                let r = (res.states[a].rho_bar[k] - res.states[b].rho_bar[k]).bloch();
                for i in 0..3 {
                    rdiff[k][i] += n[axis] * r[i];
                }
                sd[k] += n[axis].abs() * max_eigenvalue_sym3(&p.derivative_cov[k]).max(0.0).sqrt();
            }
        }
        // An isotropic covariance with variance sd² reproduces the bound for any direction.
        let cov: Vec<[[f64; 3]; 3]> =
            sd.iter().map(|s| { let v = s * s; [[v, 0.0, 0.0], [0.0, v, 0.0], [0.0, 0.0, v]] }).collect();
        let labels = [
            format!("n(theta={:.4},phi={:.4})", pair.theta, pair.phi),
            format!("-n(theta={:.4},phi={:.4})", pair.theta, pair.phi),
        ];
        InfoFlowReport::from_series(labels, &res.t_grid, &rdiff, &cov, res.n_used, &self.options)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlpResult {
    pub value: f64,
    pub argmax: AntipodalPair,
    pub per_pair: Vec<(AntipodalPair, f64)>,
}

/// Largest positive-area integral over the pair grid.
pub fn blp_measure<D: PairDynamics + ?Sized>(grid: &[AntipodalPair], dynamics: &D) -> Result<BlpResult> {
    if grid.is_empty() {
        return Err(Error::Input("BLP pair grid is empty".into()));
    }
    let mut per_pair = Vec::with_capacity(grid.len());
    for p in grid {
        per_pair.push((*p, dynamics.flow(p)?.blp_value));
    }
    let (argmax, value) = per_pair
        .iter()
        .copied()
        .fold((grid[0], f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
    Ok(BlpResult { value, argmax, per_pair })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatFluxSeries {
    pub label: String,
    pub t_grid: Vec<f64>,
    /// Heat flux from the system into the bath.
    pub jq: Vec<f64>,
    pub jq_imag_residual: Vec<f64>,
    pub se: Vec<f64>,
    /// Standard error of the imaginary residual.
    pub residual_se: Vec<f64>,
}

impl HeatFluxSeries {
    /// `t, jq, jq_se, jq_imag_residual`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,jq,jq_se,jq_imag_residual")?;
        for k in 0..self.t_grid.len() {
            writeln!(w, "{:e},{:e},{:e},{:e}", self.t_grid[k], self.jq[k], self.se[k], self.jq_imag_residual[k])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()
    }

    /// Trapezoid integral of `jq` over the whole grid and a conservative error
    /// (errors added linearly, since nodes are correlated).
    pub fn integral(&self) -> (f64, f64) {
        let mut v = 0.0;
        let mut e = 0.0;
        for k in 1..self.t_grid.len() {
            let h = 0.5 * (self.t_grid[k] - self.t_grid[k - 1]);
            v += h * (self.jq[k] + self.jq[k - 1]);
            e += h * (self.se[k] + self.se[k - 1]);
        }
        (v, e)
    }

    /// Maximal intervals with `jq > sigma · se`.
    pub fn positive_intervals(&self, sigma: f64) -> Result<Vec<Window>> {
        backflow_windows(&self.jq, &self.t_grid, &thresholds(&self.se, sigma))
    }
}

/// `jq(t) = −ω Re E[ξ(t) Tr(σ_y ρ_Z(t))]`; the imaginary part is kept as a residual.
pub fn heat_flux(state: &StateSeries, t_grid: &[f64], omega: f64) -> HeatFluxSeries {
    HeatFluxSeries {
        label: state.label.clone(),
        t_grid: t_grid.to_vec(),
        jq: state.jq_mean.iter().map(|z| -omega * z.re).collect(),
        jq_imag_residual: state.jq_mean.iter().map(|z| -omega * z.im).collect(),
        se: state.jq_se.iter().map(|s| omega * s).collect(),
        residual_se: state.jq_se_im.iter().map(|s| omega * s).collect(),
    }
}

/// Time overlap of information backflow and positive heat flux.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapStatistic {
    pub label: String,
    pub backflow_time: f64,
    pub positive_flux_time: f64,
    pub intersection: f64,
    pub union: f64,
    /// `intersection / union`; zero when both sets are empty.
    pub jaccard: f64,
}

fn interval_overlap(a: &[Window], b: &[Window]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += (x.t_end.min(y.t_end) - x.t_start.max(y.t_start)).max(0.0);
        }
    }
    total
}

/// Compares backflow windows with intervals where `jq` is significantly positive.
pub fn overlap_statistic(windows: &[Window], flux: &HeatFluxSeries, sigma: f64) -> Result<OverlapStatistic> {
    let positive = flux.positive_intervals(sigma)?;
    let backflow_time: f64 = windows.iter().map(Window::duration).sum();
    let positive_flux_time: f64 = positive.iter().map(Window::duration).sum();
    let intersection = interval_overlap(windows, &positive);
    let union = backflow_time + positive_flux_time - intersection;
    Ok(OverlapStatistic {
        label: flux.label.clone(),
        backflow_time,
        positive_flux_time,
        intersection,
        union,
        jaccard: if union > 0.0 { intersection / union } else { 0.0 },
    })
}
