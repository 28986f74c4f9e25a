//! Per-realization stochastic Liouville–von Neumann dynamics of a driven qubit.
//!
//! ```text
//! dρ/dt = −i[H_S(t), ρ] + i ξ(t)[σ_z, ρ] + (i/2) ν(t){σ_z, ρ}
//! H_S(t) = −(ω/2) σ_x + λ₀ sin(ωt) σ_z
//! ```
//!
//! Individual realizations are neither Hermitian nor trace preserving; only
//! the ensemble mean is a density matrix.

use std::io::Write;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoisePath;

/// Realizations whose matrix norm exceeds this are reported as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Complex 2×2 matrix in row-major order `[ρ00, ρ01, ρ10, ρ11]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix(pub [Complex64; 4]);

impl Default for DensityMatrix {
    fn default() -> Self {
        Self([ZERO; 4])
    }
}

impl DensityMatrix {
    pub fn new(r00: Complex64, r01: Complex64, r10: Complex64, r11: Complex64) -> Self {
        Self([r00, r01, r10, r11])
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `(I + r·σ)/2`; pure when `|r| = 1`.
    pub fn from_bloch(r: [f64; 3]) -> Self {
        let [x, y, z] = r;
        Self([
            Complex64::new(0.5 * (1.0 + z), 0.0),
            Complex64::new(0.5 * x, -0.5 * y),
            Complex64::new(0.5 * x, 0.5 * y),
            Complex64::new(0.5 * (1.0 - z), 0.0),
        ])
    }

    /// Pure state at polar angle `theta` and azimuth `phi` on the Bloch sphere.
    pub fn pure(theta: f64, phi: f64) -> Self {
        Self::from_bloch([theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()])
    }

    pub fn maximally_mixed() -> Self {
        Self::from_bloch([0.0; 3])
    }

    pub fn trace(&self) -> Complex64 {
        self.0[0] + self.0[3]
    }

    /// Expectation values `Tr(σ_i ρ)` of the linear functional (complex in general).
    pub fn pauli_expectations(&self) -> [Complex64; 3] {
        let [a, b, c, d] = self.0;
        [b + c, I * (b - c), a - d]
    }

    /// `Tr(σ_y ρ)`.
    pub fn sigma_y(&self) -> Complex64 {
        I * (self.0[1] - self.0[2])
    }

    /// `[Tr ρ, Tr σ_x ρ, Tr σ_y ρ, Tr σ_z ρ]`, so that `ρ = (p₀ I + p·σ)/2`.
    pub fn pauli_coefficients(&self) -> [Complex64; 4] {
        let [s0, s1, s2] = self.pauli_expectations();
        [self.trace(), s0, s1, s2]
    }

    /// Inverse of [`pauli_coefficients`](Self::pauli_coefficients).
    pub fn from_pauli(p: [Complex64; 4]) -> Self {
        let [p0, px, py, pz] = p;
        Self([(p0 + pz) * 0.5, (px - I * py) * 0.5, (px + I * py) * 0.5, (p0 - pz) * 0.5])
    }

    /// Real Bloch vector of the Hermitian part.
    pub fn bloch(&self) -> [f64; 3] {
        let p = self.pauli_expectations();
        [p[0].re, p[1].re, p[2].re]
    }

    pub fn adjoint(&self) -> Self {
        let [a, b, c, d] = self.0;
        Self([a.conj(), c.conj(), b.conj(), d.conj()])
    }

    pub fn hermitian_part(&self) -> Self {
        (*self + self.adjoint()) * 0.5
    }

    /// Largest entry of `|ρ − ρ†|`.
    pub fn hermiticity_error(&self) -> f64 {
        let a = self.adjoint();
        self.0.iter().zip(a.0.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let h = self.hermitian_part();
        let mean = 0.5 * (h.0[0].re + h.0[3].re);
        let half_gap = (0.25 * (h.0[0].re - h.0[3].re).powi(2) + h.0[1].norm_sqr()).sqrt();
        [mean - half_gap, mean + half_gap]
    }

    /// Hermitian, unit trace and positive semidefinite (eigenvalues ≥ −1e-12).
    pub fn check_physical(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > 1e-12 {
            return Err(Error::Input(format!("initial state is not Hermitian (deviation {herm:.2e})")));
        }
        let tr = self.trace();
        if (tr - 1.0).norm() > 1e-12 {
            return Err(Error::Input(format!("initial state has trace {tr}, expected 1")));
        }
        let ev = self.eigenvalues();
        if ev[0] < -1e-12 {
            return Err(Error::Input(format!("initial state has negative eigenvalue {}", ev[0])));
        }
        Ok(())
    }
}

impl Add for DensityMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2], self.0[3] + o.0[3]])
    }
}

impl Sub for DensityMatrix {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2], self.0[3] - o.0[3]])
    }
}

impl Mul<f64> for DensityMatrix {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self([self.0[0] * s, self.0[1] * s, self.0[2] * s, self.0[3] * s])
    }
}

impl Mul<Complex64> for DensityMatrix {
    type Output = Self;
    fn mul(self, s: Complex64) -> Self {
        Self([self.0[0] * s, self.0[1] * s, self.0[2] * s, self.0[3] * s])
    }
}

/// Resonant periodic drive `λ₀ sin(ωt) σ_z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    pub lambda_0: f64,
    pub enabled: bool,
}

impl DriveSpec {
    pub fn off() -> Self {
        Self { lambda_0: 0.0, enabled: false }
    }

    pub fn resonant(lambda_0: f64) -> Self {
        Self { lambda_0, enabled: true }
    }
}

/// Two-level system `H_S(t) = −(ω/2)σ_x + λ₀ sin(ωt) σ_z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    /// System frequency; one in natural units.
    pub omega: f64,
    pub drive: DriveSpec,
}

impl SystemSpec {
    pub fn undriven() -> Self {
        Self { omega: 1.0, drive: DriveSpec::off() }
    }

    pub fn driven(lambda_0: f64) -> Self {
        Self { omega: 1.0, drive: DriveSpec::resonant(lambda_0) }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            v.push(format!("system omega must be >= 0, got {}", self.omega));
        }
        if !(self.drive.lambda_0 >= 0.0 && self.drive.lambda_0.is_finite()) {
            v.push(format!("drive lambda_0 must be >= 0, got {}", self.drive.lambda_0));
        }
        v
    }

    /// Coefficient of `σ_z` in `H_S(t)`.
    #[inline]
    pub fn drive_field(&self, t: f64) -> f64 {
        if self.drive.enabled {
            self.drive.lambda_0 * (self.omega * t).sin()
        } else {
            0.0
        }
    }
}

/// Right-hand side of the stochastic Liouville equation for one realization.
#[inline]
pub fn sln_rhs(rho: &DensityMatrix, t: f64, xi_t: Complex64, nu_t: Complex64, system: &SystemSpec) -> DensityMatrix {
    rhs_with_field(rho, 0.5 * system.omega, xi_t - system.drive_field(t), nu_t)
}

/// `i(ω/2)[σ_x, ρ] + i f [σ_z, ρ] + i ν diag(ρ00, −ρ11)` where `f = ξ − λ(t)`.
#[inline]
fn rhs_with_field(rho: &DensityMatrix, half_omega: f64, field: Complex64, nu: Complex64) -> DensityMatrix {
    let [a, b, c, d] = rho.0;
    let h = I * half_omega;
    let f = I * field * 2.0;
    let n = I * nu;
    DensityMatrix([
        h * (c - b) + n * a,
        h * (d - a) + f * b,
        h * (a - d) - f * c,
        h * (b - c) - n * d,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Classical fourth-order Runge–Kutta.
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    /// Integration steps per noise-grid interval; the step is `dt / substeps`.
    pub substeps: usize,
    pub scheme: Scheme,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self { substeps: 1, scheme: Scheme::Rk4 }
    }
}

/// Sampled output of one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t_grid: Vec<f64>,
    pub rho_series: Vec<DensityMatrix>,
    /// `Tr(σ_y ρ_Z(t_k))` of the unnormalized state.
    pub sigma_y_series: Vec<Complex64>,
    pub xi_series: Vec<f64>,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "t,re(rho00),im(rho00),re(rho01),im(rho01),re(rho10),im(rho10),re(rho11),im(rho11),re(sy),im(sy)"
        )?;
        for k in 0..self.t_grid.len() {
            write!(w, "{}", self.t_grid[k])?;
            for c in self.rho_series[k].0 {
                write!(w, ",{},{}", c.re, c.im)?;
            }
            writeln!(w, ",{},{}", self.sigma_y_series[k].re, self.sigma_y_series[k].im)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// How the dissipative (`Im L`) part of the bath influence is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
#[derive(Default)]
pub enum Dissipation {
    /// The `ν` noise term of the stochastic Liouville equation.
    #[default]
    NuNoise,
    /// `ν` averaged out exactly: auxiliary matrices carry the causal memory of
    /// `Im L(t) = −(γω_c³/4) t e^{−ω_c t}`, truncated at total order `depth`.
    Hierarchy { depth: usize },
}


/// Auxiliary-matrix layout for [`Dissipation::Hierarchy`].
///
/// With `B₂(t) = ∫₀ᵗ e^{−a(t−u)} Q₊(u) du` and `B₁(t) = ∫₀ᵗ (t−u) e^{−a(t−u)} Q₊(u) du`
/// (`a = ω_c`, `Q₊ = {σ_z, ·}`, `Q₋ = [σ_z, ·]`), the matrix with indices `(n₁, n₂)` obeys
///
/// ```text
/// dρₙ/dt = (𝓛_ξ − a(n₁+n₂)) ρₙ − i c Q₋ ρ_{n₁+1,n₂} + n₁ ρ_{n₁−1,n₂+1} + n₂ Q₊ ρ_{n₁,n₂−1}
/// ```
///
/// where `c = −γa³/4`; `ρ₀₀` is the physical state.
#[derive(Debug, Clone, PartialEq)]
struct Hierarchy {
    decay: f64,
    coupling: f64,
    /// `(n1, n2)` per slot; slot 0 is `(0, 0)`.
    indices: Vec<(usize, usize)>,
    /// Slot of `(n1 + 1, n2)`.
    up: Vec<Option<usize>>,
    /// Slot of `(n1 − 1, n2 + 1)`.
    shift: Vec<Option<usize>>,
    /// Slot of `(n1, n2 − 1)`.
    down: Vec<Option<usize>>,
    /// Slot of `(1, 0)`, which carries the bath force on the physical state.
    first: Option<usize>,
}

impl Hierarchy {
    fn new(depth: usize, gamma: f64, omega_c: f64) -> Self {
        let mut indices = Vec::new();
        for level in 0..=depth {
            for n1 in (0..=level).rev() {
                indices.push((n1, level - n1));
            }
        }
        let find = |n1: usize, n2: usize| indices.iter().position(|&x| x == (n1, n2));
        let up = indices.iter().map(|&(a, b)| find(a + 1, b)).collect();
        let shift = indices.iter().map(|&(a, b)| if a > 0 { find(a - 1, b + 1) } else { None }).collect();
        let down = indices.iter().map(|&(a, b)| if b > 0 { find(a, b - 1) } else { None }).collect();
        let first = find(1, 0);
        Self { decay: omega_c, coupling: -0.25 * gamma * omega_c.powi(3), indices, up, shift, down, first }
    }

    fn len(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    NuNoise,
    Hierarchy(Hierarchy),
}

/// Values handed to the per-node callback of [`Propagator::run`].
pub struct NodeView<'a> {
    pub k: usize,
    pub t: f64,
    pub xi: f64,
    /// Physical (top-level) states at `t_k`.
    pub states: &'a [DensityMatrix],
    /// Their time derivatives at `t_k`.
    pub derivatives: &'a [DensityMatrix],
    /// Per state, the bath-force correlation sample whose mean times `−ω` is the
    /// heat flux; `ξ Tr(σ_y ρ)` plus the auxiliary-matrix force for the hierarchy.
    pub force_sigma_y: &'a [Complex64],
}

/// Fixed-step integrator for the stochastic Liouville dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub system: SystemSpec,
    pub integrator: IntegratorSettings,
    pub dissipation: Dissipation,
    model: Model,
}

impl Propagator {
    /// `gamma` and `omega_c` are only used by [`Dissipation::Hierarchy`].
    pub fn new(
        system: SystemSpec,
        integrator: IntegratorSettings,
        dissipation: Dissipation,
        gamma: f64,
        omega_c: f64,
    ) -> Result<Self> {
        let v = system.violations();
        if !v.is_empty() {
            return Err(Error::Input(v.join("; ")));
        }
        if integrator.substeps == 0 {
            return Err(Error::Input("integrator needs at least one substep per grid interval".into()));
        }
        let model = match dissipation {
            Dissipation::NuNoise => Model::NuNoise,
            Dissipation::Hierarchy { depth } => {
                if depth == 0 {
                    return Err(Error::Input("hierarchy depth must be at least 1".into()));
                }
                Model::Hierarchy(Hierarchy::new(depth, gamma, omega_c))
            }
        };
        Ok(Self { system, integrator, dissipation, model })
    }

    /// Explicit-`ν` propagator.
    pub fn nu_noise(system: SystemSpec, integrator: IntegratorSettings) -> Self {
        Self { system, integrator, dissipation: Dissipation::NuNoise, model: Model::NuNoise }
    }

    /// Whether the `ν` samples of a path are read.
    pub fn uses_nu(&self) -> bool {
        matches!(self.model, Model::NuNoise)
    }

    /// Propagates several initial states along the same noise path.
    ///
    /// `on_node` is called at every grid node. States are integrated
    /// independently; sharing the path is what correlates them.
    pub fn run<F>(&self, states: &mut [DensityMatrix], path: &NoisePath, on_node: F) -> Result<()>
    where
        F: FnMut(NodeView<'_>),
    {
        if path.len() < 2 {
            return Err(Error::Input("noise path needs at least 2 nodes".into()));
        }
        match &self.model {
            Model::NuNoise => self.run_nu(states, path, on_node),
            Model::Hierarchy(h) => self.run_hierarchy(h, states, path, on_node),
        }
    }

    fn run_nu<F>(&self, states: &mut [DensityMatrix], path: &NoisePath, mut on_node: F) -> Result<()>
    where
        F: FnMut(NodeView<'_>),
    {
        let half_omega = 0.5 * self.system.omega;
        let n = states.len();
        let mut force = vec![ZERO; n];
        let mut y = states.to_vec();
        integrate(
            &self.system,
            self.integrator.substeps,
            path,
            &mut y,
            |y, g, nu, out| {
                for (o, r) in out.iter_mut().zip(y) {
                    *o = rhs_with_field(r, half_omega, Complex64::new(g, 0.0), nu);
                }
            },
            |k, y, d| {
                let xi = path.xi[k];
                for (f, r) in force.iter_mut().zip(y) {
                    *f = r.sigma_y() * xi;
                }
                on_node(NodeView { k, t: path.time(k), xi, states: y, derivatives: d, force_sigma_y: &force });
            },
            |y| y.iter().map(DensityMatrix::norm).fold(0.0, f64::max),
        )?;
        states.copy_from_slice(&y);
        Ok(())
    }

    fn run_hierarchy<F>(&self, h: &Hierarchy, states: &mut [DensityMatrix], path: &NoisePath, mut on_node: F) -> Result<()>
    where
        F: FnMut(NodeView<'_>),
    {
        // Each input splits into Hermitian and anti-Hermitian parts; both
        // evolve as real Pauli-coefficient vectors `v` with `X = (v₀ + v·σ)/2`.
        let n = states.len();
        let slots = h.len();
        let mut parts: Vec<(usize, Option<usize>)> = Vec::with_capacity(n);
        let mut y: Vec<Pauli> = Vec::new();
        for rho in states.iter() {
            let p = rho.pauli_coefficients();
            let re = y.len() / slots;
            y.push(p.map(|c| c.re));
            y.extend(std::iter::repeat_n([0.0; 4], slots - 1));
            let im = if p.iter().any(|c| c.im != 0.0) {
                let idx = y.len() / slots;
                y.push(p.map(|c| c.im));
                y.extend(std::iter::repeat_n([0.0; 4], slots - 1));
                Some(idx)
            } else {
                None
            };
            parts.push((re, im));
        }
        let omega = self.system.omega;
        let c = h.coupling;
        let zero = DensityMatrix::zero();
        let mut top = vec![zero; n];
        let mut top_d = vec![zero; n];
        let mut force = vec![ZERO; n];
        let combine = |v: &[Pauli], re: usize, im: Option<usize>, slot: usize| -> [Complex64; 4] {
            let a = v[re * slots + slot];
            let b = im.map_or([0.0; 4], |i| v[i * slots + slot]);
            [0, 1, 2, 3].map(|q| Complex64::new(a[q], b[q]))
        };
        integrate(
            &self.system,
            self.integrator.substeps,
            path,
            &mut y,
            |y, g, _, out| {
                for (ys, os) in y.chunks_exact(slots).zip(out.chunks_exact_mut(slots)) {
                    for slot in 0..slots {
                        let (n1, n2) = h.indices[slot];
                        let [_, vx, vy, vz] = ys[slot];
                        let mut d = [0.0, 2.0 * g * vy, omega * vz - 2.0 * g * vx, -omega * vy];
                        let level = n1 + n2;
                        if level > 0 {
                            let decay = h.decay * level as f64;
                            for (x, v) in d.iter_mut().zip(ys[slot]) {
                                *x -= decay * v;
                            }
                        }
                        if let Some(u) = h.up[slot] {
                            let [_, ux, uy, _] = ys[u];
                            d[1] -= 2.0 * c * uy;
                            d[2] += 2.0 * c * ux;
                        }
                        if let Some(s) = h.shift[slot] {
                            let m = n1 as f64;
                            for (x, v) in d.iter_mut().zip(ys[s]) {
                                *x += m * v;
                            }
                        }
                        if let Some(w) = h.down[slot] {
                            let [w0, _, _, wz] = ys[w];
                            let m = 2.0 * n2 as f64;
                            d[0] += m * wz;
                            d[3] += m * w0;
                        }
                        os[slot] = d;
                    }
                }
            },
            |k, y, d| {
                let xi = path.xi[k];
                for (s, &(re, im)) in parts.iter().enumerate() {
                    top[s] = DensityMatrix::from_pauli(combine(y, re, im, 0));
                    top_d[s] = DensityMatrix::from_pauli(combine(d, re, im, 0));
                    let sy = combine(y, re, im, 0)[2];
                    force[s] = match h.first {
                        Some(first) => sy * xi - combine(y, re, im, first)[2] * c,
                        None => sy * xi,
                    };
                }
                on_node(NodeView { k, t: path.time(k), xi, states: &top, derivatives: &top_d, force_sigma_y: &force });
            },
            |y| {
                y.iter()
                    .step_by(slots)
                    .map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt())
                    .fold(0.0, f64::max)
            },
        )?;
        for (rho, &(re, im)) in states.iter_mut().zip(&parts) {
            *rho = DensityMatrix::from_pauli(combine(&y, re, im, 0));
        }
        Ok(())
    }
}

type Pauli = [f64; 4];

trait Axpy: Copy {
    fn axpy(self, a: f64, x: Self) -> Self;
    fn rk4(self, h6: f64, k1: Self, k2: Self, k3: Self, k4: Self) -> Self;
}

impl Axpy for DensityMatrix {
    #[inline]
    fn axpy(self, a: f64, x: Self) -> Self {
        self + x * a
    }
    #[inline]
    fn rk4(self, h6: f64, k1: Self, k2: Self, k3: Self, k4: Self) -> Self {
        self + (k1 + (k2 + k3) * 2.0 + k4) * h6
    }
}

impl Axpy for Pauli {
    #[inline]
    fn axpy(self, a: f64, x: Self) -> Self {
        [0, 1, 2, 3].map(|i| self[i] + a * x[i])
    }
    #[inline]
    fn rk4(self, h6: f64, k1: Self, k2: Self, k3: Self, k4: Self) -> Self {
        [0, 1, 2, 3].map(|i| self[i] + h6 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]))
    }
}

/// RK4 over the grid of `path` with noise interpolated linearly between nodes.
///
/// `rhs(y, ξ − λ(t), ν, out)`; `emit(k, y, dy/dt)` at every node; `norm(y)`
/// is compared with [`DIVERGENCE_NORM`] after every interval.
fn integrate<T: Axpy>(
    system: &SystemSpec,
    substeps: usize,
    path: &NoisePath,
    y: &mut [T],
    mut rhs: impl FnMut(&[T], f64, Complex64, &mut [T]),
    mut emit: impl FnMut(usize, &[T], &[T]),
    norm: impl Fn(&[T]) -> f64,
) -> Result<()> {
    let len = y.len();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (y.to_vec(), y.to_vec(), y.to_vec(), y.to_vec(), y.to_vec());
    let h = path.dt / substeps as f64;
    let field_at = |t: f64, xi: f64| xi - system.drive_field(t);
    for k in 0..path.len() - 1 {
        let t_k = path.time(k);
        let (xi0, xi1) = (path.xi[k], path.xi[k + 1]);
        let (nu0, nu1) = (path.nu[k], path.nu[k + 1]);
        for j in 0..substeps {
            let f0 = j as f64 / substeps as f64;
            let fm = (j as f64 + 0.5) / substeps as f64;
            let f1 = (j as f64 + 1.0) / substeps as f64;
            let t0 = t_k + j as f64 * h;
            let lerp_xi = |f: f64| xi0 + (xi1 - xi0) * f;
            let lerp_nu = |f: f64| nu0 + (nu1 - nu0) * f;
            let g0 = field_at(t0, lerp_xi(f0));
            let gm = field_at(t0 + 0.5 * h, lerp_xi(fm));
            let g1 = field_at(t0 + h, lerp_xi(f1));

            rhs(y, g0, lerp_nu(f0), &mut k1);
            if j == 0 {
                emit(k, y, &k1);
            }
            for i in 0..len {
                tmp[i] = y[i].axpy(0.5 * h, k1[i]);
            }
            rhs(&tmp, gm, lerp_nu(fm), &mut k2);
            for i in 0..len {
                tmp[i] = y[i].axpy(0.5 * h, k2[i]);
            }
            rhs(&tmp, gm, lerp_nu(fm), &mut k3);
            for i in 0..len {
                tmp[i] = y[i].axpy(h, k3[i]);
            }
            rhs(&tmp, g1, lerp_nu(f1), &mut k4);
            for i in 0..len {
                y[i] = y[i].rk4(h / 6.0, k1[i], k2[i], k3[i], k4[i]);
            }
        }
        let nrm = norm(y);
        if !(nrm <= DIVERGENCE_NORM) {
            return Err(Error::Diverged { index: path.seed_id, time: path.time(k + 1), norm: nrm });
        }
    }
    let last = path.len() - 1;
    rhs(y, field_at(path.time(last), path.xi[last]), path.nu[last], &mut k1);
    emit(last, y, &k1);
    Ok(())
}

/// Integrates one realization from a physical initial state.
pub fn propagate(
    rho0: &DensityMatrix,
    path: &NoisePath,
    system: &SystemSpec,
    integrator: &IntegratorSettings,
) -> Result<Trajectory> {
    rho0.check_physical()?;
    if integrator.substeps == 0 {
        return Err(Error::Input("integrator needs at least one substep per grid interval".into()));
    }
    let n = path.len();
    let mut rho_series = Vec::with_capacity(n);
    let mut sigma_y_series = Vec::with_capacity(n);
    let mut states = [*rho0];
    Propagator::nu_noise(*system, *integrator).run(&mut states, path, |node| {
        rho_series.push(node.states[0]);
        sigma_y_series.push(node.states[0].sigma_y());
    })?;
    Ok(Trajectory {
        t_grid: (0..n).map(|k| path.time(k)).collect(),
        rho_series,
        sigma_y_series,
        xi_series: path.xi.clone(),
    })
}
