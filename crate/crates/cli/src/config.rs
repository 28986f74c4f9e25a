//! Experiment configuration files.
//!
//! A configuration is a TOML document. Every field is optional at parse time so
//! that [`ExperimentConfig::violations`] can report all problems at once; the
//! checked form is [`Experiment`].

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinflux::bath::{BathSpec, QuadratureSettings};
use spinflux::ensemble::{DEFAULT_DIVERGED_LIMIT, DEFAULT_HIERARCHY_DEPTH};
use spinflux::grid::TimeGrid;
use spinflux::noise::default_lags;
use spinflux::observables::{FlowOptions, SavitzkyGolay, DEFAULT_SIGMA};
use spinflux::propagator::{Dissipation, DriveSpec, IntegratorSettings, Scheme, SystemSpec};

use crate::failure::Failure;

pub const PRESET_NAMES: [&str; 4] = ["fig2a", "fig2b", "fig3", "fig4"];

/// Built-in configuration file for a figure preset.
pub fn preset_source(name: &str) -> Option<&'static str> {
    match name {
        "fig2a" => Some(include_str!("../presets/fig2a.toml")),
        "fig2b" => Some(include_str!("../presets/fig2b.toml")),
        "fig3" => Some(include_str!("../presets/fig3.toml")),
        "fig4" => Some(include_str!("../presets/fig4.toml")),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BathTable,
    NoiseSelftest,
    PairDynamics,
    HeatFlux,
    LossGainSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::BathTable => "bath-table",
            ExperimentKind::NoiseSelftest => "noise-selftest",
            ExperimentKind::PairDynamics => "pair-dynamics",
            ExperimentKind::HeatFlux => "heat-flux",
            ExperimentKind::LossGainSweep => "loss-gain-sweep",
        }
    }

    fn stochastic(self) -> bool {
        !matches!(self, ExperimentKind::BathTable)
    }

    fn ensemble(self) -> bool {
        matches!(self, ExperimentKind::PairDynamics | ExperimentKind::HeatFlux | ExperimentKind::LossGainSweep)
    }
}

/// A single value or a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn values(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSection {
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub omega_c: Option<f64>,
    pub quadrature: Option<QuadratureSettings>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    /// Drive amplitude; zero switches the drive off. A list runs one case per value.
    pub lambda_0: Option<OneOrMany>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_end: Option<f64>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DissipationKind {
    Hierarchy,
    NuNoise,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub dissipation: Option<DissipationKind>,
    pub depth: Option<usize>,
    pub substeps: Option<usize>,
    pub diverged_limit: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Backflow threshold in standard errors of `Δ`.
    pub sigma: Option<f64>,
    /// Savitzky–Golay window in nodes; zero disables smoothing.
    pub smoothing_window: Option<usize>,
    pub smoothing_order: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestSection {
    pub n_paths: Option<u64>,
    pub lags: Option<usize>,
    pub lag_stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// One sweep over `betas` at the bath's `gamma` and one over `gammas` at its `beta`.
    Anchored,
    /// Every `(gamma, beta)` combination.
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub betas: Option<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
    pub mode: Option<SweepMode>,
}

/// Parsed, unchecked configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub n_realizations: Option<u64>,
    pub master_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Pauli axes whose eigenstate pairs are simulated.
    pub pairs: Option<Vec<String>>,
    #[serde(default)]
    pub bath: BathSection,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub drive: DriveSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub selftest: SelftestSection,
    pub sweep: Option<SweepSection>,
}

/// Values supplied on the command line; they take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub kind: Option<ExperimentKind>,
    pub master_seed: Option<u64>,
    pub n_realizations: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

fn violation(field: impl Into<String>, constraint: impl Into<String>) -> Violation {
    Violation { field: field.into(), constraint: constraint.into() }
}

/// One point of an experiment: a bath and a drive amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Case {
    pub bath: BathSpec,
    pub lambda_0: f64,
}

impl Case {
    pub fn system(&self, omega: f64) -> SystemSpec {
        let drive = if self.lambda_0 == 0.0 { DriveSpec::off() } else { DriveSpec::resonant(self.lambda_0) };
        SystemSpec { omega, drive }
    }
}

/// Fully checked experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub bath: BathSpec,
    pub omega: f64,
    pub lambdas: Vec<f64>,
    pub axes: Vec<char>,
    pub n_realizations: u64,
    pub master_seed: u64,
    pub grid: TimeGrid,
    pub integrator: IntegratorSettings,
    pub dissipation: Dissipation,
    pub diverged_limit: f64,
    pub flow: FlowOptions,
    pub selftest_paths: u64,
    pub selftest_lags: Vec<usize>,
    pub sweep: Vec<Case>,
}

impl Experiment {
    /// The cases of a pair-dynamics or heat-flux run, one per drive amplitude.
    pub fn cases(&self) -> Vec<Case> {
        self.lambdas.iter().map(|&lambda_0| Case { bath: self.bath, lambda_0 }).collect()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self, Failure> {
        let text = preset_source(name).ok_or_else(|| {
            Failure::Config(vec![violation("preset", format!("unknown preset {name:?}; expected one of {PRESET_NAMES:?}"))])
        })?;
        Self::parse(text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.kind.is_some() {
            self.kind = o.kind;
        }
        if o.master_seed.is_some() {
            self.master_seed = o.master_seed;
        }
        if o.n_realizations.is_some() {
            self.n_realizations = o.n_realizations;
        }
        if o.output_dir.is_some() {
            self.output_dir = o.output_dir.clone();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<Violation> {
        match self.check() {
            Ok(_) => Vec::new(),
            Err(v) => v,
        }
    }

    pub fn resolve(&self) -> Result<Experiment, Failure> {
        self.check().map_err(Failure::Config)
    }

    fn check(&self) -> Result<Experiment, Vec<Violation>> {
        let mut v = Vec::new();

        let kind = self.kind.unwrap_or_else(|| {
            v.push(violation("kind", "required; one of bath-table, noise-selftest, pair-dynamics, heat-flux, loss-gain-sweep"));
            ExperimentKind::BathTable
        });

        let output_dir = match &self.output_dir {
            Some(p) => {
                check_output_dir(p, &mut v);
                p.clone()
            }
            None => {
                v.push(violation("output_dir", "required (or pass --out)"));
                PathBuf::new()
            }
        };

        let bath = check_bath(&self.bath, &mut v);

        let omega = self.system.omega.unwrap_or(1.0);
        if !(omega >= 0.0 && omega.is_finite()) {
            v.push(violation("system.omega", format!("must be finite and >= 0, got {omega}")));
        }

        let lambdas = self.drive.lambda_0.as_ref().map(OneOrMany::values).unwrap_or_else(|| vec![0.0]);
        if lambdas.is_empty() {
            v.push(violation("drive.lambda_0", "list must not be empty"));
        }
        for l in &lambdas {
            if !(*l >= 0.0 && l.is_finite()) {
                v.push(violation("drive.lambda_0", format!("must be finite and >= 0, got {l}")));
            }
        }

        let axes = check_pairs(self.pairs.as_deref(), &mut v);

        let n_realizations = match self.n_realizations {
            Some(0) => {
                v.push(violation("n_realizations", "must be >= 1, got 0"));
                0
            }
            Some(n) => n,
            None if kind.ensemble() => {
                v.push(violation("n_realizations", format!("required for kind {}", kind.name())));
                0
            }
            None => 0,
        };

        let master_seed = match self.master_seed {
            Some(s) => s,
            None if kind.stochastic() => {
                v.push(violation("master_seed", format!("required for kind {} (or pass --seed)", kind.name())));
                0
            }
            None => 0,
        };

        let t_end = self.grid.t_end.unwrap_or(std::f64::consts::TAU);
        let steps = self.grid.steps.unwrap_or(4096);
        if !(t_end > 0.0 && t_end.is_finite()) {
            v.push(violation("grid.t_end", format!("must be finite and > 0, got {t_end}")));
        }
        if steps < 2 {
            v.push(violation("grid.steps", format!("must be >= 2, got {steps}")));
        }
        let grid = TimeGrid { t_end, steps };

        let dissipation = match self.solver.dissipation.unwrap_or(DissipationKind::Hierarchy) {
            DissipationKind::NuNoise => {
                if self.solver.depth.is_some() {
                    v.push(violation("solver.depth", "only meaningful with dissipation = \"hierarchy\""));
                }
                Dissipation::NuNoise
            }
            DissipationKind::Hierarchy => {
                let depth = self.solver.depth.unwrap_or(DEFAULT_HIERARCHY_DEPTH);
                if depth == 0 {
                    v.push(violation("solver.depth", "must be >= 1, got 0"));
                }
                Dissipation::Hierarchy { depth }
            }
        };
        let substeps = self.solver.substeps.unwrap_or(1);
        if substeps == 0 {
            v.push(violation("solver.substeps", "must be >= 1, got 0"));
        }
        let diverged_limit = self.solver.diverged_limit.unwrap_or(DEFAULT_DIVERGED_LIMIT);
        if !(0.0..=1.0).contains(&diverged_limit) {
            v.push(violation("solver.diverged_limit", format!("must lie in [0, 1], got {diverged_limit}")));
        }

        let sigma = self.analysis.sigma.unwrap_or(DEFAULT_SIGMA);
        if !(sigma > 0.0 && sigma.is_finite()) {
            v.push(violation("analysis.sigma", format!("must be finite and > 0, got {sigma}")));
        }
        let default_sg = SavitzkyGolay::default();
        let window = self.analysis.smoothing_window.unwrap_or(default_sg.window);
        let order = self.analysis.smoothing_order.unwrap_or(default_sg.order);
        let smoothing = if window == 0 {
            None
        } else {
            if window.is_multiple_of(2) || window <= order {
                v.push(violation(
                    "analysis.smoothing_window",
                    format!("must be odd and larger than smoothing_order ({order}), got {window}"),
                ));
            }
            if window > steps + 1 {
                v.push(violation("analysis.smoothing_window", format!("must not exceed the {} grid nodes", steps + 1)));
            }
            Some(SavitzkyGolay { window, order })
        };

        let selftest_paths = self.selftest.n_paths.unwrap_or(10_000);
        let lag_count = self.selftest.lags.unwrap_or(20);
        let lag_stride = self.selftest.lag_stride.unwrap_or(8);
        if selftest_paths == 0 {
            v.push(violation("selftest.n_paths", "must be >= 1, got 0"));
        }
        if lag_count == 0 {
            v.push(violation("selftest.lags", "must be >= 1, got 0"));
        }
        if lag_stride == 0 && lag_count > 1 {
            v.push(violation("selftest.lag_stride", "must be >= 1 when more than one lag is tested"));
        }
        let selftest_lags = default_lags(lag_count, lag_stride);
        if selftest_lags.last().is_some_and(|&l| l > steps) {
            v.push(violation("selftest.lags", format!("largest lag {} exceeds grid.steps {steps}", selftest_lags[lag_count - 1])));
        }

        let sweep = match (kind, &self.sweep) {
            (ExperimentKind::LossGainSweep, None) => {
                v.push(violation("sweep", "required for kind loss-gain-sweep"));
                Vec::new()
            }
            (ExperimentKind::LossGainSweep, Some(s)) => check_sweep(s, bath, &lambdas, &mut v),
            (_, Some(_)) => {
                v.push(violation("sweep", "only meaningful for kind loss-gain-sweep"));
                Vec::new()
            }
            (_, None) => Vec::new(),
        };

        if !v.is_empty() {
            return Err(v);
        }
        Ok(Experiment {
            kind,
            output_dir,
            bath,
            omega,
            lambdas,
            axes,
            n_realizations,
            master_seed,
            grid,
            integrator: IntegratorSettings { substeps, scheme: Scheme::Rk4 },
            dissipation,
            diverged_limit,
            flow: FlowOptions { smoothing, sigma },
            selftest_paths,
            selftest_lags,
            sweep,
        })
    }
}

fn check_output_dir(p: &Path, v: &mut Vec<Violation>) {
    if p.as_os_str().is_empty() {
        v.push(violation("output_dir", "must not be empty"));
        return;
    }
    if let Ok(meta) = std::fs::metadata(p) {
        if !meta.is_dir() {
            v.push(violation("output_dir", format!("{} exists and is not a directory", p.display())));
        } else if meta.permissions().readonly() {
            v.push(violation("output_dir", format!("{} is not writable", p.display())));
        }
    }
}

fn bath_from(gamma: f64, beta: f64, omega_c: f64, quadrature: Option<QuadratureSettings>) -> BathSpec {
    BathSpec {
        gamma,
        omega_c,
        beta,
        quadrature: quadrature.unwrap_or(QuadratureSettings { omega_max: 50.0 * omega_c, n_points: 16384, tolerance: 1e-6 }),
    }
}

/// Bath violations under `prefix`, keyed by the field named at the start of each message.
fn bath_violations(prefix: &str, bath: &BathSpec, v: &mut Vec<Violation>) {
    for msg in bath.violations() {
        let (field, rest) = msg.split_once(' ').unwrap_or((msg.as_str(), ""));
        v.push(violation(format!("{prefix}.{field}"), rest));
    }
}

fn check_bath(s: &BathSection, v: &mut Vec<Violation>) -> BathSpec {
    if s.gamma.is_none() {
        v.push(violation("bath.gamma", "required"));
    }
    if s.beta.is_none() {
        v.push(violation("bath.beta", "required"));
    }
    let omega_c = s.omega_c.unwrap_or(10.0);
    let bath = bath_from(s.gamma.unwrap_or(0.0), s.beta.unwrap_or(1.0), omega_c, s.quadrature);
    bath_violations("bath", &bath, v);
    bath
}

fn check_pairs(pairs: Option<&[String]>, v: &mut Vec<Violation>) -> Vec<char> {
    let Some(pairs) = pairs else {
        return vec!['x', 'y', 'z'];
    };
    if pairs.is_empty() {
        v.push(violation("pairs", "must name at least one of \"x\", \"y\", \"z\""));
    }
    let mut axes = Vec::new();
    for p in pairs {
        match p.as_str() {
            "x" | "y" | "z" => {
                let c = p.chars().next().unwrap_or('x');
                if axes.contains(&c) {
                    v.push(violation("pairs", format!("axis {p:?} listed twice")));
                } else {
                    axes.push(c);
                }
            }
            other => v.push(violation("pairs", format!("unknown axis {other:?}; expected \"x\", \"y\" or \"z\""))),
        }
    }
    axes
}

fn check_sweep(s: &SweepSection, anchor: BathSpec, lambdas: &[f64], v: &mut Vec<Violation>) -> Vec<Case> {
    let betas = s.betas.clone().unwrap_or_default();
    let gammas = s.gammas.clone().unwrap_or_default();
    if betas.is_empty() && gammas.is_empty() {
        v.push(violation("sweep", "at least one of betas, gammas must be non-empty"));
    }
    let mode = s.mode.unwrap_or(SweepMode::Anchored);
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut add = |g: f64, b: f64| {
        if !points.iter().any(|&(pg, pb)| pg == g && pb == b) {
            points.push((g, b));
        }
    };
    match mode {
        SweepMode::Anchored => {
            for &b in &betas {
                add(anchor.gamma, b);
            }
            for &g in &gammas {
                add(g, anchor.beta);
            }
        }
        SweepMode::Full => {
            let gs = if gammas.is_empty() { vec![anchor.gamma] } else { gammas.clone() };
            let bs = if betas.is_empty() { vec![anchor.beta] } else { betas.clone() };
            for &g in &gs {
                for &b in &bs {
                    add(g, b);
                }
            }
        }
    }
    for (i, b) in betas.iter().enumerate() {
        if !(*b > 0.0 && b.is_finite()) {
            v.push(violation(format!("sweep.betas[{i}]"), format!("must be finite and > 0, got {b}")));
        }
    }
    for (i, g) in gammas.iter().enumerate() {
        if !(*g >= 0.0 && g.is_finite()) {
            v.push(violation(format!("sweep.gammas[{i}]"), format!("must be finite and >= 0, got {g}")));
        }
    }
    let mut cases = Vec::new();
    for &lambda_0 in lambdas {
        for &(gamma, beta) in &points {
            cases.push(Case { bath: BathSpec { gamma, beta, ..anchor }, lambda_0 });
        }
    }
    cases
}
