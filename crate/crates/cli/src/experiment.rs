//! Runs checked experiments and writes their artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use spinflux::bath::tabulate_correlation;
use spinflux::ensemble::{pauli_states, provenance, run_ensemble, EnsembleConfig, EnsembleResult};
use spinflux::noise::{run_noise_selftest, NoiseGenerator, NoiseStatReport};
use spinflux::observables::{analyze_pair, heat_flux, overlap_statistic, HeatFluxSeries, InfoFlowReport, Window};

use crate::config::{Case, Experiment, ExperimentConfig, ExperimentKind};
use crate::failure::Failure;

/// What produced a run, recorded in every sidecar.
#[derive(Debug, Clone)]
pub struct Context {
    /// `preset:<name>` or the configuration path.
    pub source: String,
    /// Configuration after command-line overrides.
    pub config: ExperimentConfig,
    pub command: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

pub fn run(exp: &Experiment, ctx: &Context) -> Result<Outcome, Failure> {
    std::fs::create_dir_all(&exp.output_dir)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", exp.output_dir.display())))?;
    let mut out = Outcome::default();
    match exp.kind {
        ExperimentKind::BathTable => bath_table(exp, ctx, &mut out)?,
        ExperimentKind::NoiseSelftest => noise_selftest(exp, ctx, &mut out)?,
        ExperimentKind::PairDynamics => pair_cases(exp, ctx, &mut out, false)?,
        ExperimentKind::HeatFlux => pair_cases(exp, ctx, &mut out, true)?,
        ExperimentKind::LossGainSweep => loss_gain(exp, ctx, &mut out)?,
    }
    Ok(out)
}

/// File-name form of a state label: `+x` becomes `plus_x`.
pub fn file_label(label: &str) -> String {
    label.replace('+', "plus_").replace('-', "minus_")
}

fn case_dir_name(lambda_0: f64) -> String {
    if lambda_0 == 0.0 {
        "undriven".into()
    } else {
        format!("driven_lambda_{lambda_0}")
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `path` through `body` and a `<path>.json` sidecar next to it.
fn write_artifact<F>(path: &Path, ctx: &Context, details: Value, out: &mut Outcome, body: F) -> Result<(), Failure>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let io = |e: std::io::Error| Failure::Io(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    body(&mut w).and_then(|_| w.flush()).map_err(io)?;
    let sidecar = json!({
        "artifact": path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "config_source": ctx.source,
        "config": ctx.config,
        "command": ctx.command,
        "details": details,
        "provenance": provenance(),
    });
    write_json(&sidecar_path(path), &sidecar)?;
    out.files.push(path.to_path_buf());
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn bath_table(exp: &Experiment, ctx: &Context, out: &mut Outcome) -> Result<(), Failure> {
    let table = tabulate_correlation(&exp.bath, &exp.grid).map_err(Failure::pipeline("bath correlation table"))?;
    let path = exp.output_dir.join("bath_table.csv");
    let details = json!({ "bath": exp.bath, "grid": exp.grid });
    write_artifact(&path, ctx, details, out, |w| table.write_csv(w))?;
    out.summary = json!({ "nodes": table.len(), "L0": [table.re_l[0], table.im_l[0]] });
    Ok(())
}

fn write_selftest_csv<W: Write>(report: &NoiseStatReport, w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "lag_nodes,lag,xi_xi,xi_xi_target,xi_xi_se,re_xi_nu,re_xi_nu_target,re_xi_nu_se,\
         im_xi_nu,im_xi_nu_target,im_xi_nu_se,re_nu_nu,re_nu_nu_se,im_nu_nu,im_nu_nu_se,pass"
    )?;
    for l in &report.lags {
        let c = &l.xi_nu_causal;
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            l.lag_nodes,
            l.lag,
            l.xi_xi.estimate,
            l.xi_xi.target,
            l.xi_xi.standard_error,
            c.re.estimate,
            c.re.target,
            c.re.standard_error,
            c.im.estimate,
            c.im.target,
            c.im.standard_error,
            l.nu_nu.re.estimate,
            l.nu_nu.re.standard_error,
            l.nu_nu.im.estimate,
            l.nu_nu.im.standard_error,
            u8::from(l.pass()),
        )?;
    }
    Ok(())
}

fn noise_selftest(exp: &Experiment, ctx: &Context, out: &mut Outcome) -> Result<(), Failure> {
    let table = tabulate_correlation(&exp.bath, &exp.grid).map_err(Failure::pipeline("bath correlation table"))?;
    let generator = NoiseGenerator::new(&exp.bath, &table).map_err(Failure::pipeline("noise generator"))?;
    log::info!("noise self-test: {} paths, {} lags", exp.selftest_paths, exp.selftest_lags.len());
    let report = run_noise_selftest(&generator, &table, exp.master_seed, exp.selftest_paths, &exp.selftest_lags)
        .map_err(Failure::pipeline("noise self-test"))?;
    let details = json!({ "n_paths": report.n_paths, "master_seed": exp.master_seed, "pass": report.pass });
    let csv = exp.output_dir.join("noise_selftest.csv");
    write_artifact(&csv, ctx, details.clone(), out, |w| write_selftest_csv(&report, w))?;
    let full = exp.output_dir.join("noise_selftest_report.json");
    write_artifact(&full, ctx, details, out, |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    out.summary = json!({ "pass": report.pass, "failures": report.failures() });
    if report.pass {
        Ok(())
    } else {
        Err(Failure::SelfTest(report.failures()))
    }
}

fn ensemble_config(exp: &Experiment, case: &Case, n_realizations: u64) -> EnsembleConfig {
    let all = pauli_states();
    let mut states = Vec::new();
    let mut pairs = Vec::new();
    for axis in &exp.axes {
        let plus = all.iter().find(|s| s.label == format!("+{axis}")).cloned();
        let minus = all.iter().find(|s| s.label == format!("-{axis}")).cloned();
        if let (Some(p), Some(m)) = (plus, minus) {
            pairs.push([states.len(), states.len() + 1]);
            states.push(p);
            states.push(m);
        }
    }
    EnsembleConfig {
        bath: case.bath,
        system: case.system(exp.omega),
        states,
        pairs,
        n_realizations,
        first_realization: 0,
        master_seed: exp.master_seed,
        integrator: exp.integrator,
        dissipation: exp.dissipation,
        grid: exp.grid,
        diverged_limit: exp.diverged_limit,
    }
}

fn run_case(exp: &Experiment, case: &Case) -> Result<(EnsembleResult, Vec<InfoFlowReport>), Failure> {
    let config = ensemble_config(exp, case, exp.n_realizations);
    let what = format!("ensemble at gamma={}, beta={}, lambda_0={}", case.bath.gamma, case.bath.beta, case.lambda_0);
    log::info!("{what}: {} realizations", exp.n_realizations);
    let result = run_ensemble(&config).map_err(Failure::pipeline(what.clone()))?;
    let reports = (0..result.pairs.len())
        .map(|i| analyze_pair(&result, i, &exp.flow))
        .collect::<spinflux::Result<Vec<_>>>()
        .map_err(Failure::pipeline(format!("information flow for {what}")))?;
    Ok((result, reports))
}

fn write_heat_csv<W: Write>(flux: &HeatFluxSeries, windows: &[Window], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "t,jq,jq_se,jq_imag_residual,window_flag")?;
    for k in 0..flux.t_grid.len() {
        let flag = windows.iter().any(|win| (win.first_node..=win.last_node).contains(&k));
        writeln!(
            w,
            "{:e},{:e},{:e},{:e},{}",
            flux.t_grid[k],
            flux.jq[k],
            flux.se[k],
            flux.jq_imag_residual[k],
            u8::from(flag)
        )?;
    }
    Ok(())
}

fn pair_cases(exp: &Experiment, ctx: &Context, out: &mut Outcome, heat: bool) -> Result<(), Failure> {
    let cases = exp.cases();
    let mut summaries = Vec::new();
    for case in &cases {
        let dir = if cases.len() > 1 { exp.output_dir.join(case_dir_name(case.lambda_0)) } else { exp.output_dir.clone() };
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        let (result, reports) = run_case(exp, case)?;
        let ensemble = result.sidecar();
        let details = |extra: Value| json!({ "case": case, "ensemble": ensemble, "artifact_of": extra });

        for (i, s) in result.states.iter().enumerate() {
            let path = dir.join(format!("state_{}.csv", file_label(&s.label)));
            write_artifact(&path, ctx, details(json!({ "state": s.label })), out, |w| result.write_state_csv(i, w))?;
        }
        let mut pair_summaries = Vec::new();
        for (axis, report) in exp.axes.iter().zip(&reports) {
            let path = dir.join(format!("info_flow_{axis}.csv"));
            write_artifact(&path, ctx, details(json!({ "pair": report.labels })), out, |w| report.write_csv(w))?;
            pair_summaries.push(report.summary());
        }

        let mut heat_summaries = Vec::new();
        if heat {
            for (pair, report) in result.pairs.iter().zip(&reports) {
                for &s in &pair.states {
                    let state = &result.states[s];
                    let flux = heat_flux(state, &result.t_grid, exp.omega);
                    let path = dir.join(format!("heat_flux_{}.csv", file_label(&state.label)));
                    let extra = json!({ "state": state.label, "windows_of_pair": report.labels });
                    write_artifact(&path, ctx, details(extra), out, |w| {
                        write_heat_csv(&flux, &report.backflow_windows, w)
                    })?;
                    let overlap = overlap_statistic(&report.backflow_windows, &flux, exp.flow.sigma)
                        .map_err(Failure::pipeline(format!("overlap statistic for {}", state.label)))?;
                    let (integral, integral_err) = flux.integral();
                    let residual_ok =
                        flux.jq_imag_residual.iter().zip(&flux.residual_se).all(|(r, s)| r.abs() <= 3.0 * s);
                    heat_summaries.push(json!({
                        "state": state.label,
                        "pair": report.labels,
                        "jq_integral": integral,
                        "jq_integral_error": integral_err,
                        "imag_residual_within_3se": residual_ok,
                        "overlap": overlap,
                    }));
                }
            }
        }

        let case_summary = json!({
            "lambda_0": case.lambda_0,
            "gamma": case.bath.gamma,
            "beta": case.bath.beta,
            "n_used": result.n_used,
            "diverged": result.diverged_count,
            "pairs": pair_summaries,
            "heat_flux": heat_summaries,
        });
        let mut with_provenance = case_summary.clone();
        with_provenance["config_source"] = json!(ctx.source);
        with_provenance["config"] = json!(ctx.config);
        with_provenance["provenance"] = provenance();
        write_json(&dir.join("summary.json"), &with_provenance)?;
        summaries.push(case_summary);
    }
    out.summary = json!({ "cases": summaries });
    Ok(())
}

fn loss_gain(exp: &Experiment, ctx: &Context, out: &mut Outcome) -> Result<(), Failure> {
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for case in &exp.sweep {
        let (result, reports) = run_case(exp, case)?;
        for (axis, r) in exp.axes.iter().zip(&reports) {
            rows.push((*case, *axis, r.i_delta_loss, r.i_delta_gain, r.first_backflow_time, r.blp_value, result.n_used));
        }
        details.push(json!({
            "case": case,
            "realizations": { "used": result.n_used, "diverged": result.diverged_count },
        }));
    }
    let path = exp.output_dir.join("loss_gain.csv");
    write_artifact(&path, ctx, json!({ "cases": details }), out, |w| {
        writeln!(w, "lambda_0,gamma,beta,pair,I_loss,I_gain,first_backflow_time,blp_value,n_used")?;
        for (case, axis, loss, gain, onset, blp, n) in &rows {
            let onset = onset.map(|t| format!("{t:e}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{axis},{loss:e},{gain:e},{onset},{blp:e},{n}",
                case.lambda_0, case.bath.gamma, case.bath.beta
            )?;
        }
        Ok(())
    })?;
    out.summary = json!({ "rows": rows.len(), "cases": exp.sweep.len() });
    Ok(())
}
