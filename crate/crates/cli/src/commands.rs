use fbe_core::fgcb::{estimate_densities, fgcb_bound, fgcb_coefficients, gcb_bound, FgcbCoefficients};
use fbe_core::models::{analytic_reference, instantiate};
use fbe_core::protocol::{achievability_report, run_protocol, AchievabilityReport, ProtocolOptions};
use fbe_core::{DensityMode, HeatVector, InverseTemperature, Label, ModelSpec, ProtocolOutcome, VERSION};
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{HeatRule, LoadedConfig};
use crate::error::{error_code, CliError};
use crate::table::{Cell, Table};

const SLOTS: [Label; 4] = [Label::A1, Label::A2, Label::B1, Label::B2];

/// What a command produced.
pub struct CommandOutput {
    pub table: Table,
    /// Structured report that replaces the table in JSON output.
    pub report: Option<serde_json::Value>,
    /// Long-format data for external plotting.
    pub plot: Option<Table>,
    /// Raised after the output is written.
    pub failure: Option<CliError>,
}

impl CommandOutput {
    fn table(table: Table) -> Self {
        Self { table, report: None, plot: None, failure: None }
    }
}

fn by_slot(labels: &[Label], values: &[f64]) -> Vec<Cell> {
    SLOTS.iter().map(|s| labels.iter().position(|l| l == s).map_or(Cell::Empty, |i| Cell::Num(values[i]))).collect()
}

fn slot_columns(prefix: &str) -> Vec<String> {
    SLOTS.iter().map(|s| format!("{prefix}_{s}")).collect()
}

fn columns(head: &[&str], groups: &[&str], tail: &[&str]) -> Vec<String> {
    let mut c: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    for g in groups {
        c.extend(slot_columns(g));
    }
    c.extend(tail.iter().map(|s| s.to_string()));
    c
}

fn stamp(row: &mut Vec<Cell>, cfg: &LoadedConfig) {
    row.push(Cell::Text(cfg.hash.clone()));
    row.push(Cell::Text(VERSION.to_string()));
}

fn heats_row(q: &HeatVector) -> Vec<Cell> {
    vec![q.dq_a2.into(), q.dq_b1.into(), q.dq_b2.into(), q.norm().into()]
}

fn model_params(spec: &ModelSpec) -> String {
    serde_json::to_string(spec).expect("model spec serializes")
}

fn coefficients(
    spec: &ModelSpec,
    theta0: &InverseTemperature,
    mode: DensityMode,
) -> Result<FgcbCoefficients, CliError> {
    let dens = estimate_densities(spec, theta0, mode)?;
    Ok(fgcb_coefficients(&dens, theta0)?)
}

/// The coefficient that has a closed form: `C_BB¹¹` for the single spin bath, `C_AA` otherwise.
fn headline(spec: &ModelSpec, c: &FgcbCoefficients) -> f64 {
    match spec {
        ModelSpec::SpinHalfBath { .. } => c.c_bb[0][0],
        _ => c.c_aa,
    }
}

fn heat_rule(cfg: &LoadedConfig) -> Result<HeatRule, CliError> {
    cfg.config.heat.ok_or_else(|| CliError::Config("field `heat`: required by this command".into()))
}

fn require_lambdas(cfg: &LoadedConfig, min: usize) -> Result<&[f64], CliError> {
    let l = &cfg.config.lambdas;
    if l.len() < min {
        return Err(CliError::Config(format!("field `lambdas`: needs at least {min} entries, got {}", l.len())));
    }
    Ok(l)
}

pub fn coeffs(cfg: &LoadedConfig) -> Result<CommandOutput, CliError> {
    let c = &cfg.config;
    let theta0 = c.theta0();
    let cols = columns(
        &["model", "params"],
        &["theta0"],
        &[
            "C_AA",
            "C_AB1",
            "C_AB2",
            "C_BB11",
            "C_BB12",
            "C_BB22",
            "min_eigenvalue",
            "source",
            "reference",
            "rel_deviation",
            "config_hash",
            "version",
        ],
    );
    let mut table = Table { columns: cols, rows: Vec::new() };
    for spec in c.models() {
        info!("coefficients for {}", spec.name());
        let co = coefficients(&spec, &theta0, c.densities)?;
        let source = match c.densities {
            DensityMode::Analytic => "analytic",
            DensityMode::Numeric { .. } => "numeric",
        };
        let reference = analytic_reference(&spec, &theta0).ok().and_then(|r| r.coefficient);
        let value = headline(&spec, &co);
        let mut row = vec![spec.name().into(), model_params(&spec).into()];
        row.extend(by_slot(&spec.labels(), &theta0.0));
        row.extend([
            co.c_aa.into(),
            co.c_ab[0].into(),
            co.c_ab[1].into(),
            co.c_bb[0][0].into(),
            co.c_bb[0][1].into(),
            co.c_bb[1][1].into(),
            co.min_eigenvalue().into(),
            source.into(),
            reference.into(),
            reference.map(|r| (value - r).abs() / r.abs()).into(),
        ]);
        stamp(&mut row, cfg);
        table.push(row);
    }
    Ok(CommandOutput::table(table))
}

pub fn bound(cfg: &LoadedConfig) -> Result<CommandOutput, CliError> {
    let c = &cfg.config;
    let theta0 = c.theta0();
    let rule = heat_rule(cfg)?;
    let lambdas = require_lambdas(cfg, 1)?;
    let mut table = Table::new(&[
        "model",
        "lambda",
        "dq_a2",
        "dq_b1",
        "dq_b2",
        "q_norm",
        "gcb",
        "fgcb",
        "correction",
        "form",
        "in_window",
        "config_hash",
        "version",
    ]);
    for spec in c.models() {
        let co = coefficients(&spec, &theta0, c.densities)?;
        let labels = spec.labels();
        for &lambda in lambdas {
            let q = rule.at(lambda, &theta0, &spec);
            let g = gcb_bound(&q, &theta0, &labels)?;
            let f = fgcb_bound(&q, &theta0, lambda, &co)?;
            let norm = q.norm();
            let in_window = norm >= 3.0 * lambda.powf(0.625) && norm <= lambda / 3.0;
            let mut row = vec![spec.name().into(), lambda.into()];
            row.extend(heats_row(&q));
            let form = if norm > 0.0 { co.form(&q) / (norm * norm) } else { 0.0 };
            row.extend([g.into(), f.into(), (g - f).into(), form.into(), in_window.into()]);
            stamp(&mut row, cfg);
            table.push(row);
        }
    }
    Ok(CommandOutput::table(table))
}

/// One `(model, λ)` protocol run.
pub struct Run {
    /// Position of the model in the configuration.
    pub model: usize,
    pub spec: ModelSpec,
    pub lambda: f64,
    pub q: HeatVector,
    pub result: Result<(ProtocolOutcome, AchievabilityReport), fbe_core::Error>,
}

fn run_all(cfg: &LoadedConfig, lambdas: &[f64], rule: HeatRule) -> Result<Vec<Run>, CliError> {
    let c = &cfg.config;
    let theta0 = c.theta0();
    let opts: ProtocolOptions = c.tolerances.protocol_options();
    let mut jobs = Vec::new();
    for (model, spec) in c.models().into_iter().enumerate() {
        let co = coefficients(&spec, &theta0, c.densities)?;
        for &lambda in lambdas {
            jobs.push((model, spec.clone(), co.clone(), lambda));
        }
    }
    // Indexed parallel iteration keeps configuration order regardless of completion order.
    Ok(jobs
        .into_par_iter()
        .map(|(model, spec, co, lambda)| {
            let q = rule.at(lambda, &theta0, &spec);
            debug!("protocol {} at λ = {lambda}", spec.name());
            let result = instantiate(&spec, lambda).and_then(|inst| {
                let (_, out) = run_protocol(&inst.obs, &theta0, &q, lambda, &opts)?;
                let rep = achievability_report(&out, &q, lambda, &co)?;
                Ok((out, rep))
            });
            if let Err(e) = &result {
                warn!("{} at λ = {lambda}: {e}", spec.name());
            }
            Run { model, spec, lambda, q, result }
        })
        .collect())
}

fn path_name(out: &ProtocolOutcome) -> String {
    format!("{:?}", out.path).to_lowercase()
}

fn protocol_columns() -> Vec<String> {
    columns(
        &["model", "lambda", "status", "message", "path", "dq_a2", "dq_b1", "dq_b2", "q_norm"],
        &["theta_lambda", "eta_initial", "eta_final", "slot_heat", "xi_lambda"],
        &[
            "achieved_dq_a2",
            "achieved_dq_b1",
            "achieved_dq_b2",
            "work",
            "entropy_initial",
            "entropy_final",
            "d_to_ideal",
            "d_to_initial",
            "eta_gap",
            "degenerate_spread",
            "captured_mass",
            "heat_error_ratio",
            "gcb_target",
            "fgcb_target",
            "deficit_target",
            "normalized_deficit_target",
            "form_target",
            "in_window",
            "entropy_residual",
            "second_law_residual",
            "config_hash",
            "version",
        ],
    )
}

fn protocol_row(run: &Run, cfg: &LoadedConfig) -> Vec<Cell> {
    let width = protocol_columns().len();
    let mut row: Vec<Cell> = vec![run.spec.name().into(), run.lambda.into()];
    match &run.result {
        Err(e) => {
            row.extend([error_code(e).into(), e.to_string().into(), Cell::Empty]);
            row.extend(heats_row(&run.q));
            row.resize(width - 2, Cell::Empty);
        }
        Ok((out, rep)) => {
            row.extend(["ok".into(), Cell::Empty, path_name(out).into()]);
            row.extend(heats_row(&run.q));
            let l = &out.labels;
            row.extend(by_slot(l, &out.theta_lambda.0));
            row.extend(by_slot(l, &out.initial_expectations));
            row.extend(by_slot(l, &out.rho_opt_expectations));
            row.extend(by_slot(l, &out.slot_heats));
            match &out.xi_lambda {
                Some(xi) => row.extend(by_slot(l, &xi.0)),
                None => row.extend(vec![Cell::Empty; 4]),
            }
            let a = &out.achieved_heats;
            row.extend([
                a.dq_a2.into(),
                a.dq_b1.into(),
                a.dq_b2.into(),
                out.work.into(),
                out.entropy_initial.into(),
                out.entropy_final.into(),
                out.d_to_ideal.into(),
                out.d_to_initial.into(),
                out.eta_gap.into(),
                out.degenerate_spread.into(),
                out.captured_mass.into(),
                rep.heat_error_ratio.into(),
                rep.gcb_target.into(),
                rep.fgcb_target.into(),
                rep.deficit_target.into(),
                rep.normalized_deficit_target.into(),
                rep.form_target.into(),
                rep.in_window.into(),
                out.entropy_residual().into(),
                out.second_law_residual().into(),
            ]);
        }
    }
    stamp(&mut row, cfg);
    row
}

fn failures(runs: &[Run]) -> Option<CliError> {
    let failed: Vec<String> = runs
        .iter()
        .filter_map(|r| r.result.as_ref().err().map(|e| format!("{} at λ = {}: {e}", r.spec.name(), r.lambda)))
        .collect();
    (!failed.is_empty()).then(|| CliError::Numerical(format!("{} run(s) failed: {}", failed.len(), failed.join("; "))))
}

pub fn protocol(cfg: &LoadedConfig) -> Result<CommandOutput, CliError> {
    let rule = heat_rule(cfg)?;
    let lambdas = require_lambdas(cfg, 1)?;
    let runs = run_all(cfg, lambdas, rule)?;
    let mut table = Table { columns: protocol_columns(), rows: Vec::new() };
    for run in &runs {
        table.push(protocol_row(run, cfg));
    }
    Ok(CommandOutput { failure: failures(&runs), ..CommandOutput::table(table) })
}

/// Ordinary least squares in log–log coordinates.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of `ln y`.
    pub rms_residual: f64,
    pub points: usize,
}

pub fn log_log_fit(x: &[f64], y: &[f64]) -> Option<LogFit> {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Some(LogFit { slope, intercept, rms_residual: (ss / nf).sqrt(), points: n })
}

#[derive(Debug, Serialize)]
struct SweepPoint {
    lambda: f64,
    q_norm: f64,
    d_to_ideal: f64,
    normalized_deficit: f64,
    form: f64,
    heat_error_ratio: f64,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    model: String,
    exponent: Option<f64>,
    expected_d_slope: Option<f64>,
    d_fit: Option<LogFit>,
    deficit_fit: Option<LogFit>,
    deficit_plateau: Option<f64>,
    form: Option<f64>,
    plateau_rel_deviation: Option<f64>,
    failed_points: usize,
    points: Vec<SweepPoint>,
    config_hash: String,
    version: String,
}

pub fn sweep(cfg: &LoadedConfig) -> Result<CommandOutput, CliError> {
    let rule = heat_rule(cfg)?;
    let lambdas = require_lambdas(cfg, 5).map_err(|_| {
        CliError::Config(format!(
            "insufficient points: sweep needs at least 5 scales, got {}",
            cfg.config.lambdas.len()
        ))
    })?;
    let runs = run_all(cfg, lambdas, rule)?;
    let mut table = Table::new(&[
        "model",
        "lambda",
        "q_norm",
        "d_to_ideal",
        "normalized_deficit",
        "form",
        "heat_error_ratio",
        "config_hash",
        "version",
    ]);
    let mut plot = Table::new(&["model", "lambda", "quantity", "value"]);
    let mut reports = Vec::new();
    for (model, spec) in cfg.config.models().into_iter().enumerate() {
        let mine: Vec<&Run> = runs.iter().filter(|r| r.model == model).collect();
        let points: Vec<SweepPoint> = mine
            .iter()
            .filter_map(|r| r.result.as_ref().ok().map(|(out, rep)| (r, out, rep)))
            .map(|(r, out, rep)| SweepPoint {
                lambda: r.lambda,
                q_norm: r.q.norm(),
                d_to_ideal: out.d_to_ideal,
                normalized_deficit: rep.normalized_deficit_target,
                form: rep.form_target,
                heat_error_ratio: rep.heat_error_ratio,
            })
            .collect();
        for p in &points {
            let mut row: Vec<Cell> = vec![spec.name().into()];
            row.extend(
                [p.lambda, p.q_norm, p.d_to_ideal, p.normalized_deficit, p.form, p.heat_error_ratio].map(Cell::Num),
            );
            stamp(&mut row, cfg);
            table.push(row);
            for (name, v) in [
                ("d_to_ideal", p.d_to_ideal),
                ("normalized_deficit", p.normalized_deficit),
                ("form", p.form),
                ("heat_error_ratio", p.heat_error_ratio),
            ] {
                plot.push(vec![spec.name().into(), p.lambda.into(), name.into(), v.into()]);
            }
        }
        let xs: Vec<f64> = points.iter().map(|p| p.lambda).collect();
        let d: Vec<f64> = points.iter().map(|p| p.d_to_ideal).collect();
        let def: Vec<f64> = points.iter().map(|p| p.normalized_deficit).collect();
        let last = points.last();
        let exponent = rule.exponent();
        reports.push(SweepReport {
            model: spec.name().to_string(),
            exponent,
            expected_d_slope: exponent.map(|p| (2.0 * p - 2.0).max(-0.5)),
            d_fit: log_log_fit(&xs, &d),
            deficit_fit: log_log_fit(&xs, &def),
            deficit_plateau: last.map(|p| p.normalized_deficit),
            form: last.map(|p| p.form),
            plateau_rel_deviation: last.map(|p| (p.normalized_deficit - p.form).abs() / p.form.abs()),
            failed_points: mine.len() - points.len(),
            points,
            config_hash: cfg.hash.clone(),
            version: VERSION.to_string(),
        });
    }
    let report = serde_json::to_value(&reports).map_err(|e| CliError::Output(e.to_string()))?;
    Ok(CommandOutput { table, report: Some(report), plot: Some(plot), failure: failures(&runs) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_laws_fit_exactly() {
        let x = [2.0, 4.0, 8.0, 16.0, 32.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        let f = log_log_fit(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-13);
        assert!(f.rms_residual < 1e-14);
        assert_eq!(f.points, 5);
    }

    #[test]
    fn nonpositive_points_are_skipped() {
        assert!(log_log_fit(&[1.0, 2.0], &[0.0, 1.0]).is_none());
        let f = log_log_fit(&[1.0, 2.0, 4.0], &[-1.0, 2.0, 4.0]).unwrap();
        assert_eq!(f.points, 2);
        assert!((f.slope - 1.0).abs() < 1e-14);
    }

    #[test]
    fn slot_columns_follow_the_fixed_label_order() {
        let cells = by_slot(&[Label::A1, Label::B1], &[1.0, 2.0]);
        assert_eq!(cells, vec![Cell::Num(1.0), Cell::Empty, Cell::Num(2.0), Cell::Empty]);
        assert_eq!(slot_columns("t"), ["t_A1", "t_A2", "t_B1", "t_B2"]);
    }
}
