use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use stocon_core::analysis::{
    constraint_table, convergence_point, fit_order, format_scientific, monte_carlo_integral, solve_at, ErrorReport,
    Estimator, Resolution, TableCell,
};
use stocon_core::optimizer::OptimizerConfig;
use stocon_core::problems::{
    example1_with_reading, example2, select_target_reading, verify_manufactured, ManufacturedProblem, ResidualReport,
    TargetReading,
};

use crate::config::{Command, EstimatorName, ProblemName, ReadingName, ResolutionSpec, RunConfig};
use crate::CliError;

/// Residual level below which a manufactured identity counts as satisfied.
pub const VERIFY_TOL: f64 = 1e-8;

pub fn build_problem(cfg: &RunConfig) -> ManufacturedProblem {
    let p = &cfg.problem;
    match p.name {
        ProblemName::Example1 => {
            let reading = match p.reading {
                ReadingName::Printed => TargetReading::Printed,
                ReadingName::BetaScaled => TargetReading::BetaScaled,
            };
            example1_with_reading(p.beta, p.mu, reading)
        }
        ProblemName::Example2 => example2(p.gamma, p.lambda, p.beta, p.mu),
    }
}

fn optimizer_config(cfg: &RunConfig, problem: &ManufacturedProblem) -> OptimizerConfig {
    let mut c = OptimizerConfig::for_spec(&problem.spec);
    if let Some(rho) = cfg.rho {
        c.rho = rho;
    }
    c.eps0 = cfg.eps0;
    c.max_iter = cfg.max_iter;
    c
}

fn resolution(r: &ResolutionSpec) -> Resolution {
    Resolution { cells: r.cells, steps: r.steps }
}

fn numerical(cell: impl Into<String>) -> impl FnOnce(stocon_core::Error) -> CliError {
    let cell = cell.into();
    move |source| match source {
        stocon_core::Error::InvalidArgument(msg) => CliError::Config(format!("{cell}: {msg}")),
        source => CliError::Numerical { cell, source },
    }
}

fn output_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(output_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(output_err(path))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn estimator_label(e: EstimatorName) -> &'static str {
    match e {
        EstimatorName::MeanField => "mean-field",
        EstimatorName::MonteCarlo => "monte-carlo",
    }
}

/// Runs one command and returns a short human-readable report.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    fs::create_dir_all(&cfg.out).map_err(output_err(&cfg.out))?;
    match cfg.command {
        Command::Solve => solve(cfg),
        Command::Convergence => convergence(cfg),
        Command::ConstraintTable => table(cfg),
        Command::Verify => verify(cfg),
    }
}

fn solve(cfg: &RunConfig) -> Result<String, CliError> {
    let base = build_problem(cfg);
    let problem = match cfg.deltas.first() {
        Some(&d) => base.with_delta(d),
        None => base,
    };
    let res = &cfg.resolutions[0];
    let cell = format!("solve h={} steps={}", res.label, res.steps);
    let opt = optimizer_config(cfg, &problem);
    let (system, grid, out) = solve_at(&problem, resolution(res), &opt).map_err(numerical(&cell))?;

    let header = strings(&["iter", "mu", "step_error", "constraint_integral", "cost_J"]);
    let rows: Vec<Vec<String>> = out
        .records
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                r.mu.to_string(),
                r.step_error.to_string(),
                r.constraint_integral.to_string(),
                r.cost_j.to_string(),
            ]
        })
        .collect();
    write_csv(&cfg.out.join("iterations.csv"), &header, &rows)?;

    let mesh = system.mesh();
    let dim = mesh.dim();
    let mut header = strings(&["n", "t", "node", "x"]);
    if dim == 2 {
        header.push("y".into());
    }
    header.extend(strings(&["control", "state_mean", "adjoint_mean"]));
    let mut rows = Vec::new();
    for n in 0..=grid.steps() {
        for i in 0..system.n() {
            let node = mesh.interior_node(i);
            let mut row = vec![n.to_string(), grid.time(n).to_string(), node.to_string()];
            row.extend(mesh.point(node).iter().map(|c| c.to_string()));
            row.push(out.control.level(n)[i].to_string());
            row.push(out.state_mean.level(n)[i].to_string());
            row.push(out.adjoint_mean.level(n)[i].to_string());
            rows.push(row);
        }
    }
    write_csv(&cfg.out.join("fields.csv"), &header, &rows)?;

    let (integral, stderr) = match cfg.estimator {
        EstimatorName::MeanField => (out.constraint_integral, 0.0),
        EstimatorName::MonteCarlo => {
            monte_carlo_integral(&problem, &out.control, &system, &grid, cfg.paths, cfg.seed).map_err(numerical(&cell))?
        }
    };
    let summary = json!({
        "problem": cfg.problem,
        "delta": problem.spec.delta,
        "h": mesh.h(),
        "tau": grid.tau(),
        "cells": res.cells,
        "steps": res.steps,
        "rho": opt.rho,
        "mu": out.mu,
        "converged": out.converged,
        "iterations": out.records.len(),
        "mean_field_integral": out.constraint_integral,
        "estimator": estimator_label(cfg.estimator),
        "constraint_integral": integral,
        "stderr": stderr,
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(format!(
        "{}: delta {} at h={} tau={}: {} after {} iterations, mu = {}, constraint integral ({}) = {}",
        problem.name,
        problem.spec.delta,
        res.label,
        grid.tau(),
        if out.converged { "converged" } else { "not converged" },
        out.records.len(),
        out.mu,
        estimator_label(cfg.estimator),
        integral
    ))
}

const ERROR_QUANTITIES: [(&str, fn(&ErrorReport) -> f64); 6] = [
    ("strong_l2_state", |r| r.strong_l2_state),
    ("strong_l2_adjoint", |r| r.strong_l2_adjoint),
    ("strong_l2_control", |r| r.strong_l2_control),
    ("h1_state", |r| r.h1_state),
    ("h1_adjoint", |r| r.h1_adjoint),
    ("mu_error", |r| r.mu_error),
];

fn convergence(cfg: &RunConfig) -> Result<String, CliError> {
    let base = build_problem(cfg);
    let problem = match cfg.deltas.first() {
        Some(&d) => base.with_delta(d),
        None => base,
    };
    let opt = optimizer_config(cfg, &problem);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for res in &cfg.resolutions {
        let cell = format!("convergence h={} steps={}", res.label, res.steps);
        let (r, out) =
            convergence_point(&problem, resolution(res), &opt, cfg.paths, cfg.seed).map_err(numerical(&cell))?;
        let mut row = vec![
            res.label.clone(),
            res.cells.to_string(),
            res.steps.to_string(),
            r.h.to_string(),
            r.tau.to_string(),
            r.paths.to_string(),
            r.seed.to_string(),
        ];
        row.extend(ERROR_QUANTITIES.iter().map(|(_, f)| f(&r).to_string()));
        row.extend([out.mu.to_string(), out.records.len().to_string(), out.converged.to_string()]);
        rows.push(row);
        reports.push(r);
    }
    let mut header = strings(&["h_label", "cells", "steps", "h", "tau", "paths", "seed"]);
    header.extend(ERROR_QUANTITIES.iter().map(|(n, _)| n.to_string()));
    header.extend(strings(&["mu", "iterations", "converged"]));
    write_csv(&cfg.out.join("errors.csv"), &header, &rows)?;

    let fits = |x: fn(&ErrorReport) -> f64| {
        let mut m = serde_json::Map::new();
        for (name, f) in ERROR_QUANTITIES {
            let pts: Vec<(f64, f64)> = reports.iter().map(|r| (x(r), f(r))).collect();
            let v = match fit_order(&pts) {
                Ok(fit) => json!({ "slope": fit.slope, "r_squared": fit.r_squared }),
                Err(_) => serde_json::Value::Null,
            };
            m.insert(name.to_string(), v);
        }
        serde_json::Value::Object(m)
    };
    let orders = json!({
        "problem": cfg.problem,
        "rule": cfg.rule,
        "vs_h": fits(|r| r.h),
        "vs_tau": fits(|r| r.tau),
    });
    write_json(&cfg.out.join("orders.json"), &orders)?;

    let mut report = format!("{} resolutions, rule {}, {} paths, seed {}", reports.len(), cfg.rule, cfg.paths, cfg.seed);
    let axis = if cfg.rule == "tau=h" { "vs_tau" } else { "vs_h" };
    for (name, _) in ERROR_QUANTITIES {
        if let Some(slope) = orders[axis][name]["slope"].as_f64() {
            report.push_str(&format!("\n  {name} order {axis}: {slope:.3}"));
        }
    }
    Ok(report)
}

fn default_deltas(name: ProblemName) -> Vec<f64> {
    match name {
        ProblemName::Example1 => vec![0.2, 0.1, -0.1, -0.2],
        ProblemName::Example2 => vec![1.0, 0.5, -0.5, -1.0],
    }
}

fn table(cfg: &RunConfig) -> Result<String, CliError> {
    let problem = build_problem(cfg);
    let deltas = if cfg.deltas.is_empty() { default_deltas(cfg.problem.name) } else { cfg.deltas.clone() };
    let resolutions: Vec<Resolution> = cfg.resolutions.iter().map(resolution).collect();
    let opt = optimizer_config(cfg, &problem);
    let estimator = match cfg.estimator {
        EstimatorName::MeanField => Estimator::MeanField,
        EstimatorName::MonteCarlo => Estimator::MonteCarlo { paths: cfg.paths, seed: cfg.seed },
    };
    let cells: Vec<TableCell> = constraint_table(&problem, &deltas, &resolutions, &opt, estimator)
        .map_err(numerical(format!("constraint-table {}", problem.name)))?;

    let mut header = vec!["delta".to_string()];
    header.extend(cfg.resolutions.iter().map(|r| r.label.clone()));
    let shaped = |fmt: fn(f64) -> String| -> Vec<Vec<String>> {
        cells
            .chunks(resolutions.len())
            .map(|row| {
                let mut out = vec![row[0].delta.to_string()];
                out.extend(row.iter().map(|c| fmt(c.integral)));
                out
            })
            .collect()
    };
    write_csv(&cfg.out.join("table.csv"), &header, &shaped(|v| v.to_string()))?;
    write_csv(&cfg.out.join("table_scientific.csv"), &header, &shaped(format_scientific))?;

    let long_header = strings(&[
        "delta",
        "h_label",
        "cells",
        "steps",
        "h",
        "tau",
        "estimator",
        "integral",
        "stderr",
        "mean_field_integral",
        "mu",
        "iterations",
        "converged",
    ]);
    let long: Vec<Vec<String>> = cells
        .iter()
        .zip(cfg.resolutions.iter().cycle())
        .map(|(c, r)| {
            vec![
                c.delta.to_string(),
                r.label.clone(),
                c.resolution.cells.to_string(),
                c.resolution.steps.to_string(),
                c.h.to_string(),
                c.tau.to_string(),
                estimator_label(cfg.estimator).to_string(),
                c.integral.to_string(),
                c.stderr.to_string(),
                c.mean_field_integral.to_string(),
                c.mu.to_string(),
                c.iterations.to_string(),
                c.converged.to_string(),
            ]
        })
        .collect();
    write_csv(&cfg.out.join("cells.csv"), &long_header, &long)?;

    let mut report = format!("{} ({} estimator)\n{}", problem.name, estimator_label(cfg.estimator), header.join("  "));
    for row in shaped(format_scientific) {
        report.push('\n');
        report.push_str(&row.join("  "));
    }
    Ok(report)
}

fn residual_json(r: &ResidualReport) -> serde_json::Value {
    json!({
        "samples": r.samples,
        "state_drift": r.state_drift,
        "state_diffusion": r.state_diffusion,
        "adjoint_drift": r.adjoint_drift,
        "optimality": r.optimality,
        "initial": r.initial,
        "max": r.max(),
        "pass": r.max() <= VERIFY_TOL,
    })
}

fn verify(cfg: &RunConfig) -> Result<String, CliError> {
    let problem = build_problem(cfg);
    let report = verify_manufactured(&problem, cfg.samples);
    let mut doc = json!({
        "problem": cfg.problem,
        "tolerance": VERIFY_TOL,
        "residuals": residual_json(&report),
    });
    let mut text = format!(
        "{}: max residual {:.3e} over {} samples ({})",
        problem.name,
        report.max(),
        cfg.samples,
        if report.max() <= VERIFY_TOL { "pass" } else { "fail" }
    );
    if cfg.problem.name == ProblemName::Example1 {
        let (choice, both) = select_target_reading(cfg.problem.beta, cfg.problem.mu, cfg.samples, VERIFY_TOL);
        let mut readings = serde_json::Map::new();
        let key_of = |reading: &TargetReading| match reading {
            TargetReading::Printed => "printed",
            TargetReading::BetaScaled => "beta-scaled",
        };
        for (reading, r) in &both {
            let key = key_of(reading);
            readings.insert(key.into(), residual_json(r));
            text.push_str(&format!("\n  reading {key}: adjoint residual {:.3e}", r.adjoint_drift));
        }
        doc["readings"] = serde_json::Value::Object(readings);
        doc["selected_reading"] = json!(choice);
        text.push_str(&format!("\n  selected reading: {}", choice.as_ref().map_or("none", key_of)));
    }
    write_json(&cfg.out.join("verify.json"), &doc)?;
    Ok(text)
}
