//! CSV and JSON output for runs and sweeps.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::domain::ParamVector;
use crate::error::{Result, TuneError};
use crate::tuner::{Comparison, RunArtifact, TerminationReason};
use crate::updaters::Strategy;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> TuneError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TuneError::io(path, io),
        other => TuneError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn theta_names(art: &RunArtifact) -> Vec<String> {
    let p = art.final_theta.len();
    if art.param_names.len() == p {
        art.param_names.clone()
    } else {
        (0..p).map(|i| i.to_string()).collect()
    }
}

fn alpha_or_mu(diag: &std::collections::BTreeMap<String, f64>) -> String {
    diag.get("alpha")
        .or_else(|| diag.get("mu"))
        .map(|v| format_float(*v))
        .unwrap_or_default()
}

/// `iteration, loss, rmse, grad_norm, alpha_or_mu, theta_<name>...`.
///
/// `alpha_or_mu` is the step size or damping of the step that produced the
/// row's θ; it is empty on the first row and for Gauss-Newton.
pub fn write_run_csv(art: &RunArtifact, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["iteration", "loss", "rmse", "grad_norm", "alpha_or_mu"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(theta_names(art).iter().map(|n| format!("theta_{n}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in &art.records {
        let mut row = vec![
            r.iteration.to_string(),
            format_float(r.loss),
            format_float(r.rmse),
            format_float(r.grad_norm),
            alpha_or_mu(&r.strategy_diag),
        ];
        row.extend(r.theta.as_slice().iter().map(|&v| format_float(v)));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| TuneError::io(path, e))
}

fn normalized(losses: &[f64]) -> Vec<f64> {
    let first = losses.first().copied().unwrap_or(1.0);
    losses
        .iter()
        .map(|&l| if first == 0.0 { 0.0 } else { l / first })
        .collect()
}

/// `iteration, loss, loss_normalized` with the loss divided by its value at
/// iteration 0.
pub fn write_curve_csv(art: &RunArtifact, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "loss", "loss_normalized"])
        .map_err(|e| csv_error(path, e))?;
    let losses = art.losses();
    for (r, n) in art.records.iter().zip(normalized(&losses)) {
        w.write_record([r.iteration.to_string(), format_float(r.loss), format_float(n)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| TuneError::io(path, e))
}

#[derive(Serialize)]
struct FinalSummary<'a> {
    system: Option<String>,
    strategy: Strategy,
    termination_reason: TerminationReason,
    iterations: usize,
    final_loss: Option<f64>,
    final_rmse: Option<f64>,
    final_theta: &'a ParamVector,
    param_names: &'a [String],
    wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a str>,
    records: &'a [crate::domain::TuneRecord],
}

pub fn write_final_json(art: &RunArtifact, path: &Path) -> Result<()> {
    let summary = FinalSummary {
        system: art.system.map(|s| s.name().to_string()),
        strategy: art.strategy,
        termination_reason: art.termination_reason,
        iterations: art.records.len(),
        final_loss: art.final_loss(),
        final_rmse: art.final_rmse(),
        final_theta: &art.final_theta,
        param_names: &art.param_names,
        wall_time: art.wall_time,
        failure: art.failure.as_deref(),
        records: &art.records,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary is serializable");
    fs::write(path, text + "\n").map_err(|e| TuneError::io(path, e))
}

/// `run.csv`, `curve.csv` and `final.json` under `dir`.
pub fn emit_artifacts(art: &RunArtifact, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TuneError::io(dir, e))?;
    write_run_csv(art, &dir.join("run.csv"))?;
    write_curve_csv(art, &dir.join("curve.csv"))?;
    write_final_json(art, &dir.join("final.json"))
}

/// `comparison.csv` (one row per strategy), `curves.csv` (every strategy's
/// loss curve) and each successful run's artifacts in `dir/<strategy>/`.
pub fn emit_comparison(cmp: &Comparison, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TuneError::io(dir, e))?;
    let path = dir.join("comparison.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "strategy",
        "status",
        "termination_reason",
        "iterations",
        "final_loss",
        "final_rmse",
        "error",
    ])
    .map_err(|e| csv_error(&path, e))?;
    for entry in &cmp.entries {
        let row = match &entry.outcome {
            Ok(art) => vec![
                entry.strategy.to_string(),
                "ok".to_string(),
                art.termination_reason.to_string(),
                art.records.len().to_string(),
                art.final_loss().map(format_float).unwrap_or_default(),
                art.final_rmse().map(format_float).unwrap_or_default(),
                art.failure.clone().unwrap_or_default(),
            ],
            Err(msg) => vec![
                entry.strategy.to_string(),
                "failed".to_string(),
                String::new(),
                "0".to_string(),
                String::new(),
                String::new(),
                msg.clone(),
            ],
        };
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| TuneError::io(&path, e))?;

    let path = dir.join("curves.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["strategy", "iteration", "loss", "loss_normalized"])
        .map_err(|e| csv_error(&path, e))?;
    for entry in &cmp.entries {
        if let Ok(art) = &entry.outcome {
            let losses = art.losses();
            for (r, n) in art.records.iter().zip(normalized(&losses)) {
                w.write_record([
                    entry.strategy.to_string(),
                    r.iteration.to_string(),
                    format_float(r.loss),
                    format_float(n),
                ])
                .map_err(|e| csv_error(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| TuneError::io(&path, e))?;

    for entry in &cmp.entries {
        if let Ok(art) = &entry.outcome {
            emit_artifacts(art, &dir.join(entry.strategy.name()))?;
        }
    }
    Ok(())
}
