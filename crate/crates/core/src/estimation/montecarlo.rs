//! Repeated noisy tuning runs with independent noise streams.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Result, TuneError};
use crate::tuner::{format_float, tune_seeded, Problem, RunArtifact, TerminationReason, TuneConfig};
use crate::updaters::Strategy;

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub artifact: Option<RunArtifact>,
    /// Set when the trial diverged or errored; such trials are left out of
    /// the aggregates.
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn succeeded(&self) -> Option<&RunArtifact> {
        match (&self.artifact, &self.error) {
            (Some(a), None) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub strategy: Strategy,
    pub param_names: Vec<String>,
    pub trials: Vec<TrialOutcome>,
    /// Per-iteration mean and sample standard deviation of the loss over
    /// successful trials, truncated to the shortest successful run.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MonteCarloResult {
    pub fn successful(&self) -> impl Iterator<Item = &RunArtifact> {
        self.trials.iter().filter_map(TrialOutcome::succeeded)
    }

    pub fn failed(&self) -> impl Iterator<Item = &TrialOutcome> {
        self.trials.iter().filter(|t| t.succeeded().is_none())
    }

    /// Final gains of each successful trial.
    pub fn final_gains(&self) -> Vec<Vec<f64>> {
        self.successful().map(|a| a.final_theta.as_slice().to_vec()).collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn aggregate(trials: &[TrialOutcome]) -> (Vec<f64>, Vec<f64>) {
    let curves: Vec<Vec<f64>> = trials
        .iter()
        .filter_map(TrialOutcome::succeeded)
        .map(RunArtifact::losses)
        .collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| mean_std(&curves.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .unzip()
}

/// Tune `trials` times, trial `i` drawing its noise from seed
/// `config.seed + i`. Trials run in parallel and are reported in index
/// order. Without a `noise` section every trial is the noiseless run.
pub fn run_monte_carlo(config: &TuneConfig, trials: usize) -> Result<MonteCarloResult> {
    if trials == 0 {
        return Err(TuneError::Config("trials must be at least 1".into()));
    }
    let problem = Problem::from_config(config)?;
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let seed = config.seed.wrapping_add(trial as u64);
            match tune_seeded(config, &problem, seed) {
                Ok(art) => {
                    let error = (art.termination_reason == TerminationReason::Divergence)
                        .then(|| art.failure.clone().unwrap_or_else(|| "divergence".into()));
                    TrialOutcome {
                        trial,
                        seed,
                        artifact: Some(art),
                        error,
                    }
                }
                Err(e) => TrialOutcome {
                    trial,
                    seed,
                    artifact: None,
                    error: Some(format!("{}: {e}", e.category())),
                },
            }
        })
        .collect();
    let (mean, std) = aggregate(&outcomes);
    Ok(MonteCarloResult {
        strategy: config.strategy,
        param_names: problem.param_names.clone(),
        trials: outcomes,
        mean,
        std,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TuneError::io(path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| TuneError::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| TuneError::io(path, e))
}

/// `montecarlo_trials.csv` (trial, iteration, loss, rmse),
/// `montecarlo_aggregate.csv` (iteration, mean, std) and
/// `montecarlo_failures.csv` (trial, seed, error).
pub fn write_monte_carlo(result: &MonteCarloResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TuneError::io(dir, e))?;
    let rows = result
        .trials
        .iter()
        .filter_map(|t| t.succeeded().map(|a| (t.trial, a)))
        .flat_map(|(trial, art)| {
            art.records.iter().map(move |r| {
                vec![
                    trial.to_string(),
                    r.iteration.to_string(),
                    format_float(r.loss),
                    format_float(r.rmse),
                ]
            })
        });
    write_rows(&dir.join("montecarlo_trials.csv"), &["trial", "iteration", "loss", "rmse"], rows)?;
    let rows = result
        .mean
        .iter()
        .zip(&result.std)
        .enumerate()
        .map(|(i, (m, s))| vec![i.to_string(), format_float(*m), format_float(*s)]);
    write_rows(&dir.join("montecarlo_aggregate.csv"), &["iteration", "mean", "std"], rows)?;
    let rows = result.failed().map(|t| {
        vec![
            t.trial.to_string(),
            t.seed.to_string(),
            t.error.clone().unwrap_or_default(),
        ]
    });
    write_rows(&dir.join("montecarlo_failures.csv"), &["trial", "seed", "error"], rows)
}

/// Mean and sample std of each final gain across successful trials, one
/// row per gain and a column pair per strategy.
pub fn write_gains_table(results: &[MonteCarloResult], path: &Path) -> Result<()> {
    let Some(first) = results.first() else {
        return Err(TuneError::InvalidArgument("no Monte Carlo results to tabulate".into()));
    };
    let names = &first.param_names;
    if results.iter().any(|r| &r.param_names != names) {
        return Err(TuneError::InvalidArgument("results come from different systems".into()));
    }
    let mut header = vec!["parameter".to_string(), "axis".to_string()];
    for r in results {
        header.push(format!("{}_mean", r.strategy));
        header.push(format!("{}_std", r.strategy));
    }
    let gains: Vec<Vec<Vec<f64>>> = results.iter().map(MonteCarloResult::final_gains).collect();
    let rows = names.iter().enumerate().map(|(i, name)| {
        let (param, axis) = name.split_once('_').unwrap_or((name.as_str(), ""));
        let mut row = vec![param.to_string(), axis.to_string()];
        for g in &gains {
            if g.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (m, s) = mean_std(&g.iter().map(|t| t[i]).collect::<Vec<_>>());
                row.extend([format_float(m), format_float(s)]);
            }
        }
        row
    });
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(path, &header_refs, rows)
}
