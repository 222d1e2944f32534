//! Global-token bottleneck sweep: ST vs HST accuracy as `g` varies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::train::run_experiment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ST")]
    St,
    #[serde(rename = "HST")]
    Hst,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::St => "ST",
            ModelKind::Hst => "HST",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub model: ModelKind,
    pub g: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub g: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, model: ModelKind, g: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.model == model && r.g == g)
    }
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_RUNS_FILE: &str = "sweep_runs.csv";

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Config for one sweep cell.
pub fn cell_config(base: &ExperimentConfig, model: ModelKind, g: usize, repeat: usize) -> ExperimentConfig {
    let mut c = base.clone();
    c.model.g = g;
    c.model.hierarchical_enabled = model == ModelKind::Hst;
    c.train.seed = base.train.seed + repeat as u64;
    c
}

/// Trains `repeats` seeds per `(model, g)` cell and reports test accuracy.
/// Each cell writes its own run directory under `out_dir` when given.
/// `on_run` is called after every finished cell.
pub fn bottleneck_sweep(
    base: &ExperimentConfig,
    g_values: &[usize],
    repeats: usize,
    out_dir: Option<&Path>,
    mut on_run: impl FnMut(&SweepRun),
) -> Result<SweepReport> {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for model in [ModelKind::St, ModelKind::Hst] {
        for &g in g_values {
            let mut accs = Vec::with_capacity(repeats);
            for r in 0..repeats {
                let cfg = cell_config(base, model, g, r);
                let dir = out_dir.map(|d| d.join(format!("{}_g{g}_s{}", model.label(), cfg.train.seed)));
                let out = run_experiment(&cfg, dir.as_deref())?;
                let run = SweepRun {
                    model,
                    g,
                    seed: cfg.train.seed,
                    accuracy: out.test.accuracy,
                };
                on_run(&run);
                accs.push(run.accuracy);
                runs.push(run);
            }
            let (mean_acc, std_acc) = mean_std(&accs);
            rows.push(SweepRow {
                model,
                g,
                mean_acc,
                std_acc,
            });
        }
    }
    let report = SweepReport { runs, rows };
    if let Some(d) = out_dir {
        write_sweep(d, &report)?;
    }
    Ok(report)
}

pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // floats via Display so that re-aggregated files compare byte for byte
    let mut w = csv::Writer::from_path(dir.join(SWEEP_FILE))?;
    w.write_record(["model", "g", "mean_acc", "std_acc"])?;
    for r in &report.rows {
        w.write_record([r.model.label().to_string(), r.g.to_string(), r.mean_acc.to_string(), r.std_acc.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(SWEEP_RUNS_FILE))?;
    w.write_record(["model", "g", "seed", "accuracy"])?;
    for r in &report.runs {
        w.write_record([r.model.label().to_string(), r.g.to_string(), r.seed.to_string(), r.accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_of_two() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
    }
}
