//! Merge sweep CSVs into one plot-ready table of per-`g` mean/std.
//!
//! Inputs are either per-run files (`model,g,seed,accuracy`) or already
//! aggregated files (`model,g,mean_acc,std_acc`); all inputs must share one
//! schema. Aggregated inputs pass through unchanged.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, Result};

const RUN_HEADER: [&str; 4] = ["model", "g", "seed", "accuracy"];
const SUMMARY_HEADER: [&str; 4] = ["model", "g", "mean_acc", "std_acc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub model: String,
    pub g: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotData {
    pub rows: Vec<PlotRow>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Schema {
    Runs,
    Summary,
}

/// `inputs` are `(name, csv text)` pairs; names appear in messages only.
pub fn sweep_plotdata(inputs: &[(String, String)]) -> Result<PlotData> {
    let mut schema = None;
    let mut out = PlotData::default();
    // (model, g) -> accuracies, in first-seen order
    let mut groups: Vec<((String, usize), Vec<f64>)> = Vec::new();
    for (name, text) in inputs {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let this = if header == RUN_HEADER {
            Schema::Runs
        } else if header == SUMMARY_HEADER {
            Schema::Summary
        } else {
            return Err(AnalysisError::Schema(format!(
                "{name}: columns {header:?} match neither {RUN_HEADER:?} nor {SUMMARY_HEADER:?}"
            )));
        };
        match schema {
            Some(s) if s != this => {
                return Err(AnalysisError::Schema(format!("{name}: columns {header:?} differ from earlier inputs")))
            }
            _ => schema = Some(this),
        }
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let model = rec[0].to_string();
            let g: usize = parse_cell(name, line, "g", &rec[1])?;
            let value_cell = if this == Schema::Runs { &rec[3] } else { &rec[2] };
            if value_cell.trim().is_empty() {
                out.warnings.push(format!("{name}:{line}: empty accuracy for {model} g={g}; row omitted"));
                continue;
            }
            match this {
                Schema::Runs => {
                    let acc: f64 = parse_cell(name, line, "accuracy", &rec[3])?;
                    let key = (model, g);
                    match groups.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, v)) => v.push(acc),
                        None => groups.push((key, vec![acc])),
                    }
                }
                Schema::Summary => out.rows.push(PlotRow {
                    model,
                    g,
                    mean_acc: parse_cell(name, line, "mean_acc", &rec[2])?,
                    std_acc: parse_cell(name, line, "std_acc", &rec[3])?,
                }),
            }
        }
    }
    for ((model, g), accs) in groups {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        out.rows.push(PlotRow {
            model,
            g,
            mean_acc: mean,
            std_acc: var.sqrt(),
        });
    }
    Ok(out)
}

fn parse_cell<T: std::str::FromStr>(name: &str, line: usize, col: &str, cell: &str) -> Result<T> {
    cell.trim().parse().map_err(|_| AnalysisError::Parse {
        line,
        column: 0,
        msg: format!("{name}: bad {col} value {cell:?}"),
    })
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([r.model.clone(), r.g.to_string(), r.mean_acc.to_string(), r.std_acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
