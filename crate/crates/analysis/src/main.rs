use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hst_analysis::flops::write_flop_csv;
use hst_analysis::plotdata::write_plot_csv;
use hst_analysis::{flop_table, flow_report, parse_topology, sweep_plotdata, FlopConfig, Result};

/// Offline analysis of topology exports and sweep results.
#[derive(Parser)]
#[command(name = "hst-analysis", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Reachability depths, path-count histogram and bottleneck relays.
    Flow {
        /// Topology export (JSON), e.g. from `hst inspect-topology`.
        topology: PathBuf,
        #[arg(long, short = 'L', default_value_t = 2)]
        layers: usize,
    },
    /// Attention cost table (CSV) for each `n` at fixed `g`, `w`, `d`.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        g: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// JSON list of `{n, g, w, d}` objects; replaces the flags.
        #[arg(long)]
        configs: Option<PathBuf>,
    },
    /// Merge sweep CSVs into per-(model, g) mean/std rows.
    Plotdata {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Flow { topology, layers } => {
            let doc = parse_topology(&fs::read_to_string(topology)?)?;
            let report = flow_report(&doc, layers)?;
            println!("{}", serde_json::to_string(&report).expect("report serialises"));
        }
        Cmd::Flops { n, g, w, d, configs } => {
            let configs: Vec<FlopConfig> = match configs {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => n.iter().map(|&n| FlopConfig { n, g, w, d }).collect(),
            };
            write_flop_csv(&flop_table(&configs)?, io::stdout().lock())?;
        }
        Cmd::Plotdata { inputs, out } => {
            let texts = inputs
                .iter()
                .map(|p| Ok((p.display().to_string(), fs::read_to_string(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let data = sweep_plotdata(&texts)?;
            for w in &data.warnings {
                eprintln!("{}", serde_json::json!({ "warning": w }));
            }
            match out {
                Some(p) => write_plot_csv(&data.rows, fs::File::create(p)?)?,
                None => write_plot_csv(&data.rows, io::stdout().lock())?,
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
