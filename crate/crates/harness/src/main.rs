use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hst_core::checkpoint;
use hst_harness::data::{read_dataset, write_dataset, Split};
use hst_harness::train::{eval_roll, evaluate};
use hst_harness::{bottleneck_sweep, run_experiment, ExperimentConfig, Result};
use serde_json::json;

/// Hierarchical sparse transformer experiments.
#[derive(Parser)]
#[command(name = "hst", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "HST_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?.resolved())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write metrics, summary and checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run name under the output root.
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Evaluate a checkpoint on a dataset file or a generated split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary dataset; otherwise the config's task split is generated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// ST vs HST accuracy across global-token counts.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,4,16")]
        g: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        #[arg(long, default_value = "sweep")]
        name: String,
    },
    /// Write the task's splits as binary datasets with JSON sidecars.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "data")]
        name: String,
    },
    /// Print the model's topology export as JSON.
    InspectTopology {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let root = cli.output_root;
    match cli.cmd {
        Cmd::Train { cfg, name } => {
            let c = cfg.load()?;
            let dir = root.join(name);
            let out = run_experiment(&c, Some(&dir))?;
            Ok(json!({"out_dir": dir, "final": out.final_record(), "test": out.test}))
        }
        Cmd::Eval {
            cfg,
            checkpoint: ckpt,
            data,
            split,
        } => {
            let c = cfg.load()?;
            let model = checkpoint::load(&ckpt)?;
            let examples = match data {
                Some(p) => read_dataset(&p)?.0,
                None => c.task.generate(split.into())?,
            };
            let r = evaluate(&model, &examples, eval_roll(&c.sar))?;
            Ok(json!({"examples": examples.len(), "result": r}))
        }
        Cmd::Sweep { cfg, g, repeats, name } => {
            let c = cfg.load()?;
            let dir = root.join(name);
            let report = bottleneck_sweep(&c, &g, repeats, Some(&dir), |r| {
                eprintln!("{}", json!({"model": r.model, "g": r.g, "seed": r.seed, "accuracy": r.accuracy}));
            })?;
            Ok(json!({"out_dir": dir, "rows": report.rows}))
        }
        Cmd::GenData { cfg, name } => {
            let c = cfg.load()?;
            let dir = root.join(name);
            let mut files = Vec::new();
            for (split, file) in [(Split::Train, "train.bin"), (Split::Dev, "dev.bin"), (Split::Test, "test.bin")] {
                let path = dir.join(file);
                write_dataset(&path, &c.task.generate(split)?, &c.task, split)?;
                files.push(path);
            }
            Ok(json!({"files": files}))
        }
        Cmd::InspectTopology { cfg } => {
            let c = cfg.load()?;
            Ok(serde_json::to_value(c.model.topology()?.to_json())?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
