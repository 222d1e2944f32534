//! Training loop, evaluation and metrics persistence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hst_core::attention::Mode;
use hst_core::hst::Roll;
use hst_core::{bidirectional_kl, checkpoint, sar_step, HstError, HstModel, SarConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::data::{BatchSampler, Example, Split};
use crate::error::{HarnessError, Result};
use crate::optim::Adam;

/// Independent random streams derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed ^ 0x5eed_da7a_0000_0001,
            dropout: seed ^ 0x5eed_d20f_0000_0002,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean bidirectional KL between default and rolled predictions.
    pub divergence: f64,
    pub nll: f64,
}

/// Roll used to measure topology divergence: the SAR roll, whether or not
/// SAR is enabled for training. `None` when the roll is empty.
pub fn eval_roll(sar: &SarConfig) -> Option<Roll> {
    (sar.roll_tokens > 0).then_some(Roll {
        layer: sar.roll_layer,
        k: sar.roll_tokens,
    })
}

/// Eval-mode accuracy, NLL and (if `roll` is given) mean divergence.
pub fn evaluate(model: &HstModel, data: &[Example], roll: Option<Roll>) -> Result<EvalResult> {
    if data.is_empty() {
        return Ok(EvalResult::default());
    }
    let (mut correct, mut div, mut nll) = (0usize, 0.0, 0.0);
    for (content, label) in data {
        let p = model.predict(content, None)?;
        correct += usize::from(argmax(&p) == *label);
        nll -= p[*label].max(1e-300).ln();
        if let Some(r) = roll {
            div += bidirectional_kl(&p, &model.predict(content, Some(r))?)?;
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        divergence: div / n,
        nll: nll / n,
    })
}

/// Index of the largest entry (first on ties).
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub nll: f64,
    pub sar: f64,
    pub total: f64,
}

/// One evaluation point. Timing fields are kept out of the metrics file so
/// that it is reproducible byte for byte; they go to `timing.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub samples: usize,
    pub lr: f64,
    /// Mean training losses since the previous record.
    pub train: LossSummary,
    pub eval_accuracy: f64,
    pub eval_divergence: f64,
    pub eval_nll: f64,
    #[serde(skip)]
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub samples_per_sec: f64,
}

pub struct TrainOutcome {
    pub model: HstModel,
    pub records: Vec<TrainRecord>,
    pub test: EvalResult,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &TrainRecord {
        self.records.last().expect("training records at least one evaluation")
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
            timing: BufWriter::new(File::create(dir.join(TIMING_FILE))?),
        })
    }

    fn record(&mut self, r: &TrainRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(r)?)?;
        let t = json!({"step": r.step, "wall_clock_s": r.wall_clock_s, "samples_per_sec": r.samples_per_sec});
        writeln!(self.timing, "{t}")?;
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }

    fn diagnostic(&mut self, step: usize, detail: &str, lr: f64) -> Result<()> {
        let d = json!({"step": step, "diverged": true, "detail": detail, "lr": lr});
        writeln!(self.metrics, "{d}")?;
        self.metrics.flush()?;
        Ok(())
    }
}

/// Builds the freshly initialised model for `cfg` (resolved against its task).
pub fn build_model(cfg: &ExperimentConfig) -> Result<HstModel> {
    let c = cfg.resolved();
    Ok(HstModel::new(c.model, Seeds::new(c.train.seed).init)?)
}

/// Generates the task splits, trains, evaluates on the test split and, if
/// `out_dir` is given, writes metrics, summary and checkpoint there.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let c = cfg.resolved();
    let train_set = c.task.generate(Split::Train)?;
    let dev = c.task.generate(Split::Dev)?;
    let test = c.task.generate(Split::Test)?;
    let mut out = train_on(&c, &train_set, &dev, out_dir)?;
    out.test = evaluate(&out.model, &test, eval_roll(&c.sar))?;
    if let Some(dir) = out_dir {
        write_summary(&dir.join(SUMMARY_FILE), out.final_record(), &out.test)?;
    }
    Ok(out)
}

/// Trains a fresh model on explicit data. `out.test` is left at its
/// default; callers evaluate on whatever held-out set they own.
pub fn train_on(cfg: &ExperimentConfig, train_set: &[Example], dev: &[Example], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let c = cfg.resolved();
    c.train.validate()?;
    c.model.validate()?;
    if train_set.is_empty() {
        return Err(HarnessError::Config("empty training set".into()));
    }
    let mut model = build_model(&c)?;
    if c.sar.enabled {
        c.sar.validate(model.topology.n, c.model.layers)?;
    }
    let seeds = Seeds::new(c.train.seed);
    let (bsz, total) = c.train.effective_plan(&c.sar);
    let schedule = c.train.schedule(&c.sar);
    let roll = eval_roll(&c.sar);
    let dropout = c.model.dropout;

    let mut sinks = out_dir.map(Sinks::open).transpose()?;
    if let Some(s) = &sinks {
        fs::write(s.dir.join("config.json"), serde_json::to_string_pretty(&c)?)?;
    }
    let mut sampler = BatchSampler::new(train_set.len(), seeds.data);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.dropout);
    let mut adam = Adam::new(c.train.adam, &model.params);
    let mut records = Vec::new();
    let (mut acc, mut acc_steps, mut samples) = (LossSummary::default(), 0usize, 0usize);
    let start = Instant::now();

    for step in 1..=total {
        let lr = schedule.lr_at(step);
        let batch: Vec<Example> = sampler.next_batch(bsz).into_iter().map(|i| train_set[i].clone()).collect();
        samples += batch.len();
        model.params.zero_grad();
        let mut mode = Mode::Train {
            dropout,
            rng: &mut rng,
        };
        let loss = match sar_step(&mut model, &batch, &c.sar, &mut mode) {
            Ok(l) => l,
            Err(HstError::Domain { detail, .. }) => return Err(diverged(&mut sinks, step, detail, lr)),
            Err(e) => return Err(e.into()),
        };
        if !model.params.all_finite() || !model.params.grad_norm().is_finite() {
            return Err(diverged(&mut sinks, step, "non-finite gradient".into(), lr));
        }
        adam.step(&mut model.params, lr);
        acc.nll += loss.nll;
        acc.sar += loss.sar;
        acc.total += loss.total;
        acc_steps += 1;

        if step % c.train.eval_every == 0 || step == total {
            let ev = evaluate(&model, dev, roll)?;
            let k = acc_steps as f64;
            let elapsed = start.elapsed().as_secs_f64();
            let rec = TrainRecord {
                step,
                samples,
                lr,
                train: LossSummary {
                    nll: acc.nll / k,
                    sar: acc.sar / k,
                    total: acc.total / k,
                },
                eval_accuracy: ev.accuracy,
                eval_divergence: ev.divergence,
                eval_nll: ev.nll,
                wall_clock_s: elapsed,
                samples_per_sec: samples as f64 / elapsed.max(1e-9),
            };
            if let Some(s) = sinks.as_mut() {
                s.record(&rec)?;
            }
            records.push(rec);
            acc = LossSummary::default();
            acc_steps = 0;
        }
    }
    if let Some(s) = &sinks {
        if c.train.save_checkpoint {
            checkpoint::save(&model, &s.dir.join(CHECKPOINT_DIR))?;
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        test: EvalResult::default(),
    })
}

fn diverged(sinks: &mut Option<Sinks>, step: usize, detail: String, lr: f64) -> HarnessError {
    if let Some(s) = sinks.as_mut() {
        // best effort: the divergence itself is the error worth reporting
        let _ = s.diagnostic(step, &detail, lr);
    }
    HarnessError::Diverged { step, detail }
}

pub fn write_summary(path: &Path, last: &TrainRecord, test: &EvalResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "samples",
        "train_nll",
        "train_sar",
        "train_total",
        "dev_accuracy",
        "dev_divergence",
        "test_accuracy",
        "test_divergence",
        "test_nll",
    ])?;
    w.write_record([
        last.step.to_string(),
        last.samples.to_string(),
        last.train.nll.to_string(),
        last.train.sar.to_string(),
        last.train.total.to_string(),
        last.eval_accuracy.to_string(),
        last.eval_divergence.to_string(),
        test.accuracy.to_string(),
        test.divergence.to_string(),
        test.nll.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
