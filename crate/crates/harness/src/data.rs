//! Synthetic tasks and the length-prefixed binary dataset format.
//!
//! Binary layout (all little-endian `u32`): for each record
//! `[len][label][id_0 .. id_{len-1}]`. A JSON sidecar (`<file>.json`)
//! records the schema and the generating task spec.

use std::fs;
use std::path::{Path, PathBuf};

use hst_core::hst::FIRST_FREE_ID;
use hst_core::{HstError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    CrossBlockParity,
    ListopsMini,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub task: Task,
    /// Content length (parity) or maximum length (ListOps), excluding
    /// global slots.
    pub length: usize,
    /// Block width the parity marks are spread over.
    pub block: usize,
    pub max_depth: usize,
    pub max_args: usize,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: Task::CrossBlockParity,
            length: 64,
            block: 8,
            max_depth: 3,
            max_args: 5,
            seed: 0,
            train_size: 5000,
            dev_size: 500,
            test_size: 1000,
        }
    }
}

pub type Example = (Vec<usize>, usize);

/// Parity alphabet.
pub const PARITY_A: usize = FIRST_FREE_ID;
pub const PARITY_B: usize = FIRST_FREE_ID + 1;
const PARITY_FILLERS: std::ops::Range<usize> = FIRST_FREE_ID + 2..FIRST_FREE_ID + 6;

/// ListOps alphabet: digits 0–9 then operators and the closing bracket.
pub const DIGIT_0: usize = FIRST_FREE_ID;
pub const OP_MIN: usize = FIRST_FREE_ID + 10;
pub const OP_MAX: usize = FIRST_FREE_ID + 11;
pub const OP_MED: usize = FIRST_FREE_ID + 12;
pub const OP_SM: usize = FIRST_FREE_ID + 13;
pub const CLOSE: usize = FIRST_FREE_ID + 14;

impl TaskSpec {
    pub fn vocab_size(&self) -> usize {
        match self.task {
            Task::CrossBlockParity => PARITY_FILLERS.end,
            Task::ListopsMini => CLOSE + 1,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::CrossBlockParity => 2,
            Task::ListopsMini => 10,
        }
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }

    fn split_seed(&self, split: Split) -> u64 {
        let salt = match split {
            Split::Train => 0x7472_6169,
            Split::Dev => 0x6465_7600,
            Split::Test => 0x7465_7374,
        };
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
    }

    /// Pure function of the spec and split.
    pub fn generate(&self, split: Split) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed(split));
        let n = self.size(split);
        match self.task {
            Task::CrossBlockParity => generate_cross_block_parity(self, n, &mut rng),
            Task::ListopsMini => generate_listops_mini(self, n, &mut rng),
        }
    }
}

pub fn generate_cross_block_parity(spec: &TaskSpec, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    if spec.block == 0 || spec.length % spec.block != 0 || spec.length == 0 {
        return Err(HstError::Config(format!(
            "parity length {} must be a positive multiple of block {}",
            spec.length, spec.block
        )));
    }
    let m = spec.length / spec.block;
    let out = (0..count)
        .map(|_| {
            let mut ids: Vec<usize> = (0..spec.length).map(|_| rng.gen_range(PARITY_FILLERS)).collect();
            let mut a_count = 0;
            for b in 0..m {
                let mark = if rng.gen::<bool>() { PARITY_A } else { PARITY_B };
                a_count += usize::from(mark == PARITY_A);
                ids[b * spec.block + rng.gen_range(0..spec.block)] = mark;
            }
            (ids, a_count % 2)
        })
        .collect();
    Ok(out)
}

/// Parity label of a sequence: number of `A` marks modulo 2.
pub fn parity_label(ids: &[usize]) -> usize {
    ids.iter().filter(|&&t| t == PARITY_A).count() % 2
}

#[derive(Clone, Debug, PartialEq)]
pub enum ListOp {
    Digit(usize),
    Apply(usize, Vec<ListOp>),
}

impl ListOp {
    pub fn eval(&self) -> usize {
        match self {
            ListOp::Digit(d) => *d,
            ListOp::Apply(op, args) => {
                let mut vals: Vec<usize> = args.iter().map(ListOp::eval).collect();
                match *op {
                    OP_MIN => *vals.iter().min().expect("non-empty"),
                    OP_MAX => *vals.iter().max().expect("non-empty"),
                    OP_MED => {
                        vals.sort_unstable();
                        // lower median for even counts
                        vals[(vals.len() - 1) / 2]
                    }
                    _ => vals.iter().sum::<usize>() % 10,
                }
            }
        }
    }

    pub fn tokens(&self, out: &mut Vec<usize>) {
        match self {
            ListOp::Digit(d) => out.push(DIGIT_0 + d),
            ListOp::Apply(op, args) => {
                out.push(*op);
                for a in args {
                    a.tokens(out);
                }
                out.push(CLOSE);
            }
        }
    }

    fn token_len(&self) -> usize {
        match self {
            ListOp::Digit(_) => 1,
            ListOp::Apply(_, args) => 2 + args.iter().map(ListOp::token_len).sum::<usize>(),
        }
    }
}

/// Parses the bracketed text form, e.g. `[MIN [MAX 2 3] 4]`.
pub fn parse_listops(text: &str) -> Result<ListOp> {
    let spaced = text.replace(']', " ] ");
    let toks: Vec<&str> = spaced.split_whitespace().collect();
    let mut pos = 0;
    let expr = parse_expr(&toks, &mut pos)?;
    if pos != toks.len() {
        return Err(HstError::Parse(format!("trailing input at token {pos}")));
    }
    Ok(expr)
}

fn parse_expr(toks: &[&str], pos: &mut usize) -> Result<ListOp> {
    let tok = *toks
        .get(*pos)
        .ok_or_else(|| HstError::Parse("unexpected end of expression".into()))?;
    *pos += 1;
    let op = match tok {
        "[MIN" => OP_MIN,
        "[MAX" => OP_MAX,
        "[MED" => OP_MED,
        "[SM" => OP_SM,
        d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => {
            return Ok(ListOp::Digit((d.as_bytes()[0] - b'0') as usize))
        }
        other => return Err(HstError::Parse(format!("unexpected token {other:?} at {}", *pos - 1))),
    };
    let mut args = Vec::new();
    while toks.get(*pos) != Some(&"]") {
        if *pos >= toks.len() {
            return Err(HstError::Parse("missing ]".into()));
        }
        args.push(parse_expr(toks, pos)?);
    }
    *pos += 1;
    if args.is_empty() {
        return Err(HstError::Parse("operator without arguments".into()));
    }
    Ok(ListOp::Apply(op, args))
}

fn random_listop(rng: &mut ChaCha8Rng, depth: usize, max_depth: usize, max_args: usize) -> ListOp {
    // the root is always an operator; deeper levels nest with decaying odds
    let nest = depth == 0 || (depth < max_depth && rng.gen_bool(0.35));
    if !nest {
        return ListOp::Digit(rng.gen_range(0..10));
    }
    let op = [OP_MIN, OP_MAX, OP_MED, OP_SM][rng.gen_range(0..4)];
    let k = rng.gen_range(2..=max_args.max(2));
    ListOp::Apply(op, (0..k).map(|_| random_listop(rng, depth + 1, max_depth, max_args)).collect())
}

pub fn generate_listops_mini(spec: &TaskSpec, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    if spec.max_depth == 0 || spec.length < 4 {
        return Err(HstError::Config("ListOps needs max_depth >= 1 and length >= 4".into()));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let expr = random_listop(rng, 0, spec.max_depth, spec.max_args);
        if expr.token_len() > spec.length {
            continue;
        }
        let mut ids = Vec::new();
        expr.tokens(&mut ids);
        out.push((ids, expr.eval()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub records: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub spec: TaskSpec,
    pub split: Split,
}

pub const DATA_FORMAT: &str = "hst-seq-v1: repeated [u32 len][u32 label][len x u32 id], little-endian";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_dataset(path: &Path, data: &[Example], spec: &TaskSpec, split: Split) -> Result<()> {
    let mut bytes = Vec::new();
    for (ids, label) in data {
        bytes.extend((ids.len() as u32).to_le_bytes());
        bytes.extend((*label as u32).to_le_bytes());
        for &t in ids {
            bytes.extend((t as u32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    let side = Sidecar {
        format: DATA_FORMAT.into(),
        records: data.len(),
        vocab_size: spec.vocab_size(),
        num_classes: spec.num_classes(),
        spec: spec.clone(),
        split,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<Example>, Sidecar)> {
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let mut words = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize);
    if bytes.len() % 4 != 0 {
        return Err(HstError::Parse(format!("{}: length not a multiple of 4", path.display())));
    }
    let mut out = Vec::with_capacity(side.records);
    while let Some(len) = words.next() {
        let label = words
            .next()
            .ok_or_else(|| HstError::Parse(format!("record {}: missing label", out.len())))?;
        let ids: Vec<usize> = words.by_ref().take(len).collect();
        if ids.len() != len {
            return Err(HstError::Parse(format!("record {}: truncated", out.len())));
        }
        out.push((ids, label));
    }
    if out.len() != side.records {
        return Err(HstError::Parse(format!(
            "sidecar lists {} records, file holds {}",
            side.records,
            out.len()
        )));
    }
    Ok((out, side))
}

/// Epoch-wise shuffled mini-batch index stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
