//! Global + local (+ optional random) block attention topologies and
//! graph-level analysis of how information flows through stacked layers.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::tape::RowPattern;

/// Attention connectivity: row `i` may attend to column `j` iff `mask[i][j]`.
///
/// Layout: `g` global tokens first, then `m` blocks of `w` tokens each. When
/// representatives are inserted, each block is preceded by its representative
/// (so blocks span `w + 1` positions) and the representative joins the
/// block's local mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTopology {
    pub n: usize,
    pub g: usize,
    pub w: usize,
    pub m: usize,
    mask: Vec<bool>,
    pub block_starts: Vec<usize>,
    pub rep_positions: Vec<usize>,
    pub random_seed: Option<u64>,
    pub r: Option<usize>,
}

impl SparseTopology {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn has_reps(&self) -> bool {
        !self.rep_positions.is_empty()
    }

    /// Positions per block including the representative slot.
    pub fn block_span(&self) -> usize {
        self.w + usize::from(self.has_reps())
    }

    /// Block index of position `i`, or `None` for global tokens.
    pub fn block_of(&self, i: usize) -> Option<usize> {
        (i >= self.g).then(|| (i - self.g) / self.block_span())
    }

    pub fn is_rep(&self, i: usize) -> bool {
        self.has_reps() && i >= self.g && (i - self.g) % self.block_span() == 0
    }

    /// Row pattern for the attention kernel. Padded key columns are removed
    /// except on the diagonal so that every row keeps at least itself.
    pub fn pattern(&self, pad: Option<&[bool]>) -> Result<RowPattern> {
        match pad {
            None => RowPattern::from_dense(&self.mask, self.n, self.n),
            Some(pad) => {
                if pad.len() != self.n {
                    return Err(HstError::Dimension {
                        op: "topology_pattern",
                        lhs: vec![self.n],
                        rhs: vec![pad.len()],
                    });
                }
                let n = self.n;
                let mut m = self.mask.clone();
                for i in 0..n {
                    for j in 0..n {
                        if pad[j] && i != j {
                            m[i * n + j] = false;
                        }
                    }
                }
                RowPattern::from_dense(&m, n, n)
            }
        }
    }

    /// Mask as a square 0/1 count matrix (`[dst][src]` = row attends column).
    pub fn count_matrix(&self) -> CountMatrix {
        CountMatrix::from_bools(self.n, &self.mask)
    }

    pub fn to_json(&self) -> TopologyJson {
        TopologyJson {
            n: self.n,
            g: self.g,
            w: self.w,
            m: self.m,
            rep_positions: self.rep_positions.clone(),
            hierarchical: None,
            mask_runs: (0..self.n)
                .map(|i| encode_runs(&self.mask[i * self.n..(i + 1) * self.n]))
                .collect(),
        }
    }

    /// Rebuilds a topology from its portable export.
    pub fn from_json(doc: &TopologyJson) -> Result<Self> {
        let span = doc.w + usize::from(!doc.rep_positions.is_empty());
        if doc.w == 0 {
            return Err(HstError::Parse("field `w`: must be at least 1".into()));
        }
        if doc.g + doc.m * span != doc.n {
            return Err(HstError::Parse(format!(
                "field `n`: expected g + m*{span} = {}, got {}",
                doc.g + doc.m * span,
                doc.n
            )));
        }
        let expected_reps: Vec<usize> = if doc.rep_positions.is_empty() {
            Vec::new()
        } else {
            (0..doc.m).map(|i| doc.g + i * span).collect()
        };
        if doc.rep_positions != expected_reps {
            return Err(HstError::Parse(format!(
                "field `rep_positions`: expected {expected_reps:?}"
            )));
        }
        if doc.mask_runs.len() != doc.n {
            return Err(HstError::Parse(format!(
                "field `mask_runs`: expected {} rows, got {}",
                doc.n,
                doc.mask_runs.len()
            )));
        }
        let mut mask = Vec::with_capacity(doc.n * doc.n);
        for (i, runs) in doc.mask_runs.iter().enumerate() {
            let row = decode_runs(runs, doc.n)
                .map_err(|e| HstError::Parse(format!("field `mask_runs[{i}]`: {e}")))?;
            if !row.iter().any(|&b| b) {
                return Err(HstError::Parse(format!("field `mask_runs[{i}]`: row has no allowed entry")));
            }
            mask.extend(row);
        }
        Ok(Self {
            n: doc.n,
            g: doc.g,
            w: doc.w,
            m: doc.m,
            mask,
            block_starts: (0..doc.m).map(|i| doc.g + i * span).collect(),
            rep_positions: doc.rep_positions.clone(),
            random_seed: None,
            r: None,
        })
    }
}

/// Portable topology document. Each mask row is run-length encoded as
/// alternating run lengths starting with a (possibly empty) `false` run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyJson {
    pub n: usize,
    pub g: usize,
    pub w: usize,
    pub m: usize,
    pub rep_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchical: Option<bool>,
    pub mask_runs: Vec<Vec<usize>>,
}

fn encode_runs(row: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut len = 0;
    for &b in row {
        if b == cur {
            len += 1;
        } else {
            runs.push(len);
            cur = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[usize], n: usize) -> std::result::Result<Vec<bool>, String> {
    let total: usize = runs.iter().sum();
    if total != n {
        return Err(format!("run lengths sum to {total}, expected {n}"));
    }
    let mut row = Vec::with_capacity(n);
    for (k, &len) in runs.iter().enumerate() {
        row.extend(std::iter::repeat(k % 2 == 1).take(len));
    }
    Ok(row)
}

/// Builds the global/local(/random) topology over `n_base` tokens.
///
/// `(n_base - g)` must be a multiple of `w`; callers pad beforehand.
pub fn build_topology(
    n_base: usize,
    g: usize,
    w: usize,
    insert_reps: bool,
    r: Option<usize>,
    seed: Option<u64>,
) -> Result<SparseTopology> {
    if w == 0 {
        return Err(HstError::Config("block width w must be at least 1".into()));
    }
    if g > n_base {
        return Err(HstError::Config(format!(
            "global count {g} exceeds sequence length {n_base}"
        )));
    }
    let content = n_base - g;
    if content % w != 0 {
        let pad = w - content % w;
        return Err(HstError::Config(format!(
            "{content} non-global tokens not divisible by block width {w}; pad by {pad} to {}",
            content + pad
        )));
    }
    let m = content / w;
    let span = w + usize::from(insert_reps);
    let n = g + m * span;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let same_block = i >= g && j >= g && (i - g) / span == (j - g) / span;
            mask[i * n + j] = i < g || j < g || same_block;
        }
    }
    if let Some(r) = r.filter(|&r| r > 0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let candidates = n - g;
        let take = r.min(candidates);
        for i in g..n {
            for c in sample(&mut rng, candidates, take).iter() {
                mask[i * n + g + c] = true;
            }
        }
    }
    let block_starts: Vec<usize> = (0..m).map(|i| g + i * span).collect();
    Ok(SparseTopology {
        n,
        g,
        w,
        m,
        mask,
        rep_positions: if insert_reps { block_starts.clone() } else { Vec::new() },
        block_starts,
        random_seed: seed,
        r,
    })
}

/// All-to-all topology over `n` tokens (every token global).
pub fn full_topology(n: usize) -> SparseTopology {
    SparseTopology {
        n,
        g: n,
        w: 1,
        m: 0,
        mask: vec![true; n * n],
        block_starts: Vec::new(),
        rep_positions: Vec::new(),
        random_seed: None,
        r: None,
    }
}

/// Gather indices realising a cyclic roll by `k`: row `i` of the rolled
/// input is row `(i - k) mod n` of the original. `k` is taken modulo `n`.
pub fn roll_permutation(n: usize, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = k % n;
    (0..n).map(|i| (i + n - k) % n).collect()
}

pub fn roll_topology_input_indices(topo: &SparseTopology, k: usize) -> Vec<usize> {
    roll_permutation(topo.n, k)
}

/// Multiply-accumulate count for one attention layer: `nnz·d`, plus the
/// dense representative pass `m²·d` when hierarchical.
pub fn flop_estimate(topo: &SparseTopology, d: usize, hierarchical: bool) -> u64 {
    let sparse = topo.nnz() as u64 * d as u64;
    if hierarchical {
        sparse + (topo.m as u64).pow(2) * d as u64
    } else {
        sparse
    }
}

/// Number of directed paths `src → dst` through `layers` plain sparse layers.
pub fn path_count(topo: &SparseTopology, layers: usize, src: usize, dst: usize) -> u64 {
    let p = topo.count_matrix().pow(layers);
    p.get(dst, src)
}

/// Square matrix of path counts in saturating `u64` arithmetic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountMatrix {
    pub n: usize,
    data: Vec<u64>,
    /// Set once any entry saturated at `u64::MAX`.
    pub overflow: bool,
}

impl CountMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0; n * n];
        for i in 0..n {
            data[i * n + i] = 1;
        }
        Self {
            n,
            data,
            overflow: false,
        }
    }

    pub fn from_bools(n: usize, mask: &[bool]) -> Self {
        Self {
            n,
            data: mask.iter().map(|&b| u64::from(b)).collect(),
            overflow: false,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u64) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    /// `self · other` with saturation.
    pub fn mul(&self, other: &CountMatrix) -> CountMatrix {
        let n = self.n;
        let mut out = vec![0u64; n * n];
        let mut overflow = self.overflow || other.overflow;
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0 {
                    continue;
                }
                for j in 0..n {
                    let b = other.data[k * n + j];
                    if b == 0 {
                        continue;
                    }
                    let (prod, o1) = a.overflowing_mul(b);
                    let cell = &mut out[i * n + j];
                    let (sum, o2) = cell.overflowing_add(prod);
                    if o1 || o2 {
                        overflow = true;
                        *cell = u64::MAX;
                    } else {
                        *cell = sum;
                    }
                }
            }
        }
        CountMatrix {
            n,
            data: out,
            overflow,
        }
    }

    pub fn pow(&self, k: usize) -> CountMatrix {
        let mut acc = CountMatrix::identity(self.n);
        for _ in 0..k {
            acc = self.mul(&acc);
        }
        acc
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&c| c > 0).collect()
    }
}

/// Layered information-flow graph. Each layer is a sequence of sub-steps;
/// in sub-step matrix `s`, `s[dst][src]` is set when information moves from
/// node `src` to node `dst` (i.e. `dst` attends to `src`).
#[derive(Clone, Debug)]
pub struct FlowGraph {
    pub n: usize,
    pub layers: usize,
    steps: Vec<Vec<bool>>,
    /// Non-global, non-representative positions and their block index.
    token_blocks: Vec<Option<usize>>,
    is_global: Vec<bool>,
}

impl FlowGraph {
    /// Plain sparse layers, or HST layers (sparse step followed by a dense
    /// step among representatives that leaves other nodes in place).
    pub fn new(topo: &SparseTopology, layers: usize, hierarchical: bool) -> Self {
        let n = topo.n;
        let mut steps = vec![topo.mask.clone()];
        if hierarchical && topo.has_reps() {
            let mut hier = vec![false; n * n];
            for i in 0..n {
                if topo.is_rep(i) {
                    for &r in &topo.rep_positions {
                        hier[i * n + r] = true;
                    }
                } else {
                    hier[i * n + i] = true;
                }
            }
            steps.push(hier);
        }
        let token_blocks = (0..n)
            .map(|i| if topo.is_rep(i) { None } else { topo.block_of(i) })
            .collect();
        Self {
            n,
            layers,
            steps,
            token_blocks,
            is_global: (0..n).map(|i| i < topo.g).collect(),
        }
    }

    pub fn steps_per_layer(&self) -> usize {
        self.steps.len()
    }

    /// Edges contributed by the sparse sub-step of one layer.
    pub fn edge_count_per_layer(&self) -> usize {
        self.steps[0].iter().filter(|&&b| b).count()
    }

    /// Composite count matrix of one full layer.
    pub fn layer_matrix(&self) -> CountMatrix {
        let mut acc = CountMatrix::identity(self.n);
        for s in &self.steps {
            acc = CountMatrix::from_bools(self.n, s).mul(&acc);
        }
        acc
    }

    /// Path counts after `depth` layers (`[dst][src]`).
    pub fn path_counts(&self, depth: usize) -> CountMatrix {
        self.layer_matrix().pow(depth)
    }

    /// Minimum number of layers (≤ `self.layers`) connecting `src → dst`,
    /// stored as `[dst][src]`; `None` when unreachable within the budget.
    pub fn min_depths(&self) -> Vec<Option<usize>> {
        let n = self.n;
        let layer = self.layer_matrix().to_bools();
        let mut out = vec![None; n * n];
        let mut reach = layer.clone();
        for depth in 1..=self.layers {
            for (o, &r) in out.iter_mut().zip(&reach) {
                if o.is_none() && r {
                    *o = Some(depth);
                }
            }
            reach = bool_mul(n, &layer, &reach);
        }
        out
    }

    /// Ordinary tokens in different blocks (globals and representatives
    /// excluded).
    pub fn cross_block_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for src in 0..self.n {
            for dst in 0..self.n {
                if let (Some(a), Some(b)) = (self.token_blocks[src], self.token_blocks[dst]) {
                    if a != b {
                        pairs.push((src, dst));
                    }
                }
            }
        }
        pairs
    }

    /// Minimum cross-block depth over all cross-block pairs, if any connect.
    pub fn min_cross_block_depth(&self) -> Option<usize> {
        let depths = self.min_depths();
        self.cross_block_pairs()
            .into_iter()
            .filter_map(|(s, d)| depths[d * self.n + s])
            .min()
    }

    /// Distinct intermediate nodes (at any sub-step, excluding the endpoints
    /// themselves) lying on some minimum-depth path between a cross-block pair.
    pub fn bottleneck_relays(&self) -> BTreeSet<usize> {
        let n = self.n;
        let depths = self.min_depths();
        let k = self.steps.len();
        let mut relays = BTreeSet::new();
        for (src, dst) in self.cross_block_pairs() {
            let Some(depth) = depths[dst * n + src] else { continue };
            let total = depth * k;
            // forward reachable sets per sub-step time
            let mut fwd = vec![vec![false; n]; total + 1];
            fwd[0][src] = true;
            for t in 0..total {
                let s = &self.steps[t % k];
                for x in 0..n {
                    if !fwd[t][x] {
                        continue;
                    }
                    for y in 0..n {
                        if s[y * n + x] {
                            fwd[t + 1][y] = true;
                        }
                    }
                }
            }
            // backward co-reachable sets
            let mut bwd = vec![vec![false; n]; total + 1];
            bwd[total][dst] = true;
            for t in (0..total).rev() {
                let s = &self.steps[t % k];
                for x in 0..n {
                    bwd[t][x] = (0..n).any(|y| bwd[t + 1][y] && s[y * n + x]);
                }
            }
            for t in 1..total {
                for x in 0..n {
                    if fwd[t][x] && bwd[t][x] && x != src && x != dst {
                        relays.insert(x);
                    }
                }
            }
        }
        relays
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck_relays().len()
    }

    pub fn is_global(&self, i: usize) -> bool {
        self.is_global[i]
    }
}

fn bool_mul(n: usize, a: &[bool], b: &[bool]) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i in 0..n {
        for k in 0..n {
            if !a[i * n + k] {
                continue;
            }
            for j in 0..n {
                if b[k * n + j] {
                    out[i * n + j] = true;
                }
            }
        }
    }
    out
}
