//! Wengert-style tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and enough
//! cached state to form the vector-Jacobian product later. `backward` walks
//! the nodes in reverse and accumulates gradients into leaves marked
//! `requires_grad`. Leaf gradients keep accumulating over repeated
//! `backward` calls until `zero_grad` or `reset`.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{HstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive surrogate for `-inf` used by masked softmax.
pub const MASK_FILL: f64 = -1e9;

/// Lower clamp applied to probabilities before taking logarithms in KL terms.
pub const KL_CLAMP: f64 = 1e-12;

/// Compressed row pattern of allowed attention entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowPattern {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    n_cols: usize,
}

impl RowPattern {
    /// Builds the pattern from a dense row-major boolean mask.
    pub fn from_dense(mask: &[bool], n_rows: usize, n_cols: usize) -> Result<Self> {
        if mask.len() != n_rows * n_cols {
            return Err(HstError::Dimension {
                op: "row_pattern",
                lhs: vec![n_rows, n_cols],
                rhs: vec![mask.len()],
            });
        }
        let mut offsets = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for i in 0..n_rows {
            let row = &mask[i * n_cols..(i + 1) * n_cols];
            cols.extend(row.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j));
            if cols.len() == *offsets.last().unwrap() {
                return Err(HstError::Domain {
                    op: "row_pattern",
                    detail: format!("row {i} has no allowed entries"),
                });
            }
            offsets.push(cols.len());
        }
        Ok(Self {
            offsets,
            cols,
            n_cols,
        })
    }

    pub fn full(n: usize) -> Self {
        Self {
            offsets: (0..=n).map(|i| i * n).collect(),
            cols: (0..n).cycle().take(n * n).collect(),
            n_cols: n,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_rows() * self.n_cols];
        for i in 0..self.n_rows() {
            for &j in self.row(i) {
                out[i * self.n_cols + j] = true;
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Reshape {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
        p: usize,
        q: usize,
        r: usize,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: Var,
        mult: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
        accumulate: bool,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    MeanRows {
        a: Var,
    },
    MaxRows {
        a: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    SymKl {
        a: Var,
        b: Var,
        p: Vec<f64>,
        q: Vec<f64>,
    },
    SparseAttention {
        q: Var,
        k: Var,
        v: Var,
        pattern: Rc<RowPattern>,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
        mult: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded; independent tapes may run on different threads
/// against the same (read-only) [`ParamStore`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and parameter binding.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    /// Clears accumulated leaf gradients without touching recorded values.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Binds a stored parameter to this tape, reusing the existing leaf when
    /// the same parameter was already bound (aliased weights share one leaf).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.requires_grad = store.trainable(id);
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    /// Parameter bindings made on this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.shape.iter().product::<usize>(), value.data.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, op, needs)
    }

    // ------------------------------------------------------------------
    // primitives

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(HstError::Dimension {
                op: "reshape",
                lhs: src.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = src.data.clone();
        Ok(self.make(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || HstError::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
        let pairs = broadcast_offsets(&batch, ba, bb);
        let mut out = vec![0.0; pairs.len() * p * r];
        {
            let (da, db) = (&self.value(a).data, &self.value(b).data);
            for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                gemm_nn(
                    &da[oa * p * q..(oa + 1) * p * q],
                    &db[ob * q * r..(ob + 1) * q * r],
                    &mut out[bi * p * r..(bi + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let mut shape = batch;
        shape.extend([p, r]);
        Ok(self.make(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                pairs,
                p,
                q,
                r,
            },
            &[a, b],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(HstError::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.iter().take(s.len() - 2).product::<usize>();
        let src = &self.value(a).data;
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let o = bi * p * q;
            for i in 0..p {
                for j in 0..q {
                    out[o + j * p + i] = src[o + i * q + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.make(shape, out, Op::Transpose { a }, &[a]))
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes (e.g. a bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(HstError::Dimension {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let db = &self.value(b).data;
        let mut out = self.value(a).data.clone();
        let m = db.len().max(1);
        for chunk in out.chunks_mut(m) {
            for (o, &x) in chunk.iter_mut().zip(db) {
                *o += x;
            }
        }
        Ok(self.make(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(HstError::Dimension {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let out = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.make(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let shape = t.shape.clone();
        let out = t.data.iter().map(|x| x * c).collect();
        self.make(shape, out, Op::Scale { a, c }, &[a])
    }

    /// Sum of all entries as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.make(Vec::new(), vec![s], Op::Sum { a }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = t.shape.clone();
        let out = t.data.iter().map(|&x| gelu_fwd(x)).collect();
        self.make(shape, out, Op::Gelu { a }, &[a])
    }

    /// Row-wise softmax over the last axis.
    ///
    /// `mask` entries set to `false` are excluded: the logits get an additive
    /// [`MASK_FILL`] before exponentiation and the resulting probabilities are
    /// then forced to exactly zero. The mask length must divide the number of
    /// elements and be a multiple of the row length; it is repeated over the
    /// leading axes (so an `n×n` mask serves an `h×n×n` score tensor).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let k = t.last_dim();
        if let Some(m) = mask {
            if m.is_empty() || t.numel() % m.len() != 0 || m.len() % k != 0 {
                return Err(HstError::Dimension {
                    op: "softmax_rows",
                    lhs: t.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; t.numel()];
        for (ri, (row, orow)) in t.data.chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let mrow = mask.map(|m| {
                let off = (ri * k) % m.len();
                &m[off..off + k]
            });
            if let Some(mr) = mrow {
                if !mr.iter().any(|&x| x) {
                    return Err(HstError::Domain {
                        op: "softmax_rows",
                        detail: format!("row {ri} is fully masked"),
                    });
                }
            }
            let keep = |j: usize| mrow.map_or(true, |mr| mr[j]);
            let z: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &x)| if keep(j) { x } else { x + MASK_FILL })
                .collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &zj) in orow.iter_mut().zip(&z) {
                *o = (zj - max).exp();
                s += *o;
            }
            for (j, o) in orow.iter_mut().enumerate() {
                *o = if keep(j) { *o / s } else { 0.0 };
            }
        }
        let shape = t.shape.clone();
        Ok(self.make(shape, out, Op::Softmax { a }, &[a]))
    }

    /// Layer normalisation over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] || d == 0 {
            return Err(HstError::Dimension {
                op: "layer_norm",
                lhs: t.shape.clone(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(HstError::Domain {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let rows = t.rows();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = t.shape.clone();
        Ok(self.make(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by `1/(1-p)`. `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(HstError::Domain {
                op: "dropout",
                detail: format!("probability must be in [0, 1), got {p}"),
            });
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mult: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = t.data.iter().zip(&mult).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        Ok(self.make(shape, out, Op::Dropout { a, mult }, &[a]))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embed(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(HstError::Dimension {
                op: "embed",
                lhs: t.shape.clone(),
                rhs: vec![],
            });
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(HstError::Index {
                    op: "embed",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.make(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Selects rows (viewing `a` as `[rows, last_dim]`).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(HstError::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        Ok(self.make(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Copy of `base` whose rows `idx[k]` are replaced by row `k` of `src`
    /// (or incremented by it when `accumulate`). Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], src: Var, accumulate: bool) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (rows, d) = (tb.rows(), tb.last_dim());
        if ts.last_dim() != d || ts.rows() != idx.len() {
            return Err(HstError::Dimension {
                op: "scatter_rows",
                lhs: tb.shape.clone(),
                rhs: ts.shape.clone(),
            });
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows {
                return Err(HstError::Index {
                    op: "scatter_rows",
                    index: i,
                    len: rows,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(HstError::Domain {
                    op: "scatter_rows",
                    detail: format!("duplicate row index {i}"),
                });
            }
        }
        let mut out = tb.data.clone();
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            if accumulate {
                axpy(1.0, ts.row(k), dst);
            } else {
                dst.copy_from_slice(ts.row(k));
            }
        }
        let shape = tb.shape.clone();
        Ok(self.make(
            shape,
            out,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
                accumulate,
            },
            &[base, src],
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        if t.rank() != 2 || start + len > d {
            return Err(HstError::Dimension {
                op: "slice_cols",
                lhs: t.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.make(vec![rows, len], out, Op::SliceCols { a, start }, &[a]))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(HstError::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: t.shape.clone(),
                });
            }
            total += t.last_dim();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.make(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Per-column mean of a 2-D tensor, giving a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        if rows == 0 {
            return Err(HstError::Domain {
                op: "mean_rows",
                detail: "no rows to pool".into(),
            });
        }
        let mut out = vec![0.0; d];
        for r in 0..rows {
            axpy(1.0, t.row(r), &mut out);
        }
        out.iter_mut().for_each(|x| *x /= rows as f64);
        Ok(self.make(vec![d], out, Op::MeanRows { a }, &[a]))
    }

    /// Per-column maximum of a 2-D tensor (first row wins ties).
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        if rows == 0 {
            return Err(HstError::Domain {
                op: "max_rows",
                detail: "no rows to pool".into(),
            });
        }
        let mut out = t.row(0).to_vec();
        let mut argmax = vec![0; d];
        for r in 1..rows {
            for (j, &x) in t.row(r).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = r;
                }
            }
        }
        Ok(self.make(vec![d], out, Op::MaxRows { a, argmax }, &[a]))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let c = t.numel();
        if label >= c {
            return Err(HstError::Index {
                op: "cross_entropy",
                index: label,
                len: c,
            });
        }
        let probs = softmax_vec(&t.data);
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data[label];
        Ok(self.make(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Bidirectional KL `½[KL(p‖q) + KL(q‖p)]` between the softmax
    /// distributions of two logit vectors, with probabilities clamped below
    /// at [`KL_CLAMP`] inside the logarithms.
    pub fn sym_kl(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(HstError::Dimension {
                op: "sym_kl",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let p = softmax_vec(&ta.data);
        let q = softmax_vec(&tb.data);
        let v = sym_kl_value(&p, &q);
        Ok(self.make(Vec::new(), vec![v], Op::SymKl { a, b, p, q }, &[a, b]))
    }

    /// Multi-head attention restricted to `pattern`.
    ///
    /// `q`, `k`, `v` are `[n, d]` (keys/values may have a different row count
    /// equal to `pattern.n_cols()`); heads split the feature axis into
    /// `heads` contiguous slices. `mult`, when given, holds per-entry dropout
    /// multipliers laid out as `heads × nnz`.
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pattern: Rc<RowPattern>,
        heads: usize,
        scale: f64,
        mult: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let n = tq.rows();
        let d = tq.last_dim();
        let shape_err = || HstError::Dimension {
            op: "sparse_attention",
            lhs: tq.shape.clone(),
            rhs: tk.shape.clone(),
        };
        if heads == 0 || d % heads != 0 || tk.last_dim() != d || tv.last_dim() != d {
            return Err(shape_err());
        }
        if pattern.n_rows() != n || pattern.n_cols() != tk.rows() || tk.rows() != tv.rows() {
            return Err(shape_err());
        }
        let nnz = pattern.nnz();
        if let Some(m) = &mult {
            if m.len() != heads * nnz {
                return Err(shape_err());
            }
        }
        let dh = d / heads;
        let mut probs = vec![0.0; heads * nnz];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let cols = pattern.row(i);
                let base = h * nnz + pattern.offsets[i];
                let qi = &tq.data[i * d + c0..i * d + c0 + dh];
                let pr = &mut probs[base..base + cols.len()];
                let mut max = f64::NEG_INFINITY;
                for (s, &j) in pr.iter_mut().zip(cols) {
                    *s = scale * dot(qi, &tk.data[j * d + c0..j * d + c0 + dh]);
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in pr.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                for (e, (s, &j)) in pr.iter_mut().zip(cols).enumerate() {
                    *s /= z;
                    let w = match &mult {
                        Some(m) => *s * m[base + e],
                        None => *s,
                    };
                    if w != 0.0 {
                        axpy(w, &tv.data[j * d + c0..j * d + c0 + dh], orow);
                    }
                }
            }
        }
        Ok(self.make(
            vec![n, d],
            out,
            Op::SparseAttention {
                q,
                k,
                v,
                pattern,
                heads,
                scale,
                probs,
                mult,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities retained by a [`Tape::sparse_attention`]
    /// node, expanded to a dense `heads × n × n_cols` tensor.
    pub fn attention_weights(&self, out: Var) -> Option<Tensor> {
        match &self.nodes[out.0].op {
            Op::SparseAttention {
                pattern,
                heads,
                probs,
                ..
            } => {
                let (n, m, nnz) = (pattern.n_rows(), pattern.n_cols(), pattern.nnz());
                let mut dense = vec![0.0; heads * n * m];
                for h in 0..*heads {
                    for i in 0..n {
                        for (e, &j) in pattern.row(i).iter().enumerate() {
                            dense[h * n * m + i * m + j] = probs[h * nnz + pattern.offsets[i] + e];
                        }
                    }
                }
                Some(Tensor {
                    shape: vec![*heads, n, m],
                    data: dense,
                    requires_grad: false,
                    grad: None,
                })
            }
            _ => None,
        }
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Back-propagates from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(HstError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.value.requires_grad, g) {
                match &mut node.value.grad {
                    Some(acc) => axpy(1.0, &g, acc),
                    None => node.value.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Reshape { a } => {
                if needs(*a) {
                    axpy(1.0, g, slot(grads, nodes, *a));
                }
            }
            Op::MatMul {
                a,
                b,
                pairs,
                p,
                q,
                r,
            } => {
                let (p, q, r) = (*p, *q, *r);
                if needs(*a) {
                    let db = &val(*b).data;
                    let ga = slot(grads, nodes, *a);
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        gemm_nt(
                            &g[bi * p * r..(bi + 1) * p * r],
                            &db[ob * q * r..(ob + 1) * q * r],
                            &mut ga[oa * p * q..(oa + 1) * p * q],
                            p,
                            r,
                            q,
                        );
                    }
                }
                if needs(*b) {
                    let da = &val(*a).data;
                    let gb = slot(grads, nodes, *b);
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        gemm_tn(
                            &da[oa * p * q..(oa + 1) * p * q],
                            &g[bi * p * r..(bi + 1) * p * r],
                            &mut gb[ob * q * r..(ob + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
            Op::Transpose { a } => {
                if needs(*a) {
                    let s = &out.shape;
                    // out is [.., q, p]; input is [.., p, q]
                    let (q, p) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = out.numel() / (p * q).max(1);
                    let ga = slot(grads, nodes, *a);
                    for bi in 0..batch {
                        let o = bi * p * q;
                        for i in 0..p {
                            for j in 0..q {
                                ga[o + i * q + j] += g[o + j * p + i];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    axpy(1.0, g, slot(grads, nodes, *a));
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    let m = gb.len().max(1);
                    for chunk in g.chunks(m) {
                        axpy(1.0, chunk, gb);
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let db = &val(*b).data;
                    let ga = slot(grads, nodes, *a);
                    for ((gv, &x), &y) in ga.iter_mut().zip(g).zip(db) {
                        *gv += x * y;
                    }
                }
                if needs(*b) {
                    let da = &val(*a).data;
                    let gb = slot(grads, nodes, *b);
                    for ((gv, &x), &y) in gb.iter_mut().zip(g).zip(da) {
                        *gv += x * y;
                    }
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    axpy(*c, g, slot(grads, nodes, *a));
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let da = &val(*a).data;
                    let ga = slot(grads, nodes, *a);
                    for ((gv, &x), &gy) in ga.iter_mut().zip(da).zip(g) {
                        *gv += gy * gelu_grad(x);
                    }
                }
            }
            Op::Softmax { a } => {
                if needs(*a) {
                    let k = out.last_dim();
                    let ga = slot(grads, nodes, *a);
                    for ((prow, grow), garow) in out.data.chunks(k).zip(g.chunks(k)).zip(ga.chunks_mut(k)) {
                        let s = dot(prow, grow);
                        for ((gx, &p), &gy) in garow.iter_mut().zip(prow).zip(grow) {
                            *gx += p * (gy - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let rows = out.rows();
                if needs(*x) {
                    let gn = &val(*gain).data;
                    let gx = slot(grads, nodes, *x);
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gn[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2 = dot(&dxh, xh);
                        let c = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += c * (d as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                }
                if needs(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for r in 0..rows {
                        axpy(1.0, &g[r * d..(r + 1) * d], gb);
                    }
                }
            }
            Op::Dropout { a, mult } => {
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    for ((gv, &gy), &m) in ga.iter_mut().zip(g).zip(mult) {
                        *gv += gy * m;
                    }
                }
            }
            Op::Embed { table, ids } => {
                if needs(*table) {
                    let d = out.last_dim();
                    let gt = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if needs(*a) {
                    let d = out.last_dim();
                    let ga = slot(grads, nodes, *a);
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut ga[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::ScatterRows {
                base,
                src,
                idx,
                accumulate,
            } => {
                let d = out.last_dim();
                if needs(*base) {
                    let gb = slot(grads, nodes, *base);
                    axpy(1.0, g, gb);
                    if !accumulate {
                        for &i in idx {
                            let gr = &g[i * d..(i + 1) * d];
                            axpy(-1.0, gr, &mut gb[i * d..(i + 1) * d]);
                        }
                    }
                }
                if needs(*src) {
                    let gs = slot(grads, nodes, *src);
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[i * d..(i + 1) * d], &mut gs[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let len = out.last_dim();
                    let d = val(*a).last_dim();
                    let ga = slot(grads, nodes, *a);
                    for r in 0..out.rows() {
                        axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut ga[r * d + start..r * d + start + len],
                        );
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if needs(p) {
                        let gp = slot(grads, nodes, p);
                        for r in 0..out.rows() {
                            axpy(
                                1.0,
                                &g[r * total + off..r * total + off + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::MeanRows { a } => {
                if needs(*a) {
                    let rows = val(*a).rows();
                    let d = out.numel();
                    let ga = slot(grads, nodes, *a);
                    for r in 0..rows {
                        axpy(1.0 / rows as f64, g, &mut ga[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MaxRows { a, argmax } => {
                if needs(*a) {
                    let d = out.numel();
                    let ga = slot(grads, nodes, *a);
                    for (j, &r) in argmax.iter().enumerate() {
                        ga[r * d + j] += g[j];
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if needs(*logits) {
                    let gl = slot(grads, nodes, *logits);
                    for (j, (gv, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let t = if j == *label { 1.0 } else { 0.0 };
                        *gv += g[0] * (p - t);
                    }
                }
            }
            Op::SymKl { a, b, p, q } => {
                let lp: Vec<f64> = p.iter().map(|&x| x.max(KL_CLAMP).ln()).collect();
                let lq: Vec<f64> = q.iter().map(|&x| x.max(KL_CLAMP).ln()).collect();
                // dL/dp and dL/dq before the softmax Jacobian
                let dp: Vec<f64> = (0..p.len())
                    .map(|i| {
                        let ratio = if p[i] > KL_CLAMP { (p[i] - q[i]) / p[i] } else { 0.0 };
                        0.5 * (lp[i] - lq[i] + ratio)
                    })
                    .collect();
                let dq: Vec<f64> = (0..q.len())
                    .map(|i| {
                        let ratio = if q[i] > KL_CLAMP { (q[i] - p[i]) / q[i] } else { 0.0 };
                        0.5 * (lq[i] - lp[i] + ratio)
                    })
                    .collect();
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    softmax_vjp(p, &dp, g[0], ga);
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    softmax_vjp(q, &dq, g[0], gb);
                }
            }
            Op::SparseAttention {
                q,
                k,
                v,
                pattern,
                heads,
                scale,
                probs,
                mult,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let n = tq.rows();
                let d = tq.last_dim();
                let dh = d / heads;
                let nnz = pattern.nnz();
                // ds: gradient w.r.t. pre-softmax scores, same layout as probs
                let mut ds = vec![0.0; heads * nnz];
                let mut dv_needed = needs(*v);
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..n {
                        let cols = pattern.row(i);
                        let base = h * nnz + pattern.offsets[i];
                        let gi = &g[i * d + c0..i * d + c0 + dh];
                        let mut acc = 0.0;
                        for (e, &j) in cols.iter().enumerate() {
                            let mut dp = dot(gi, &tv.data[j * d + c0..j * d + c0 + dh]);
                            if let Some(m) = mult {
                                dp *= m[base + e];
                            }
                            ds[base + e] = dp;
                            acc += probs[base + e] * dp;
                        }
                        for e in 0..cols.len() {
                            ds[base + e] = probs[base + e] * (ds[base + e] - acc);
                        }
                    }
                }
                if needs(*q) {
                    let gq = slot(grads, nodes, *q);
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..n {
                            let base = h * nnz + pattern.offsets[i];
                            let dst = &mut gq[i * d + c0..i * d + c0 + dh];
                            for (e, &j) in pattern.row(i).iter().enumerate() {
                                axpy(scale * ds[base + e], &tk.data[j * d + c0..j * d + c0 + dh], dst);
                            }
                        }
                    }
                }
                if needs(*k) {
                    let gk = slot(grads, nodes, *k);
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..n {
                            let base = h * nnz + pattern.offsets[i];
                            let qi = &tq.data[i * d + c0..i * d + c0 + dh];
                            for (e, &j) in pattern.row(i).iter().enumerate() {
                                axpy(scale * ds[base + e], qi, &mut gk[j * d + c0..j * d + c0 + dh]);
                            }
                        }
                    }
                }
                if dv_needed {
                    dv_needed = false;
                    let gv = slot(grads, nodes, *v);
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..n {
                            let base = h * nnz + pattern.offsets[i];
                            let gi = &g[i * d + c0..i * d + c0 + dh];
                            for (e, &j) in pattern.row(i).iter().enumerate() {
                                let w = match mult {
                                    Some(m) => probs[base + e] * m[base + e],
                                    None => probs[base + e],
                                };
                                if w != 0.0 {
                                    axpy(w, gi, &mut gv[j * d + c0..j * d + c0 + dh]);
                                }
                            }
                        }
                    }
                }
                debug_assert!(!dv_needed);
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flattened index of `batch`, the matching flat batch offsets of
/// the (possibly broadcast) operands.
fn broadcast_offsets(batch: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let total: usize = batch.iter().product();
    let n = batch.len();
    let offset = |shape: &[usize], coords: &[usize]| {
        let mut off = 0;
        let lead = n - shape.len();
        for (i, &dim) in shape.iter().enumerate() {
            let c = if dim == 1 { 0 } else { coords[lead + i] };
            off = off * dim + c;
        }
        off
    };
    let mut coords = vec![0; n];
    let mut pairs = Vec::with_capacity(total);
    for _ in 0..total {
        pairs.push((offset(a, &coords), offset(b, &coords)));
        for ax in (0..n).rev() {
            coords[ax] += 1;
            if coords[ax] < batch[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
    pairs
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of a slice.
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Clamped bidirectional KL of two probability vectors.
pub(crate) fn sym_kl_value(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.max(KL_CLAMP).ln() - b.max(KL_CLAMP).ln()))
        .sum::<f64>()
}

fn softmax_vjp(p: &[f64], dp: &[f64], scale: f64, out: &mut [f64]) {
    let s = dot(p, dp);
    for ((o, &pi), &di) in out.iter_mut().zip(p).zip(dp) {
        *o += scale * pi * (di - s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central-difference gradient of `f` with respect to each entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-4 || (a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    /// Checks d(sum(w ⊙ op(x)))/dx against finite differences.
    fn check_unary(x: Tensor, op: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut r = rng(99);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let y = op(&mut tape, xv);
        let w = Tensor::uniform(tape.shape(y), 1.0, &mut r);
        let wv = tape.constant(w.clone());
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = numeric_grad(&x, &|xx| {
            let mut t = Tape::new();
            let xv = t.constant(xx.clone());
            let y = op(&mut t, xv);
            t.value(y).data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, HstError::Dimension { .. }));
    }

    #[test]
    fn matmul_sum_grad_is_ones_times_b_transpose() {
        let mut r = rng(1);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let av = t.leaf(a.clone().with_grad());
        let bv = t.constant(b.clone());
        let c = t.matmul(av, bv).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        // ones(3,2) @ bᵀ: every row equals the row sums of b
        let expected: Vec<f64> = (0..3)
            .flat_map(|_| (0..4).map(|k| b.data[k * 2] + b.data[k * 2 + 1]).collect::<Vec<_>>())
            .collect();
        let numeric = numeric_grad(&a, &|aa| aa.matmul2(&b).unwrap().data.iter().sum());
        assert_close(t.grad(av).unwrap(), &expected);
        assert_close(&expected, &numeric);
    }

    #[test]
    fn batched_matmul_broadcasts_and_differentiates() {
        let mut r = rng(2);
        let b = Tensor::uniform(&[3, 2], 1.0, &mut r);
        check_unary(Tensor::uniform(&[2, 4, 3], 1.0, &mut r), &|t, x| {
            let bv = t.constant(b.clone());
            t.matmul(x, bv).unwrap()
        });
        let a = Tensor::uniform(&[2, 4, 3], 1.0, &mut r);
        check_unary(Tensor::uniform(&[3, 2], 1.0, &mut r), &|t, x| {
            let av = t.constant(a.clone());
            t.matmul(av, x).unwrap()
        });
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let p = t.softmax_rows(x, None).unwrap();
        for v in &t.value(p).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let p = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.value(p).data, vec![0.5, 0.5]);

        let x = t.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let p = t.softmax_rows(x, Some(&[true, true])).unwrap();
        let e = [2.0 / 3.0, 1.0 / 3.0];
        for (v, e) in t.value(p).data.iter().zip(e) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let mut r = rng(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::uniform(&[2, 3, 4], 1.0, &mut r));
        let mask = [true, false, true, false, false, true, true, true, true, true, false, true];
        let p = t.softmax_rows(x, Some(&mask)).unwrap();
        let v = t.value(p);
        for (i, row) in v.data.chunks(4).enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for (j, &x) in row.iter().enumerate() {
                if !mask[(i * 4 + j) % 12] {
                    assert_eq!(x.to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_is_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let err = t.softmax_rows(x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, HstError::Domain { .. }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::filled(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(Tensor::filled(&[1, 3], 4.2));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data.iter().all(|&v| v == 0.0));

        let g = t.constant(Tensor::filled(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = t.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(t.value(y).data, vec![1.0, -1.0]);

        let mut r = rng(4);
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::uniform(&[2, 4], 1.0, &mut r));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for row in t.value(y).data.chunks(4) {
            assert!(row.iter().sum::<f64>().abs() / 4.0 < 1e-12);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut r = rng(5);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        check_unary(x.clone(), &|t, v| t.gelu(v));
        check_unary(x.clone(), &|t, v| t.softmax_rows(v, None).unwrap());
        let mask = vec![true, false, true, true];
        check_unary(x.clone(), &move |t, v| t.softmax_rows(v, Some(&mask)).unwrap());
        check_unary(x.clone(), &|t, v| t.transpose(v).unwrap());
        check_unary(x.clone(), &|t, v| t.scale(v, -2.5));
        check_unary(x.clone(), &|t, v| {
            let w = t.mul(v, v).unwrap();
            t.sum(w)
        });
        check_unary(x.clone(), &|t, v| t.gather_rows(v, &[2, 0, 2]).unwrap());
        check_unary(x.clone(), &|t, v| t.slice_cols(v, 1, 2).unwrap());
        check_unary(x.clone(), &|t, v| {
            let a = t.slice_cols(v, 0, 1).unwrap();
            t.concat_cols(&[v, a]).unwrap()
        });
        check_unary(x.clone(), &|t, v| t.mean_rows(v).unwrap());
        check_unary(x.clone(), &|t, v| t.max_rows(v).unwrap());
        check_unary(x.clone(), &|t, v| t.reshape(v, &[2, 6]).unwrap());
        let gain = Tensor::uniform(&[4], 1.0, &mut r);
        let bias = Tensor::uniform(&[4], 1.0, &mut r);
        check_unary(x.clone(), &move |t, v| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(v, g, b, 1e-5).unwrap()
        });
        let bias = Tensor::uniform(&[4], 1.0, &mut r);
        check_unary(x.clone(), &move |t, v| {
            let b = t.constant(bias.clone());
            t.add(v, b).unwrap()
        });
        let logits = Tensor::uniform(&[5], 1.0, &mut r);
        check_unary(logits.clone(), &|t, v| t.cross_entropy(v, 3).unwrap());
        let other = Tensor::uniform(&[5], 1.0, &mut r);
        check_unary(logits.clone(), &move |t, v| {
            let o = t.constant(other.clone());
            t.sym_kl(v, o).unwrap()
        });
    }

    #[test]
    fn layer_norm_affine_and_bias_broadcast_grads() {
        let mut r = rng(6);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let gain = Tensor::uniform(&[4], 1.0, &mut r);
        check_unary(gain.clone(), &move |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::zeros(&[4]));
            t.layer_norm(xv, g, b, 1e-5).unwrap()
        });
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        check_unary(Tensor::uniform(&[4], 1.0, &mut r), &move |t, b| {
            let xv = t.constant(x.clone());
            t.add(xv, b).unwrap()
        });
    }

    #[test]
    fn scatter_and_embed_grads() {
        let mut r = rng(7);
        let src = Tensor::uniform(&[2, 3], 1.0, &mut r);
        check_unary(Tensor::uniform(&[4, 3], 1.0, &mut r), &move |t, v| {
            let s = t.constant(src.clone());
            t.scatter_rows(v, &[3, 1], s, false).unwrap()
        });
        let base = Tensor::uniform(&[4, 3], 1.0, &mut r);
        check_unary(Tensor::uniform(&[2, 3], 1.0, &mut r), &move |t, v| {
            let b = t.constant(base.clone());
            t.scatter_rows(b, &[3, 1], v, true).unwrap()
        });
        check_unary(Tensor::uniform(&[5, 3], 1.0, &mut r), &|t, v| {
            t.embed(&[4, 0, 4, 2], v).unwrap()
        });
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let mut t = Tape::new();
        let table = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.embed(&[0, 3], table), Err(HstError::Index { .. })));
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut r = rng(8);
        let mut t = Tape::new();
        let x = t.constant(Tensor::uniform(&[6, 3], 1.0, &mut r));
        let target = t.constant(Tensor::zeros(&[6, 3]));
        let idx = [4, 1, 5];
        let rows = t.gather_rows(x, &idx).unwrap();
        let scattered = t.scatter_rows(target, &idx, rows, false).unwrap();
        let back = t.gather_rows(scattered, &idx).unwrap();
        assert_eq!(t.value(back).data, t.value(rows).data);
    }

    #[test]
    fn dropout_zero_is_identity_and_scales_survivors() {
        let mut r = rng(9);
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[1000], 1.0));
        assert_eq!(t.dropout(x, 0.0, &mut r).unwrap(), x);
        let y = t.dropout(x, 0.25, &mut r).unwrap();
        for &v in &t.value(y).data {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
        }
        assert!(t.dropout(x, 1.0, &mut r).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::new();
        for c in [2usize, 5, 10] {
            let x = t.constant(Tensor::filled(&[c], 0.7));
            for label in 0..c {
                let l = t.cross_entropy(x, label).unwrap();
                assert!((t.value(l).item() - (c as f64).ln()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_examples_and_accumulation() {
        let mut r = rng(10);
        let x = Tensor::uniform(&[2, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().with_grad());
        let s = t.sum(xv);
        t.backward(s).unwrap();
        assert_eq!(t.grad(xv).unwrap(), &[1.0; 6]);

        let sq = t.mul(xv, xv).unwrap();
        let s2 = t.sum(sq);
        t.zero_grad();
        t.backward(s2).unwrap();
        let expected: Vec<f64> = x.data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(xv).unwrap(), expected.as_slice());

        // a second backward accumulates on top
        t.backward(s2).unwrap();
        let doubled: Vec<f64> = x.data.iter().map(|v| 4.0 * v).collect();
        assert_eq!(t.grad(xv).unwrap(), doubled.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(t.backward(x), Err(HstError::Contract(_))));
    }

    #[test]
    fn sparse_attention_matches_composite_route() {
        let mut r = rng(11);
        let (n, d, heads) = (5, 4, 2);
        let mask: Vec<bool> = (0..n * n).map(|i| i % n == i / n || (i * 7) % 3 == 0).collect();
        let pattern = Rc::new(RowPattern::from_dense(&mask, n, n).unwrap());
        let q = Tensor::uniform(&[n, d], 1.0, &mut r);
        let k = Tensor::uniform(&[n, d], 1.0, &mut r);
        let v = Tensor::uniform(&[n, d], 1.0, &mut r);
        let scale = 0.7;

        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let fused = t.sparse_attention(qv, kv, vv, pattern.clone(), heads, scale, None).unwrap();
        let mut parts = Vec::new();
        for h in 0..heads {
            let qh = t.slice_cols(qv, h * 2, 2).unwrap();
            let kh = t.slice_cols(kv, h * 2, 2).unwrap();
            let vh = t.slice_cols(vv, h * 2, 2).unwrap();
            let kt = t.transpose(kh).unwrap();
            let s = t.matmul(qh, kt).unwrap();
            let s = t.scale(s, scale);
            let p = t.softmax_rows(s, Some(&mask)).unwrap();
            parts.push(t.matmul(p, vh).unwrap());
        }
        let composite = t.concat_cols(&parts).unwrap();
        assert!(t.value(fused).max_abs_diff(t.value(composite)) < 1e-14);

        let w = t.attention_weights(fused).unwrap();
        for row in w.data.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_attention_gradients() {
        let mut r = rng(12);
        let (n, d, heads) = (4, 4, 2);
        let mask: Vec<bool> = (0..n * n).map(|i| (i / n) == 0 || (i % n) <= (i / n)).collect();
        let pattern = Rc::new(RowPattern::from_dense(&mask, n, n).unwrap());
        let k = Tensor::uniform(&[n, d], 1.0, &mut r);
        let v = Tensor::uniform(&[n, d], 1.0, &mut r);
        let mult: Vec<f64> = (0..heads * pattern.nnz()).map(|i| if i % 5 == 0 { 0.0 } else { 1.25 }).collect();
        for dropout in [None, Some(mult)] {
            let (p, kc, vc, dr) = (pattern.clone(), k.clone(), v.clone(), dropout.clone());
            check_unary(Tensor::uniform(&[n, d], 1.0, &mut r), &move |t, q| {
                let kv = t.constant(kc.clone());
                let vv = t.constant(vc.clone());
                t.sparse_attention(q, kv, vv, p.clone(), heads, 0.5, dr.clone()).unwrap()
            });
            let (p, qq, vc, dr) = (pattern.clone(), Tensor::uniform(&[n, d], 1.0, &mut r), v.clone(), dropout.clone());
            check_unary(Tensor::uniform(&[n, d], 1.0, &mut r), &move |t, k| {
                let qv = t.constant(qq.clone());
                let vv = t.constant(vc.clone());
                t.sparse_attention(qv, k, vv, p.clone(), heads, 0.5, dr.clone()).unwrap()
            });
            let (p, qq, kk, dr) = (pattern.clone(), Tensor::uniform(&[n, d], 1.0, &mut r), k.clone(), dropout);
            check_unary(Tensor::uniform(&[n, d], 1.0, &mut r), &move |t, v| {
                let qv = t.constant(qq.clone());
                let kv = t.constant(kk.clone());
                t.sparse_attention(qv, kv, v, p.clone(), heads, 0.5, dr.clone()).unwrap()
            });
        }
    }

    #[test]
    fn row_pattern_rejects_empty_row() {
        assert!(RowPattern::from_dense(&[true, false, false, false], 2, 2).is_err());
        let p = RowPattern::full(3);
        assert_eq!(p.nnz(), 9);
        assert_eq!(p.row(1), &[0, 1, 2]);
    }
}
