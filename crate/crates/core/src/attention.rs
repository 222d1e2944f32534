//! Multi-head attention over a row pattern and the pre-norm transformer block.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{RowPattern, Tape, Var};
use crate::tensor::Tensor;

/// Dropout probabilities applied in training mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// On residual-branch outputs and embeddings.
    pub hidden: f64,
    /// On attention probabilities.
    pub attention: f64,
}

/// Forward mode. Training carries the dropout configuration and the random
/// stream that dropout masks are drawn from.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout: DropoutConfig,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Applies hidden dropout in training mode, identity otherwise.
    pub fn hidden_dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Mode::Train { dropout, rng } if dropout.hidden > 0.0 => tape.dropout(x, dropout.hidden, *rng),
            _ => Ok(x),
        }
    }

    fn attention_mult(&mut self, len: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Mode::Train { dropout, rng } if dropout.attention > 0.0 => {
                let p = dropout.attention;
                if !(0.0..1.0).contains(&p) {
                    return Err(HstError::Domain {
                        op: "attention_dropout",
                        detail: format!("probability must be in [0, 1), got {p}"),
                    });
                }
                let keep = 1.0 / (1.0 - p);
                Ok(Some(
                    (0..len)
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect(),
                ))
            }
            _ => Ok(None),
        }
    }
}

/// Query/key/value projections (`[d_in, d_out]` weights, shared bias per
/// projection across heads).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub heads: usize,
    pub d: usize,
    /// Scale scores by `1/sqrt(d/heads)`.
    pub scaled: bool,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(HstError::Config(format!(
                "hidden size {d} must be divisible by head count {heads}"
            )));
        }
        let mut mat = |name: &str, rng: &mut ChaCha8Rng| {
            store.add(format!("{prefix}.{name}"), Tensor::randn(&[d, d], init_std, rng))
        };
        let wq = mat("wq", rng);
        let wk = mat("wk", rng);
        let wv = mat("wv", rng);
        let bq = store.add(format!("{prefix}.bq"), Tensor::zeros(&[d]));
        let bk = store.add(format!("{prefix}.bk"), Tensor::zeros(&[d]));
        let bv = store.add(format!("{prefix}.bv"), Tensor::zeros(&[d]));
        Ok(Self {
            wq,
            wk,
            wv,
            bq,
            bk,
            bv,
            heads,
            d,
            scaled: true,
        })
    }

    /// Registers fresh copies of this set's current values under `prefix`.
    pub fn copy_into(&self, store: &mut ParamStore, prefix: &str) -> Self {
        let mut copy = |id: ParamId, name: &str| {
            let t = store.get(id).clone();
            store.add(format!("{prefix}.{name}"), t)
        };
        Self {
            wq: copy(self.wq, "wq"),
            wk: copy(self.wk, "wk"),
            wv: copy(self.wv, "wv"),
            bq: copy(self.bq, "bq"),
            bk: copy(self.bk, "bk"),
            bv: copy(self.bv, "bv"),
            heads: self.heads,
            d: self.d,
            scaled: self.scaled,
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.wq, self.wk, self.wv, self.bq, self.bk, self.bv]
    }

    pub fn score_scale(&self) -> f64 {
        if self.scaled {
            1.0 / ((self.d / self.heads) as f64).sqrt()
        } else {
            1.0
        }
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Var, Var)> {
        let mut proj = |w: ParamId, b: ParamId| -> Result<Var> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let x = tape.matmul(h, wv)?;
            tape.add(x, bv)
        };
        Ok((proj(self.wq, self.bq)?, proj(self.wk, self.bk)?, proj(self.wv, self.bv)?))
    }
}

pub struct AttentionOutput {
    pub values: Var,
    /// `heads × n × n` probabilities, kept only on request.
    pub weights: Option<Tensor>,
}

/// Masked multi-head attention of `h` (`n × d`) with itself.
pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    h: Var,
    pattern: &Rc<RowPattern>,
    mode: &mut Mode,
    keep_weights: bool,
) -> Result<AttentionOutput> {
    let n = tape.value(h).rows();
    if pattern.n_rows() != n {
        return Err(HstError::Dimension {
            op: "attend",
            lhs: tape.shape(h).to_vec(),
            rhs: vec![pattern.n_rows(), pattern.n_cols()],
        });
    }
    let (q, k, v) = params.project(tape, store, h)?;
    let mult = mode.attention_mult(params.heads * pattern.nnz())?;
    let values = tape.sparse_attention(q, k, v, pattern.clone(), params.heads, params.score_scale(), mult)?;
    let weights = if keep_weights { tape.attention_weights(values) } else { None };
    Ok(AttentionOutput { values, weights })
}

/// Same computation as [`attend`] (without dropout) assembled from generic
/// primitives over a dense `n × n` boolean mask.
pub fn attend_composite(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    h: Var,
    mask: &[bool],
) -> Result<Var> {
    let (q, k, v) = params.project(tape, store, h)?;
    let dh = params.d / params.heads;
    let mut parts = Vec::with_capacity(params.heads);
    for head in 0..params.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, params.score_scale());
        let p = tape.softmax_rows(s, Some(mask))?;
        parts.push(tape.matmul(p, vh)?);
    }
    tape.concat_cols(&parts)
}

/// Pre-norm residual block: `x + Wo·attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_eps: f64,
}

impl BlockParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let attn = AttentionParams::new(store, &format!("{prefix}.attn"), d, heads, init_std, rng)?;
        let wo = store.add(format!("{prefix}.wo"), Tensor::randn(&[d, d], init_std, rng));
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(&[d]));
        let ln1_g = store.add(format!("{prefix}.ln1.gain"), Tensor::filled(&[d], 1.0));
        let ln1_b = store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d]));
        let ln2_g = store.add(format!("{prefix}.ln2.gain"), Tensor::filled(&[d], 1.0));
        let ln2_b = store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d]));
        let w1 = store.add(format!("{prefix}.mlp.w1"), Tensor::randn(&[d, ffn], init_std, rng));
        let b1 = store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[ffn]));
        let w2 = store.add(format!("{prefix}.mlp.w2"), Tensor::randn(&[ffn, d], init_std, rng));
        let b2 = store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]));
        Ok(Self {
            attn,
            wo,
            bo,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
            ln_eps: 1e-5,
        })
    }
}

pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BlockParams,
    h: Var,
    pattern: &Rc<RowPattern>,
    mode: &mut Mode,
) -> Result<Var> {
    let lin = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    };
    let g1 = tape.param(store, p.ln1_g);
    let b1 = tape.param(store, p.ln1_b);
    let x = tape.layer_norm(h, g1, b1, p.ln_eps)?;
    let a = attend(tape, store, &p.attn, x, pattern, mode, false)?.values;
    let a = lin(tape, a, p.wo, p.bo)?;
    let a = mode.hidden_dropout(tape, a)?;
    let h = tape.add(h, a)?;

    let g2 = tape.param(store, p.ln2_g);
    let b2 = tape.param(store, p.ln2_b);
    let x = tape.layer_norm(h, g2, b2, p.ln_eps)?;
    let f = lin(tape, x, p.w1, p.b1)?;
    let f = tape.gelu(f);
    let f = lin(tape, f, p.w2, p.b2)?;
    let f = mode.hidden_dropout(tape, f)?;
    tape.add(h, f)
}
