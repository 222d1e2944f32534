//! Self-attention regularisation: two forward passes (default and rolled
//! topology), a bidirectional KL consistency term and the combined loss.

use serde::{Deserialize, Serialize};

use crate::attention::Mode;
use crate::error::{HstError, Result};
use crate::hst::{HstModel, Roll};
use crate::tape::{sym_kl_value, softmax_vec, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SarConfig {
    pub enabled: bool,
    pub alpha: f64,
    /// Cyclic shift applied to the input of `roll_layer`, counted in
    /// post-insertion positions.
    pub roll_tokens: usize,
    /// 0 rolls the summed token + position embeddings.
    pub roll_layer: usize,
    /// Second pass reuses the default topology and differs only by dropout.
    pub dropout_only: bool,
}

impl Default for SarConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha: 1.0,
            roll_tokens: 2,
            roll_layer: 0,
            dropout_only: false,
        }
    }
}

impl SarConfig {
    pub fn validate(&self, n: usize, layers: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(HstError::Config(format!("alpha must be a finite value >= 0, got {}", self.alpha)));
        }
        if self.roll_tokens >= n {
            return Err(HstError::Config(format!(
                "roll_tokens {} must be below sequence length {n}",
                self.roll_tokens
            )));
        }
        if self.roll_layer >= layers {
            return Err(HstError::Config(format!(
                "roll_layer {} out of range for {layers} layers",
                self.roll_layer
            )));
        }
        Ok(())
    }

    /// Roll used by the second pass (none in dropout-only mode).
    pub fn second_pass_roll(&self) -> Option<Roll> {
        (!self.dropout_only).then_some(Roll {
            layer: self.roll_layer,
            k: self.roll_tokens,
        })
    }
}

/// Batch-averaged losses. `nll` is the per-example sum over both passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub sar: f64,
    pub total: f64,
    pub p1: Vec<Vec<f64>>,
    pub p2: Vec<Vec<f64>>,
}

const NORMALISATION_TOL: f64 = 1e-8;

/// `½[KL(p1‖p2) + KL(p2‖p1)]` with probabilities clamped at `1e-12`
/// inside the logarithms.
pub fn bidirectional_kl(p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(HstError::Dimension {
            op: "bidirectional_kl",
            lhs: vec![p1.len()],
            rhs: vec![p2.len()],
        });
    }
    for (name, p) in [("p1", p1), ("p2", p2)] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > NORMALISATION_TOL || p.iter().any(|&x| !(x >= 0.0)) {
            return Err(HstError::Contract(format!(
                "{name} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(sym_kl_value(p1, p2))
}

/// Forward + backward for one batch of `(content, label)` examples.
///
/// Gradients of the batch-mean total loss are accumulated into
/// `model.params`; the optimizer step is left to the caller.
pub fn sar_step(
    model: &mut HstModel,
    batch: &[(Vec<usize>, usize)],
    cfg: &SarConfig,
    mode: &mut Mode,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(HstError::Contract("empty batch".into()));
    }
    if cfg.enabled {
        cfg.validate(model.topology.n, model.config.layers)?;
    }
    let b = batch.len() as f64;
    let (mut nll, mut sar) = (0.0, 0.0);
    let (mut p1s, mut p2s) = (Vec::with_capacity(batch.len()), Vec::new());
    let mut tape = Tape::new();
    for (content, label) in batch {
        tape.reset();
        let seq = model.layout(content)?;
        let out1 = model.forward(&mut tape, &seq, None, mode)?;
        let nll1 = tape.cross_entropy(out1.logits, *label)?;
        p1s.push(softmax_vec(&tape.value(out1.logits).data));
        let loss = if cfg.enabled {
            let out2 = model.forward(&mut tape, &seq, cfg.second_pass_roll(), mode)?;
            let nll2 = tape.cross_entropy(out2.logits, *label)?;
            p2s.push(softmax_vec(&tape.value(out2.logits).data));
            let both = tape.add(nll1, nll2)?;
            nll += tape.value(both).item();
            if cfg.alpha != 0.0 {
                let kl = tape.sym_kl(out1.logits, out2.logits)?;
                sar += tape.value(kl).item();
                let weighted = tape.scale(kl, cfg.alpha);
                tape.add(both, weighted)?
            } else {
                let p1 = p1s.last().expect("pushed above");
                let p2 = p2s.last().expect("pushed above");
                sar += sym_kl_value(p1, p2);
                both
            }
        } else {
            nll += tape.value(nll1).item();
            nll1
        };
        if !tape.value(loss).all_finite() {
            return Err(HstError::Domain {
                op: "sar_step",
                detail: "non-finite loss".into(),
            });
        }
        tape.backward(loss)?;
        model.params.accumulate_grads(&tape);
    }
    model.params.scale_grads(1.0 / b);
    let (nll, sar) = (nll / b, sar / b);
    Ok(LossBreakdown {
        nll,
        sar,
        total: nll + cfg.alpha * sar,
        p1: p1s,
        p2: p2s,
    })
}
