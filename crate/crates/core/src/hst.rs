//! Hierarchical Sparse Transformer: representative-token layout, the
//! sparse → dense-over-representatives → scatter-back layer, pooling and the
//! classification head.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, transformer_block, AttentionParams, BlockParams, DropoutConfig, Mode};
use crate::error::{HstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{softmax_vec, RowPattern, Tape, Var};
use crate::tensor::Tensor;
use crate::topology::{build_topology, roll_permutation, SparseTopology};

/// Reserved token ids. Task vocabularies start at [`FIRST_FREE_ID`].
pub const PAD_ID: usize = 0;
/// Representative ("[CLS]") token.
pub const REP_ID: usize = 1;
/// Filler id for the dedicated global-token slots.
pub const GLOBAL_ID: usize = 2;
pub const FIRST_FREE_ID: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pooling {
    Mean,
    Max,
    ClsGOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HierInit {
    Random,
    WarmStartCopy,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HstModelConfig {
    /// Sequence length before padding and representative insertion,
    /// including the `g` global slots.
    pub n_base: usize,
    pub g: usize,
    pub w: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
    pub weight_sharing: bool,
    pub hierarchical_enabled: bool,
    pub hier_init: HierInit,
    /// Add the dense-pass output to the representative rows instead of
    /// replacing them.
    pub hier_residual: bool,
    pub scaled_attention: bool,
    pub init_std: f64,
    pub dropout: DropoutConfig,
    pub random_tokens: Option<usize>,
    pub random_seed: Option<u64>,
}

impl Default for HstModelConfig {
    fn default() -> Self {
        Self {
            n_base: 65,
            g: 1,
            w: 8,
            d: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 16,
            num_classes: 2,
            pooling: Pooling::Mean,
            weight_sharing: false,
            hierarchical_enabled: true,
            hier_init: HierInit::Random,
            hier_residual: false,
            scaled_attention: true,
            init_std: 0.02,
            dropout: DropoutConfig::default(),
            random_tokens: None,
            random_seed: None,
        }
    }
}

impl HstModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HstError::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.w == 0 {
            return fail("block width w must be at least 1".into());
        }
        if self.g > self.n_base {
            return fail(format!("g = {} exceeds n_base = {}", self.g, self.n_base));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.vocab_size <= FIRST_FREE_ID {
            return fail(format!("vocab_size must exceed the {FIRST_FREE_ID} reserved ids"));
        }
        if self.pooling == Pooling::ClsGOnly && self.g == 0 {
            return fail("CLS_G_ONLY pooling needs at least one global token".into());
        }
        if self.pooling != Pooling::ClsGOnly && self.n_base == self.g && self.g == 0 {
            return fail("empty sequence cannot be pooled".into());
        }
        if !(0.0..1.0).contains(&self.dropout.hidden) || !(0.0..1.0).contains(&self.dropout.attention) {
            return fail("dropout probabilities must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn shares_weights(&self) -> bool {
        self.weight_sharing || self.hier_init == HierInit::Shared
    }

    /// Length after padding the non-global part up to a multiple of `w`.
    pub fn padded_base(&self) -> usize {
        let content = self.n_base - self.g;
        self.g + content.div_ceil(self.w) * self.w
    }

    pub fn num_blocks(&self) -> usize {
        (self.padded_base() - self.g) / self.w
    }

    /// Length seen by the layers.
    pub fn total_len(&self) -> usize {
        self.padded_base() + if self.hierarchical_enabled { self.num_blocks() } else { 0 }
    }

    pub fn topology(&self) -> Result<SparseTopology> {
        build_topology(
            self.padded_base(),
            self.g,
            self.w,
            self.hierarchical_enabled,
            self.random_tokens,
            self.random_seed,
        )
    }
}

/// Inserts the representative id at the start of every block.
///
/// Returns the augmented ids and the representative positions
/// `g + i·(w+1)`.
pub fn insert_representatives(ids: &[usize], g: usize, w: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if w == 0 || g > ids.len() || (ids.len() - g) % w != 0 {
        return Err(HstError::Config(format!(
            "cannot split {} tokens with g = {g} into blocks of {w}",
            ids.len()
        )));
    }
    let m = (ids.len() - g) / w;
    let mut out = Vec::with_capacity(ids.len() + m);
    out.extend_from_slice(&ids[..g]);
    let mut reps = Vec::with_capacity(m);
    for block in ids[g..].chunks(w) {
        reps.push(out.len());
        out.push(REP_ID);
        out.extend_from_slice(block);
    }
    Ok((out, reps))
}

/// Inverse of [`insert_representatives`].
pub fn remove_representatives(ids: &[usize], rep_positions: &[usize]) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(i, _)| rep_positions.binary_search(i).is_err())
        .map(|(_, &t)| t)
        .collect()
}

/// One input sequence laid out for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub rep_positions: Vec<usize>,
}

/// Per-pass attention structure derived from a (possibly rolled) pad vector.
struct PassLayout {
    sparse: Rc<RowPattern>,
    hier: Option<Rc<RowPattern>>,
    pool_rows: Vec<usize>,
}

/// Optional cyclic roll of the input to layer `layer` (0 = embeddings).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roll {
    pub layer: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HstLayer {
    pub block: BlockParams,
    /// Dense projections over representatives; equal ids to `block.attn`
    /// when weights are shared.
    pub hier: Option<AttentionParams>,
}

/// Parameter ids of a model, grouped by role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HstParams {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<HstLayer>,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct HstModel {
    pub config: HstModelConfig,
    pub params: ParamStore,
    pub ids: HstParams,
    pub topology: SparseTopology,
}

/// Model outputs recorded on a tape.
pub struct ForwardOutput {
    pub logits: Var,
    pub pooled: Var,
    /// Final hidden states (`n × d`) before the head.
    pub hidden: Var,
}

impl HstModel {
    pub fn new(config: HstModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let topology = config.topology()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, std) = (config.d, config.init_std);
        let tokens = store.add("embed.tokens", Tensor::randn(&[config.vocab_size, d], std, &mut rng));
        let positions = store.add("embed.positions", Tensor::randn(&[topology.n, d], std, &mut rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let prefix = format!("layers.{l}");
            let mut block = BlockParams::new(
                &mut store,
                &format!("{prefix}.sparse"),
                d,
                config.heads,
                config.ffn_dim,
                std,
                &mut rng,
            )?;
            block.attn.scaled = config.scaled_attention;
            let hier = if config.hierarchical_enabled {
                let hp = if config.shares_weights() {
                    block.attn.clone()
                } else if config.hier_init == HierInit::WarmStartCopy {
                    block.attn.copy_into(&mut store, &format!("{prefix}.hier"))
                } else {
                    let mut p = AttentionParams::new(&mut store, &format!("{prefix}.hier"), d, config.heads, std, &mut rng)?;
                    p.scaled = config.scaled_attention;
                    p
                };
                Some(hp)
            } else {
                None
            };
            layers.push(HstLayer { block, hier });
        }
        let ln_f_g = store.add("head.ln.gain", Tensor::filled(&[d], 1.0));
        let ln_f_b = store.add("head.ln.bias", Tensor::zeros(&[d]));
        let w_o = store.add("head.w_o", Tensor::randn(&[d, config.num_classes], std, &mut rng));
        Ok(Self {
            config,
            params: store,
            ids: HstParams {
                tokens,
                positions,
                layers,
                ln_f_g,
                ln_f_b,
                w_o,
            },
            topology,
        })
    }

    /// Rebuilds a model around an existing parameter store (checkpoint load).
    pub fn from_parts(config: HstModelConfig, params: ParamStore, ids: HstParams) -> Result<Self> {
        config.validate()?;
        let topology = config.topology()?;
        Ok(Self {
            config,
            params,
            ids,
            topology,
        })
    }

    /// Prepends global slots, pads to the block grid and inserts
    /// representatives. `content` excludes the global slots.
    pub fn layout(&self, content: &[usize]) -> Result<SequenceLayout> {
        let cfg = &self.config;
        let max = cfg.n_base - cfg.g;
        if content.len() > max {
            return Err(HstError::Config(format!(
                "sequence of {} tokens exceeds capacity {max}",
                content.len()
            )));
        }
        if let Some(&bad) = content.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(HstError::Index {
                op: "layout",
                index: bad,
                len: cfg.vocab_size,
            });
        }
        let mut ids = vec![GLOBAL_ID; cfg.g];
        ids.extend_from_slice(content);
        ids.resize(cfg.padded_base(), PAD_ID);
        let (ids, rep_positions) = if cfg.hierarchical_enabled {
            insert_representatives(&ids, cfg.g, cfg.w)?
        } else {
            (ids, Vec::new())
        };
        let pad = ids.iter().map(|&t| t == PAD_ID).collect();
        Ok(SequenceLayout {
            ids,
            pad,
            rep_positions,
        })
    }

    fn pass_layout(&self, pad: &[bool]) -> Result<PassLayout> {
        let topo = &self.topology;
        let sparse = Rc::new(topo.pattern(Some(pad))?);
        if !self.config.hierarchical_enabled {
            let pool_rows = (0..topo.n).filter(|&i| !pad[i]).collect::<Vec<_>>();
            if pool_rows.is_empty() && self.config.pooling != Pooling::ClsGOnly {
                return Err(HstError::Config("no non-padding position to pool".into()));
            }
            return Ok(PassLayout {
                sparse,
                hier: None,
                pool_rows,
            });
        }
        let span = topo.block_span();
        let live: Vec<bool> = topo
            .rep_positions
            .iter()
            .map(|&r| !pad[r] && (r..r + span).any(|p| p != r && !pad[p]))
            .collect();
        let m = live.len();
        let mut dense = vec![false; m * m];
        for a in 0..m {
            for b in 0..m {
                dense[a * m + b] = live[b] || a == b;
            }
        }
        let pool_rows: Vec<usize> = topo
            .rep_positions
            .iter()
            .zip(&live)
            .filter(|(_, &l)| l)
            .map(|(&r, _)| r)
            .collect();
        if pool_rows.is_empty() && self.config.pooling != Pooling::ClsGOnly {
            return Err(HstError::Config("no live representative to pool".into()));
        }
        Ok(PassLayout {
            sparse,
            hier: (m > 0).then(|| RowPattern::from_dense(&dense, m, m)).transpose()?.map(Rc::new),
            pool_rows,
        })
    }

    /// Full forward pass for one laid-out sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        seq: &SequenceLayout,
        roll: Option<Roll>,
        mode: &mut Mode,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let store = &self.params;
        let n = self.topology.n;
        if seq.ids.len() != n {
            return Err(HstError::Dimension {
                op: "model_forward",
                lhs: vec![n],
                rhs: vec![seq.ids.len()],
            });
        }
        if let Some(r) = roll {
            if r.layer >= cfg.layers {
                return Err(HstError::Config(format!(
                    "roll layer {} out of range for {} layers",
                    r.layer, cfg.layers
                )));
            }
        }
        let base = self.pass_layout(&seq.pad)?;
        let perm = roll.filter(|r| r.k % n != 0).map(|r| (r.layer, roll_permutation(n, r.k)));
        let rolled = match &perm {
            Some((_, p)) => {
                let pad: Vec<bool> = p.iter().map(|&i| seq.pad[i]).collect();
                Some(self.pass_layout(&pad)?)
            }
            None => None,
        };

        let tok = tape.param(store, self.ids.tokens);
        let pos = tape.param(store, self.ids.positions);
        let te = tape.embed(&seq.ids, tok)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = tape.embed(&positions, pos)?;
        let mut h = tape.add(te, pe)?;

        let mut active = &base;
        for (l, layer) in self.ids.layers.iter().enumerate() {
            if let Some((rl, p)) = &perm {
                if *rl == l {
                    h = tape.gather_rows(h, p)?;
                    active = rolled.as_ref().expect("rolled layout");
                }
            }
            if l == 0 {
                h = mode.hidden_dropout(tape, h)?;
            }
            h = self.layer_forward(tape, layer, h, active, mode)?;
        }

        let g = tape.param(store, self.ids.ln_f_g);
        let b = tape.param(store, self.ids.ln_f_b);
        let hidden = tape.layer_norm(h, g, b, 1e-5)?;
        let pooled = match cfg.pooling {
            Pooling::ClsGOnly => tape.gather_rows(hidden, &[0])?,
            Pooling::Mean => {
                let rows = tape.gather_rows(hidden, &active.pool_rows)?;
                let p = tape.mean_rows(rows)?;
                tape.reshape(p, &[1, cfg.d])?
            }
            Pooling::Max => {
                let rows = tape.gather_rows(hidden, &active.pool_rows)?;
                let p = tape.max_rows(rows)?;
                tape.reshape(p, &[1, cfg.d])?
            }
        };
        let wo = tape.param(store, self.ids.w_o);
        let logits = tape.matmul(pooled, wo)?;
        let logits = tape.reshape(logits, &[cfg.num_classes])?;
        Ok(ForwardOutput {
            logits,
            pooled,
            hidden,
        })
    }

    fn layer_forward(
        &self,
        tape: &mut Tape,
        layer: &HstLayer,
        h: Var,
        pass: &PassLayout,
        mode: &mut Mode,
    ) -> Result<Var> {
        let hs = transformer_block(tape, &self.params, &layer.block, h, &pass.sparse, mode)?;
        match (&layer.hier, &pass.hier) {
            (Some(hp), Some(pattern)) => {
                let reps = &self.topology.rep_positions;
                let rs = tape.gather_rows(hs, reps)?;
                let r = attend(tape, &self.params, hp, rs, pattern, mode, false)?.values;
                tape.scatter_rows(hs, reps, r, self.config.hier_residual)
            }
            _ => Ok(hs),
        }
    }

    /// Class probabilities for one sequence of content tokens.
    pub fn predict(&self, content: &[usize], roll: Option<Roll>) -> Result<Vec<f64>> {
        let seq = self.layout(content)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &seq, roll, &mut Mode::Eval)?;
        Ok(softmax_vec(&tape.value(out.logits).data))
    }

    /// Batched evaluation-mode probabilities (`b × c`).
    pub fn model_forward(&self, batch: &[Vec<usize>], roll: Option<Roll>) -> Result<Tensor> {
        let c = self.config.num_classes;
        let mut data = Vec::with_capacity(batch.len() * c);
        for content in batch {
            data.extend(self.predict(content, roll)?);
        }
        Tensor::new(vec![batch.len(), c], data)
    }

    /// Distinct attention projection parameters (sparse + hierarchical
    /// q/k/v weights and biases) in layer `l`.
    pub fn attention_param_count(&self, l: usize) -> usize {
        let layer = &self.ids.layers[l];
        let mut ids: Vec<ParamId> = layer.block.attn.ids().to_vec();
        if let Some(h) = &layer.hier {
            ids.extend(h.ids());
        }
        ids.sort();
        ids.dedup();
        ids.iter().map(|&id| self.params.get(id).numel()).sum()
    }

    /// Total distinct parameter count.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}

/// Per-dimension mean or max of the rows of `r` (plain values).
pub fn pool_representatives(r: &Tensor, mode: Pooling) -> Result<Vec<f64>> {
    if mode == Pooling::ClsGOnly {
        return Err(HstError::Config(
            "CLS_G_ONLY reads the first global token, not the representative rows".into(),
        ));
    }
    if r.rows() == 0 || r.rank() != 2 {
        return Err(HstError::Config("pooling needs at least one representative row".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(r.clone());
    let p = match mode {
        Pooling::Mean => tape.mean_rows(v)?,
        _ => tape.max_rows(v)?,
    };
    Ok(tape.value(p).data.clone())
}

/// `softmax(pooled · W_o)`.
pub fn classify(pooled: &[f64], w_o: &Tensor) -> Result<Vec<f64>> {
    let row = Tensor::new(vec![1, pooled.len()], pooled.to_vec())?;
    let logits = row.matmul2(w_o)?;
    Ok(softmax_vec(&logits.data))
}
