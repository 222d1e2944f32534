//! Attention cost accounting: dense vs sparse vs hierarchical.

use std::io::Write;

use hst_core::topology::{build_topology, flop_estimate};
use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, Result};

/// One table row request. `n` counts globals plus content tokens (before
/// representatives are inserted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConfig {
    pub n: usize,
    pub g: usize,
    pub w: usize,
    pub d: usize,
}

/// Multiply-accumulate counts per attention layer.
///
/// `st` is the plain sparse layer over the `n` tokens; `hst_sparse` is the
/// sparse pass over the representative-augmented sequence, `hst` adds the
/// dense representative pass, so `delta = hst - hst_sparse = m²·d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub n: usize,
    pub g: usize,
    pub w: usize,
    pub m: usize,
    pub d: usize,
    pub dense: u64,
    pub st: u64,
    pub hst_sparse: u64,
    pub hst: u64,
    pub delta: u64,
    pub st_over_dense: f64,
    pub hst_over_st: f64,
}

pub fn flop_row(c: &FlopConfig) -> Result<FlopRow> {
    let st_topo = build_topology(c.n, c.g, c.w, false, None, None)?;
    let hst_topo = build_topology(c.n, c.g, c.w, true, None, None)?;
    let dense = (c.n as u64).pow(2) * c.d as u64;
    let st = flop_estimate(&st_topo, c.d, false);
    let hst_sparse = flop_estimate(&hst_topo, c.d, false);
    let hst = flop_estimate(&hst_topo, c.d, true);
    Ok(FlopRow {
        n: c.n,
        g: c.g,
        w: c.w,
        m: hst_topo.m,
        d: c.d,
        dense,
        st,
        hst_sparse,
        hst,
        delta: hst - hst_sparse,
        st_over_dense: st as f64 / dense as f64,
        hst_over_st: hst as f64 / st as f64,
    })
}

pub fn flop_table(configs: &[FlopConfig]) -> Result<Vec<FlopRow>> {
    if configs.is_empty() {
        return Err(AnalysisError::Schema("no configurations given".into()));
    }
    configs.iter().map(flop_row).collect()
}

pub fn write_flop_csv<W: Write>(rows: &[FlopRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
