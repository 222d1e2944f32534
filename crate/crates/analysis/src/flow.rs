//! Information-flow reports over exported topologies.

use std::collections::BTreeMap;

use hst_core::topology::{FlowGraph, TopologyJson};
use hst_core::SparseTopology;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub paths: u64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub n: usize,
    pub layers: usize,
    pub hierarchical: bool,
    /// `depths[dst][src]`: fewest layers connecting `src → dst`; `null`
    /// when no path exists within `layers`.
    pub depths: Vec<Vec<Option<usize>>>,
    /// Number of `(src, dst)` pairs per path count at depth `layers`.
    pub path_histogram: Vec<HistogramBin>,
    /// Some count saturated at `u64::MAX`.
    pub overflow: bool,
    pub cross_block_min_depth: Option<usize>,
    pub bottleneck_width: usize,
    pub relays: Vec<usize>,
}

/// Parses a topology export; malformed documents report line and column,
/// inconsistent ones name the offending field.
pub fn parse_topology(text: &str) -> Result<TopologyJson> {
    Ok(serde_json::from_str(text)?)
}

/// Flow analysis of `doc` through `layers` layers. The document's
/// `hierarchical` flag defaults to "has representatives".
pub fn flow_report(doc: &TopologyJson, layers: usize) -> Result<FlowReport> {
    let topo = SparseTopology::from_json(doc)?;
    let hierarchical = doc.hierarchical.unwrap_or(topo.has_reps());
    Ok(report_for(&topo, layers, hierarchical))
}

pub fn report_for(topo: &SparseTopology, layers: usize, hierarchical: bool) -> FlowReport {
    let fg = FlowGraph::new(topo, layers, hierarchical);
    let n = topo.n;
    let flat = fg.min_depths();
    let counts = fg.path_counts(layers);
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for &c in counts.data() {
        *hist.entry(c).or_default() += 1;
    }
    FlowReport {
        n,
        layers,
        hierarchical,
        depths: flat.chunks(n.max(1)).map(<[_]>::to_vec).collect(),
        path_histogram: hist.into_iter().map(|(paths, pairs)| HistogramBin { paths, pairs }).collect(),
        overflow: counts.overflow,
        cross_block_min_depth: fg.min_cross_block_depth(),
        bottleneck_width: fg.bottleneck_width(),
        relays: fg.bottleneck_relays().into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hst_core::topology::{build_topology, full_topology};

    #[test]
    fn full_topology_is_one_hop() {
        let r = report_for(&full_topology(5), 3, false);
        assert!(r.depths.iter().flatten().all(|&d| d == Some(1)));
    }

    #[test]
    fn malformed_export_reports_position() {
        let err = parse_topology("{\n  \"n\": 3,\n  \"g\": oops\n}").unwrap_err();
        assert!(matches!(err, crate::AnalysisError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn inconsistent_export_names_field() {
        let mut doc = build_topology(7, 1, 2, false, None, None).unwrap().to_json();
        doc.mask_runs[2] = vec![1, 1];
        let msg = flow_report(&doc, 2).unwrap_err().to_string();
        assert!(msg.contains("mask_runs[2]"), "{msg}");
    }
}
