use std::process::Command;

use hst_analysis::flops::{flop_row, write_flop_csv};
use hst_analysis::plotdata::write_plot_csv;
use hst_analysis::{flop_table, flow_report, parse_topology, sweep_plotdata, AnalysisError, FlopConfig};
use hst_core::topology::build_topology;
use proptest::prelude::*;

/// Three blocks of two tokens behind one global token.
fn three_blocks(reps: bool) -> String {
    serde_json::to_string(&build_topology(7, 1, 2, reps, None, None).unwrap().to_json()).unwrap()
}

#[test]
fn three_block_flow_through_export() {
    let st = flow_report(&parse_topology(&three_blocks(false)).unwrap(), 2).unwrap();
    assert_eq!(st.cross_block_min_depth, Some(2));
    assert_eq!(st.bottleneck_width, 1);
    assert_eq!(st.relays, vec![0]);

    let hst = flow_report(&parse_topology(&three_blocks(true)).unwrap(), 2).unwrap();
    assert!(hst.hierarchical);
    assert_eq!(hst.bottleneck_width, 1 + 3);
    assert_eq!(hst.relays, vec![0, 1, 4, 7]);
}

#[test]
fn st_bottleneck_width_equals_global_count() {
    for g in 1..4 {
        let doc = build_topology(g + 3 * 3, g, 3, false, None, None).unwrap().to_json();
        assert_eq!(flow_report(&doc, 3).unwrap().bottleneck_width, g);
    }
}

#[test]
fn unreachable_pairs_have_no_depth() {
    let doc = build_topology(8, 0, 4, false, None, None).unwrap().to_json();
    let r = flow_report(&doc, 4).unwrap();
    assert_eq!(r.depths[0][5], None);
    assert_eq!(r.depths[0][3], Some(1));
    assert_eq!(r.cross_block_min_depth, None);
}

#[test]
fn histogram_counts_every_pair() {
    let doc = parse_topology(&three_blocks(true)).unwrap();
    let r = flow_report(&doc, 2).unwrap();
    assert_eq!(r.path_histogram.iter().map(|b| b.pairs).sum::<usize>(), r.n * r.n);
    assert!(!r.overflow);
}

proptest! {
    #[test]
    fn delta_is_m_squared_d(g in 0usize..20, w in 1usize..16, m in 1usize..32, d in 1usize..256) {
        let r = flop_row(&FlopConfig { n: g + w * m, g, w, d }).unwrap();
        prop_assert_eq!(r.delta, (m * m * d) as u64);
        prop_assert_eq!(r.dense, ((g + w * m).pow(2) * d) as u64);
    }
}

#[test]
fn sparse_over_dense_scales_inversely_with_n() {
    let rows = flop_table(
        &[256, 1024, 4096]
            .map(|n| FlopConfig { n, g: 16, w: 16, d: 64 }),
    )
    .unwrap();
    let scaled: Vec<f64> = rows.iter().map(|r| r.st_over_dense * r.n as f64).collect();
    for s in &scaled {
        assert!((s / scaled[0] - 1.0).abs() < 0.25, "{scaled:?}");
    }
    assert!(rows.windows(2).all(|p| p[1].st_over_dense < p[0].st_over_dense));
}

#[test]
fn hierarchical_overhead_vanishes_with_fixed_block_count() {
    // m ≪ n regime: the block count stays put while blocks widen
    let rows = flop_table(&[1024, 4096, 16384].map(|n| FlopConfig { n, g: 0, w: n / 8, d: 64 })).unwrap();
    let excess: Vec<f64> = rows.iter().map(|r| r.hst as f64 / r.hst_sparse as f64 - 1.0).collect();
    assert!(excess.windows(2).all(|p| p[1] < p[0]), "{excess:?}");
    assert!(excess[2] < 1e-4);
}

#[test]
fn flop_csv_has_stable_header() {
    let mut buf = Vec::new();
    write_flop_csv(&flop_table(&[FlopConfig { n: 9, g: 1, w: 2, d: 4 }]).unwrap(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("n,g,w,m,d,dense,st,hst_sparse,hst,delta,st_over_dense,hst_over_st\n"));
}

fn input(name: &str, text: &str) -> (String, String) {
    (name.to_string(), text.to_string())
}

#[test]
fn single_summary_passes_through() {
    let text = "model,g,mean_acc,std_acc\nST,0,0.5,0.01\nHST,0,0.95,0\n";
    let data = sweep_plotdata(&[input("a", text)]).unwrap();
    let mut buf = Vec::new();
    write_plot_csv(&data.rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), text);
}

#[test]
fn two_seed_merge() {
    let a = "model,g,seed,accuracy\nST,1,0,0.5\n";
    let b = "model,g,seed,accuracy\nST,1,1,0.75\n";
    let data = sweep_plotdata(&[input("a", a), input("b", b)]).unwrap();
    assert_eq!(data.rows.len(), 1);
    assert_eq!(data.rows[0].mean_acc, 0.625);
    assert_eq!(data.rows[0].std_acc, 0.125);
}

#[test]
fn empty_cell_is_omitted_with_warning() {
    let a = "model,g,seed,accuracy\nST,1,0,\nST,4,0,0.6\n";
    let data = sweep_plotdata(&[input("a", a)]).unwrap();
    assert_eq!(data.rows.len(), 1);
    assert_eq!(data.rows[0].g, 4);
    assert_eq!(data.warnings.len(), 1);
}

#[test]
fn mixed_schemas_are_rejected() {
    let a = "model,g,seed,accuracy\nST,1,0,0.5\n";
    let b = "model,g,mean_acc,std_acc\nST,1,0.5,0\n";
    assert!(matches!(
        sweep_plotdata(&[input("a", a), input("b", b)]),
        Err(AnalysisError::Schema(_))
    ));
    assert!(matches!(
        sweep_plotdata(&[input("c", "model,g,acc\n")]),
        Err(AnalysisError::Schema(_))
    ));
}

#[test]
fn cli_flow_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("t.json");
    std::fs::write(&good, three_blocks(false)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hst-analysis"))
        .args(["flow", good.to_str().unwrap(), "-L", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cross_block_min_depth"], 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n\": 3,\n \"g\": [}").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hst-analysis"))
        .args(["flow", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let e: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(e["error"], "parse");
}

#[test]
fn cli_flops_default_table() {
    let out = Command::new(env!("CARGO_BIN_EXE_hst-analysis")).arg("flops").output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);
}
