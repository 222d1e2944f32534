use std::collections::VecDeque;

use hst_core::sar::bidirectional_kl;
use hst_core::tape::{softmax_vec, Tape};
use hst_core::topology::{build_topology, flop_estimate, roll_permutation, FlowGraph};
use hst_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len).prop_map(|x| softmax_vec(&x))
}

/// Minimum layers by breadth-first search over the layered graph
/// (state = (node, sub-step phase)).
fn bfs_depths(topo: &hst_core::SparseTopology, hier: bool, max_layers: usize) -> Vec<Option<usize>> {
    let n = topo.n;
    let steps = if hier && topo.has_reps() { 2 } else { 1 };
    let edge = |phase: usize, src: usize, dst: usize| -> bool {
        if phase == 0 {
            topo.allowed(dst, src)
        } else if topo.is_rep(dst) {
            topo.is_rep(src)
        } else {
            src == dst
        }
    };
    let mut out = vec![None; n * n];
    for src in 0..n {
        // dist[t][x]: reachable after t sub-steps
        let mut seen = vec![vec![false; n]; max_layers * steps + 1];
        let mut queue = VecDeque::from([(0usize, src)]);
        seen[0][src] = true;
        while let Some((t, x)) = queue.pop_front() {
            if t == max_layers * steps {
                continue;
            }
            for y in 0..n {
                if edge(t % steps, x, y) && !seen[t + 1][y] {
                    seen[t + 1][y] = true;
                    queue.push_back((t + 1, y));
                }
            }
        }
        for dst in 0..n {
            out[dst * n + src] = (1..=max_layers).find(|&l| seen[l * steps][dst]);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalise_and_zero_masked(
        data in prop::collection::vec(-50.0f64..50.0, 24),
        mask_bits in prop::collection::vec(any::<bool>(), 24),
    ) {
        let mut mask = mask_bits;
        for r in 0..4 { mask[r * 6 + r] = true; }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 6], data).unwrap());
        let p = tape.softmax_rows(x, Some(&mask)).unwrap();
        for (r, row) in tape.value(p).data.chunks(6).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &v) in row.iter().enumerate() {
                if !mask[r * 6 + j] { prop_assert_eq!(v.to_bits(), 0u64); }
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn gather_inverts_scatter_on_distinct_rows(seed in any::<u64>(), pick in prop::sample::subsequence((0..10).collect::<Vec<usize>>(), 1..10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let base = tape.constant(Tensor::randn(&[10, 3], 1.0, &mut rng));
        let src = tape.constant(Tensor::randn(&[pick.len(), 3], 1.0, &mut rng));
        let s = tape.scatter_rows(base, &pick, src, false).unwrap();
        let back = tape.gather_rows(s, &pick).unwrap();
        prop_assert_eq!(&tape.value(back).data, &tape.value(src).data);
    }

    #[test]
    fn layer_norm_centres_rows(data in prop::collection::vec(-1.0f64..1.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data.chunks(4) {
            prop_assert!(row.iter().sum::<f64>().abs() / 4.0 < 1e-12);
        }
    }

    #[test]
    fn dropout_replay_is_seed_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::filled(&[64], 1.0));
            let y = tape.dropout(x, 0.3, &mut rng).unwrap();
            tape.value(y).data.clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn topology_invariants(g in 0usize..4, w in 1usize..5, m in 0usize..5, reps in any::<bool>()) {
        let t = build_topology(g + w * m, g, w, reps, None, None).unwrap();
        prop_assert_eq!(t.m * t.w + t.g + if reps { t.m } else { 0 }, t.n);
        let span = w + usize::from(reps);
        for i in 0..t.n {
            prop_assert!((0..t.n).any(|j| t.allowed(i, j)));
            for j in 0..t.n {
                let same = i >= g && j >= g && (i - g) / span == (j - g) / span;
                prop_assert_eq!(t.allowed(i, j), i < g || j < g || same);
            }
        }
    }

    #[test]
    fn roll_is_a_cyclic_bijection(n in 1usize..40, k1 in 0usize..40, k2 in 0usize..40) {
        let a = roll_permutation(n, k1);
        let mut sorted = a.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let b = roll_permutation(n, k2);
        let composed: Vec<usize> = (0..n).map(|i| b[a[i]]).collect();
        prop_assert_eq!(composed, roll_permutation(n, k1 + k2));
    }

    #[test]
    fn kl_properties(p in prob_vec(4), q in prob_vec(4)) {
        let pq = bidirectional_kl(&p, &q).unwrap();
        let qp = bidirectional_kl(&q, &p).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert_eq!(pq.to_bits(), qp.to_bits());
        prop_assert_eq!(bidirectional_kl(&p, &p).unwrap(), 0.0);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6) {
            prop_assert!(pq > 0.0);
        }
    }

    #[test]
    fn hierarchical_flop_term_is_m_squared_d(g in 0usize..4, w in 1usize..6, m in 1usize..8, d in 1usize..64) {
        let t = build_topology(g + w * m, g, w, true, None, None).unwrap();
        prop_assert_eq!(flop_estimate(&t, d, true) - flop_estimate(&t, d, false), (m * m * d) as u64);
    }

    #[test]
    fn min_depths_agree_with_bfs(g in 0usize..3, w in 1usize..4, m in 1usize..5, reps in any::<bool>(), layers in 1usize..4) {
        let t = build_topology(g + w * m, g, w, reps, None, None).unwrap();
        prop_assume!(t.n <= 32);
        for hier in [false, true] {
            let fg = FlowGraph::new(&t, layers, hier);
            prop_assert_eq!(fg.min_depths(), bfs_depths(&t, hier, layers));
        }
    }

    #[test]
    fn hierarchy_never_reduces_path_counts(g in 0usize..3, w in 1usize..5, m in 1usize..5, depth in 1usize..4) {
        let st = build_topology(g + w * m, g, w, false, None, None).unwrap();
        let hst = build_topology(g + w * m, g, w, true, None, None).unwrap();
        prop_assume!(hst.n <= 32);
        let sc = FlowGraph::new(&st, depth, false).path_counts(depth);
        let hc = FlowGraph::new(&hst, depth, true).path_counts(depth);
        // original token i sits at i (globals) or i + block + 1 (with reps)
        let map = |i: usize| if i < g { i } else { i + (i - g) / w + 1 };
        for s in 0..st.n {
            for d in 0..st.n {
                prop_assert!(hc.get(map(d), map(s)) >= sc.get(d, s));
            }
        }
    }
}
