use clustersim::analysis::{
    analytical_traffic, dataflow_traffic, traffic_gather, traffic_reduce, TrafficBreakdown,
};
use clustersim::dataflows::trace_collectives;
use clustersim::{
    cluster_gather, cluster_reduce, ClusterConfig, ClusterState, DataflowKind, ModelDims, Precision, ReduceOp,
    StatsReduction, Tensor,
};

fn dims_for(kind: DataflowKind, s: usize) -> ModelDims {
    if kind.is_mla() {
        ModelDims::mla(2, 128, 2, 32, s, 64)
    } else {
        ModelDims::mha(2, 128, 2, 32, s)
    }
}

#[test]
fn collective_ledgers_match_formulas_on_grid() {
    let sizes = [4u64, 64, 1024, 4096, 16384];
    let ns = [1usize, 2, 4, 16];
    for &size in &sizes {
        for &n in &ns {
            let elems = (size / 4) as usize;
            let mut c = ClusterState::<f32>::new(ClusterConfig::new(n)).unwrap();
            for b in 0..n {
                c.store(b, "r", Tensor::zeros(&[elems])).unwrap();
                c.store(b, "g", Tensor::zeros(&[n * elems])).unwrap();
            }
            cluster_reduce(&mut c, "r", ReduceOp::Sum, "r").unwrap();
            cluster_gather(&mut c, "g", elems, "g").unwrap();
            let t = c.ledger().stage_totals();
            assert_eq!(t.get("r").copied().unwrap_or(0), traffic_reduce(size, n).unwrap());
            assert_eq!(t.get("g").copied().unwrap_or(0), traffic_gather(size, n).unwrap());
            assert_eq!(traffic_gather(size, n).unwrap(), size * (n as u64) * (n as u64 - 1));
        }
    }
}

#[test]
fn stage_totals_add_up() {
    for kind in DataflowKind::ALL {
        for n in [2, 4, 8] {
            let t: TrafficBreakdown =
                dataflow_traffic(kind, &dims_for(kind, 40), n, Precision::F16Emulated, StatsReduction::TwoPass)
                    .unwrap();
            assert!(t.reconciles(), "{kind} n={n}: {t:?}");
            assert_eq!(t.headline_analytical() + t.statistics_analytical(), t.total_analytical());
            assert_eq!(t.total_measured(), Some(t.total_analytical()));
        }
    }
}

#[test]
fn merged_statistics_reconcile_too() {
    for kind in [DataflowKind::SplitToken, DataflowKind::FusedMla] {
        let t = dataflow_traffic(kind, &dims_for(kind, 9), 4, Precision::F32, StatsReduction::Merged).unwrap();
        assert!(t.reconciles());
        let two = analytical_traffic(kind, &dims_for(kind, 9), 4, Precision::F32, StatsReduction::TwoPass).unwrap();
        assert_eq!(t.statistics_analytical(), two.statistics_analytical());
    }
}

#[test]
fn split_head_grows_with_sequence_split_token_does_not() {
    let dims = ModelDims::mha(1, 4096, 32, 128, 0);
    let at = |kind, s| {
        analytical_traffic(kind, &dims.with_seq_len(s), 4, Precision::F16Emulated, StatsReduction::TwoPass)
            .unwrap()
            .headline_analytical()
    };
    let st: Vec<u64> = [128, 1024, 16384].iter().map(|&s| at(DataflowKind::SplitToken, s)).collect();
    assert!(st.windows(2).all(|w| w[0] == w[1]));
    let sh: Vec<u64> = [128, 1024, 16384].iter().map(|&s| at(DataflowKind::SplitHead, s)).collect();
    assert_eq!(sh[2] - sh[1], (16384 - 1024) * 2 * 2 * 4);
}

#[test]
fn trace_rounds_are_log2_n() {
    for kind in DataflowKind::ALL {
        for n in [1usize, 2, 4, 8, 16] {
            let dims = if kind.is_mla() {
                ModelDims::mla(1, 64, 1, 16, 4, 32)
            } else {
                ModelDims::mha(1, 64, 1, 16, 4)
            };
            let ledger = trace_collectives(kind, &dims, ClusterConfig::new(n), StatsReduction::TwoPass).unwrap();
            if n == 1 {
                assert!(ledger.is_empty());
            }
            for (c, inv) in ledger.invocations() {
                assert_eq!(ledger.rounds_of(c, inv), n.trailing_zeros() as usize);
            }
        }
    }
}
