use clustersim::collectives::merge_softmax_stats;
use clustersim::{canonicalize_gathered, cluster_gather, cluster_reduce, ClusterConfig, ClusterState, ReduceOp, Tensor};
use proptest::prelude::*;

fn cluster_of(payloads: &[Vec<f64>]) -> ClusterState<f64> {
    let mut c = ClusterState::new(ClusterConfig::new(payloads.len())).unwrap();
    for (b, p) in payloads.iter().enumerate() {
        c.store(b, "d", Tensor::vector(p.clone())).unwrap();
    }
    c
}

fn fold(op: ReduceOp, payloads: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = payloads[0].clone();
    for p in &payloads[1..] {
        op.combine(&mut acc, p);
    }
    acc
}

fn cluster_size() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 4, 8, 16])
}

fn integer_payloads() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (cluster_size(), 1usize..24).prop_flat_map(|(n, len)| {
        prop::collection::vec(prop::collection::vec((-1000i32..1000).prop_map(f64::from), len), n)
    })
}

proptest! {
    #[test]
    fn integer_sum_and_max_match_sequential_fold_exactly(payloads in integer_payloads()) {
        for op in [ReduceOp::Sum, ReduceOp::Max] {
            let mut c = cluster_of(&payloads);
            cluster_reduce(&mut c, "d", op, "r").unwrap();
            let want = fold(op, &payloads);
            for b in 0..payloads.len() {
                prop_assert_eq!(c.buffer(b, "d").unwrap().as_slice(), want.as_slice());
            }
        }
    }

    #[test]
    fn reduce_is_invariant_to_rank_permutation(payloads in integer_payloads(), rot in 0usize..16) {
        let n = payloads.len();
        let mut rotated = payloads.clone();
        rotated.rotate_left(rot % n);
        let mut a = cluster_of(&payloads);
        let mut b = cluster_of(&rotated);
        cluster_reduce(&mut a, "d", ReduceOp::Sum, "r").unwrap();
        cluster_reduce(&mut b, "d", ReduceOp::Sum, "r").unwrap();
        prop_assert_eq!(a.buffer(0, "d").unwrap().as_slice(), b.buffer(0, "d").unwrap().as_slice());
    }

    #[test]
    fn softmax_merge_matches_direct_statistics(
        n in cluster_size(),
        scores in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 0..6), 16),
    ) {
        let segments = &scores[..n];
        let payloads: Vec<Vec<f64>> = segments
            .iter()
            .map(|s| {
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let l = if s.is_empty() { 0.0 } else { s.iter().map(|x| (x - m).exp()).sum() };
                vec![m, l]
            })
            .collect();
        let mut c = cluster_of(&payloads);
        cluster_reduce(&mut c, "d", ReduceOp::SoftmaxMerge, "r").unwrap();
        let all: Vec<f64> = segments.iter().flatten().copied().collect();
        let m = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l: f64 = all.iter().map(|x| (x - m).exp()).sum();
        for b in 0..n {
            let got = c.buffer(b, "d").unwrap().as_slice().to_vec();
            prop_assert_eq!(got[0], m);
            if all.is_empty() {
                prop_assert_eq!(got[1], 0.0);
            } else {
                prop_assert!((got[1] - l).abs() <= 1e-6 * l.max(1.0), "{} vs {}", got[1], l);
            }
        }
    }

    #[test]
    fn merge_is_associative_and_commutative(
        a in (-10.0f64..10.0, 0.1f64..5.0),
        b in (-10.0f64..10.0, 0.1f64..5.0),
        c in (-10.0f64..10.0, 0.1f64..5.0),
    ) {
        let left = merge_softmax_stats(merge_softmax_stats(a, b), c);
        let right = merge_softmax_stats(a, merge_softmax_stats(c, b));
        prop_assert_eq!(left.0, right.0);
        prop_assert!((left.1 - right.1).abs() <= 1e-12 * left.1.max(1.0));
        prop_assert_eq!(merge_softmax_stats(a, (f64::NEG_INFINITY, 0.0)), a);
    }

    #[test]
    fn gather_then_canonicalize_is_rank_ordered_concatenation(n in cluster_size(), seg in 1usize..9, seed in any::<u32>()) {
        let mut c = ClusterState::<f64>::new(ClusterConfig::new(n)).unwrap();
        let own = |b: usize| -> Vec<f64> { (0..seg).map(|i| f64::from(seed % 1000) + (b * 100 + i) as f64).collect() };
        for b in 0..n {
            let mut buf = own(b);
            buf.resize(n * seg, -1.0);
            c.store(b, "g", Tensor::vector(buf)).unwrap();
        }
        cluster_gather(&mut c, "g", seg, "g").unwrap();
        let want: Vec<f64> = (0..n).flat_map(own).collect();
        for b in 0..n {
            let canon = canonicalize_gathered(c.buffer(b, "g").unwrap(), b, n, seg);
            prop_assert_eq!(canon.as_slice(), want.as_slice());
        }
        prop_assert_eq!(c.ledger().dsmem_bytes(), (seg * 4 * (n - 1) * n) as u64);
    }
}

#[test]
fn f32_sum_is_within_relative_tolerance_of_fold() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for n in [2usize, 4, 8, 16] {
        for _ in 0..20 {
            let payloads: Vec<Vec<f32>> = (0..n).map(|_| (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
            let mut c = ClusterState::<f32>::new(ClusterConfig::new(n)).unwrap();
            for (b, p) in payloads.iter().enumerate() {
                c.store(b, "d", Tensor::vector(p.clone())).unwrap();
            }
            cluster_reduce(&mut c, "d", ReduceOp::Sum, "r").unwrap();
            for i in 0..32 {
                let want: f64 = payloads.iter().map(|p| f64::from(p[i])).sum();
                let scale: f64 = payloads.iter().map(|p| f64::from(p[i]).abs()).sum();
                for b in 0..n {
                    let got = f64::from(c.buffer(b, "d").unwrap().as_slice()[i]);
                    assert!((got - want).abs() <= 1e-5 * scale.max(1e-3), "{got} vs {want}");
                }
            }
        }
    }
}
