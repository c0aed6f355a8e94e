mod common;

use common::oracles;
use facegraph::backend::Graph;
use facegraph::patchgraph::{build_adjacency, igcn_layer, merge_tensor, normalize_adjacency, split_tensor, AdjacencyScheme, IgcnMode};
use facegraph::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schemes() -> impl Strategy<Value = AdjacencyScheme> {
    prop_oneof![
        Just(AdjacencyScheme::Identity),
        Just(AdjacencyScheme::Spatial4),
        Just(AdjacencyScheme::MirrorSpatial),
        Just(AdjacencyScheme::FullyLinked),
    ]
}

#[test]
fn igcn_matches_loop_oracle_in_f32() {
    for seed in 0..10u64 {
        for k in [1usize, 2, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform([2, 3, 32, 32], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform([4, 3, 3, 3], -0.5, 0.5, &mut rng);
            let b = Tensor::<f64>::uniform([4], -0.1, 0.1, &mut rng);
            let adj = normalize_adjacency(&build_adjacency(k, &AdjacencyScheme::default_for(k)).unwrap());
            let want = oracles::igcn(&x, &w, b.data(), &adj, 1);
            let g = Graph::<f32>::new();
            let got = igcn_layer(&g.constant(x.cast()), &g.constant(w.cast()), &g.constant(b.cast()), &adj, IgcnMode::Conv, 1).unwrap();
            let diff = got.value().cast::<f64>().max_abs_diff(&want);
            assert!(diff < 1e-5, "seed {seed} k {k}: {diff}");
        }
    }
}

#[test]
fn igcn_k1_identity_is_relu_conv_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::uniform([2, 4, 9, 9], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform([5, 4, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::<f32>::uniform([5], -1.0, 1.0, &mut rng);
    let adj = normalize_adjacency(&build_adjacency(1, &AdjacencyScheme::Identity).unwrap());
    let g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
    let ig = igcn_layer(&xv, &wv, &bv, &adj, IgcnMode::Conv, 1).unwrap();
    let plain = xv.conv2d(&wv, Some(&bv), 1, 1).unwrap().relu();
    assert_eq!(ig.value().data(), plain.value().data());
}

#[test]
fn stride_two_conv_oracle_per_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::uniform([1, 2, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform([3], -1.0, 1.0, &mut rng);
    let adj = normalize_adjacency(&build_adjacency(2, &AdjacencyScheme::FullyLinked).unwrap());
    let g = Graph::new();
    let got = igcn_layer(&g.constant(x.clone()), &g.constant(w.clone()), &g.constant(b.clone()), &adj, IgcnMode::Conv, 2).unwrap();
    assert_eq!(got.shape(), vec![1, 3, 8, 8]);
    assert!(got.value().max_abs_diff(&oracles::igcn(&x, &w, b.data(), &adj, 2)) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_then_merge_is_identity(n in 1usize..=2, c in 1usize..=3, k in 1usize..=4, p in 1usize..=4, seed in any::<u64>()) {
        let x = Tensor::<f64>::uniform([n, c, k * p, k * p], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let parts = split_tensor(&x, k).unwrap();
        prop_assert_eq!(parts.shape(), &[k * k, n, c, p, p]);
        prop_assert_eq!(merge_tensor(&parts, k).unwrap(), x);
    }

    #[test]
    fn normalized_adjacency_is_symmetric_and_bounded(k in prop::sample::select(vec![1usize, 2, 3, 4, 8]), scheme in schemes()) {
        let adj = normalize_adjacency(&build_adjacency(k, &scheme).unwrap());
        let n = k * k;
        for i in 0..n {
            prop_assert!(adj.weight(i, i) > 0.0);
            for j in 0..n {
                prop_assert_eq!(adj.weight(i, j), adj.weight(j, i));
                prop_assert!((0.0..=1.0).contains(&adj.weight(i, j)));
            }
        }
    }

    /// Relabelling patches by the horizontal mirror commutes with aggregation.
    #[test]
    fn mirror_relabelling_commutes_with_aggregation(k in prop::sample::select(vec![2usize, 4, 8]), seed in any::<u64>()) {
        let n = k * k;
        let mirror: Vec<usize> = (0..n).map(|i| (i / k) * k + (k - 1 - i % k)).collect();
        let adj = normalize_adjacency(&build_adjacency(k, &AdjacencyScheme::MirrorSpatial).unwrap());
        let a = adj.to_tensor::<f64>();
        let conj = Tensor::from_vec([n, n], (0..n * n).map(|e| adj.weight(mirror[e / n], mirror[e % n])).collect()).unwrap();
        prop_assert_eq!(&conj, &a);
        let x = Tensor::<f64>::uniform([n, 1, 2, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |t: &Tensor<f64>| Tensor::stack_outer(&mirror.iter().map(|&m| t.index_outer(m)).collect::<Vec<_>>()).unwrap();
        let g = Graph::new();
        let lhs = g.constant(permute(&x)).graph_aggregate(&conj).unwrap();
        let rhs = permute(&g.constant(x).graph_aggregate(&a).unwrap().value());
        prop_assert!(lhs.value().max_abs_diff(&rhs) < 1e-14);
    }
}
