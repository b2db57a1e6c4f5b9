mod common;

use np_robust::graph::{fuzzy_cross_entropy, fuzzy_graph, knn, membership_strengths, FuzzyGraph};
use np_robust::tensor::Tensor;
use proptest::prelude::*;

fn cloud() -> impl Strategy<Value = Tensor> {
    (3usize..25, 1usize..5).prop_flat_map(|(n, p)| {
        prop::collection::vec(-10.0f64..10.0, n * p).prop_map(move |v| Tensor::new(vec![n, p], v).unwrap())
    })
}

proptest! {
    #[test]
    fn strengths_are_memberships(points in cloud(), k_frac in 0.0f64..1.0) {
        let n = points.rows();
        let k = 1 + (k_frac * (n - 2) as f64) as usize;
        let g = fuzzy_graph(&points, k).unwrap();
        for (&(i, j), &s) in g.pairs.iter().zip(&g.strengths) {
            prop_assert!(i < j);
            prop_assert!((0.0..=1.0).contains(&s));
        }
        let nn = knn(&points, k).unwrap();
        for i in 0..n {
            let j = nn.indices[i][0];
            prop_assert!(g.strength(i, j) >= 0.5, "nearest pair ({i},{j}) has {}", g.strength(i, j));
        }
    }

    #[test]
    fn knn_matches_a_full_sort(points in cloud(), k_frac in 0.0f64..1.0) {
        let n = points.rows();
        let k = 1 + (k_frac * (n - 2) as f64) as usize;
        let nn = knn(&points, k).unwrap();
        let want = common::knn_by_sorting(&points, k);
        for i in 0..n {
            // Compare distances, not ids, so exact ties may resolve either way.
            for (a, &b) in nn.indices[i].iter().zip(&want[i]) {
                let da = np_robust::tensor::sq_dist(points.row(i), points.row(*a));
                let db = np_robust::tensor::sq_dist(points.row(i), points.row(b));
                prop_assert!((da - db).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in 0u64..10_000) {
        let (mu, nu, equal) = common::random_graph_pair(seed);
        let ce = fuzzy_cross_entropy(&mu, &nu).unwrap();
        prop_assert!(ce >= 0.0);
        if equal {
            prop_assert_eq!(ce, 0.0);
        } else {
            prop_assert!(ce > 0.0);
        }
    }

    #[test]
    fn cross_entropy_against_itself_is_zero(points in cloud()) {
        let g = fuzzy_graph(&points, 2.min(points.rows() - 1)).unwrap();
        prop_assert_eq!(fuzzy_cross_entropy(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn edge_list_round_trip(points in cloud()) {
        let g = fuzzy_graph(&points, 2).unwrap();
        let back = FuzzyGraph::parse_edge_list(&g.to_edge_list()).unwrap();
        prop_assert_eq!(back.pairs, g.pairs);
        for (a, b) in back.strengths.iter().zip(&g.strengths) {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn two_points_meet_at_full_strength() {
    let t = Tensor::new(vec![2, 1], vec![0.0, 3.0]).unwrap();
    let g = membership_strengths(&knn(&t, 1).unwrap()).unwrap();
    assert_eq!(g.pairs, vec![(0, 1)]);
    assert_eq!(g.strengths, vec![1.0]);
}

#[test]
fn missing_edges_count_as_zero() {
    let a = FuzzyGraph::from_pairs(3, 1, vec![(0, 1, 0.5)]).unwrap();
    let b = FuzzyGraph::from_pairs(3, 1, vec![(0, 1, 0.5), (1, 2, 0.0)]).unwrap();
    assert_eq!(fuzzy_cross_entropy(&a, &b).unwrap(), 0.0);
}
