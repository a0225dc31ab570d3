mod common;

use common::*;
use proptest::prelude::*;

use ragc::pointcloud::Point3;
use ragc::spatial::GridIndex;

#[test]
fn grid_matches_brute_force() {
    assert_eq!(spatial_mismatches(42), 0);
}

#[test]
fn knn_beyond_the_first_ring() {
    // Sparse outliers force the search to widen several times.
    let mut pts: Vec<Point3> = (0..40).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
    pts.push([5.0, 5.0, 5.0]);
    pts.push([-3.0, 2.0, 7.0]);
    let index = GridIndex::build(&pts, 0.02).unwrap();
    for i in [0, 20, 40, 41] {
        assert_eq!(index.knn_neighbors(i, 16).indices, brute_knn(&pts, i, 16));
    }
}

fn cloud() -> impl Strategy<Value = Vec<Point3>> {
    proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn radius_independent_of_cell_size(pts in cloud(), r in 0.02f64..0.8, q in any::<proptest::sample::Index>()) {
        let i = q.index(pts.len());
        let want = brute_radius(&pts, &pts[i], r);
        for cell in [r / 2.0, r, 2.0 * r] {
            let index = GridIndex::build(&pts, cell).unwrap();
            prop_assert_eq!(index.radius_neighbors(i, r), want.clone());
        }
    }

    #[test]
    fn radius_is_symmetric(pts in cloud(), r in 0.02f64..0.8) {
        let index = GridIndex::build(&pts, r).unwrap();
        let lists: Vec<Vec<usize>> = (0..pts.len()).map(|i| index.radius_neighbors(i, r)).collect();
        for (i, l) in lists.iter().enumerate() {
            prop_assert!(l.contains(&i));
            for &j in l {
                prop_assert!(lists[j].contains(&i));
            }
        }
    }

    #[test]
    fn knn_matches_brute_force(pts in cloud(), k in 1usize..20, cell in 0.01f64..1.0) {
        let index = GridIndex::build(&pts, cell).unwrap();
        for i in 0..pts.len() {
            let got = index.knn_neighbors(i, k);
            prop_assert_eq!(&got.indices, &brute_knn(&pts, i, k));
            prop_assert_eq!(got.padded, pts.len() < k + 1);
        }
    }
}
