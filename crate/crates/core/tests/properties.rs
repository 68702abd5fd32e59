use std::collections::BTreeMap;

use damix_core::clustering::{dbscan, NOISE};
use damix_core::evaluation::{evaluate_retrieval, interclass_distance, intraclass_variance};
use damix_core::normalization::{rdsbn_forward, RdsbnState};
use damix_core::numerics::{Tape, Tensor};
use damix_core::Mode;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |n| prop::collection::vec(-3.0f64..3.0, n * cols).prop_map(move |d| tensor(vec![n, cols], d)))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

/// Core points grouped by cluster, as sorted index sets.
fn core_partition(labels: &[i64], core: &[bool]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if core[i] {
            groups.entry(l).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rdsbn_is_permutation_equivariant(x in prop::collection::vec(-2.0f64..2.0, 6 * 2 * 3), perm in permutation(6), rect in prop::collection::vec(-1.0f64..1.0, 2)) {
        let x = tensor(vec![6, 2, 3], x);
        let ids = [0, 1, 0, 1, 1, 0];
        let mut state = RdsbnState::with_domains(2, &[0, 1], true).unwrap();
        for d in [0, 1] {
            state.branch_mut(d).unwrap().rectifier = tensor(vec![1, 2], rect.clone());
        }
        let run = |x: &Tensor, ids: &[usize]| {
            let mut s = state.clone();
            let mut t = Tape::new();
            let vars = s.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let y = rdsbn_forward(&mut t, xv, ids, &mut s, &vars, Mode::Train).unwrap();
            t.value(y).clone()
        };
        let base = run(&x, &ids);
        let px = x.gather_rows(&perm).unwrap();
        let pids: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let permuted = run(&px, &pids);
        prop_assert!(permuted.max_abs_diff(&base.gather_rows(&perm).unwrap()) < 1e-12);
    }

    #[test]
    fn dbscan_core_partition_and_noise_ignore_order(points in matrix(1..60, 2), eps in 0.2f64..1.5, min_pts in 1usize..5, seed in any::<u64>()) {
        let n = points.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = dbscan(&points, eps, min_pts).unwrap();
        let b = dbscan(&points.gather_rows(&perm).unwrap(), eps, min_pts).unwrap();
        let mut back = vec![0i64; n];
        for (pos, &i) in perm.iter().enumerate() {
            back[i] = b.labels[pos];
        }
        let core: Vec<bool> = (0..n)
            .map(|i| (0..n).filter(|&j| damix_core::clustering::euclidean(points.row(i), points.row(j)) <= eps).count() >= min_pts)
            .collect();
        prop_assert_eq!(a.num_clusters, b.num_clusters);
        prop_assert_eq!(core_partition(&a.labels, &core), core_partition(&back, &core));
        let noise_a: Vec<bool> = a.labels.iter().map(|&l| l == NOISE).collect();
        let noise_b: Vec<bool> = back.iter().map(|&l| l == NOISE).collect();
        prop_assert_eq!(noise_a, noise_b);
    }

    #[test]
    fn retrieval_ignores_rotation_and_gallery_order(q in matrix(1..6, 2), g in matrix(4..20, 2), angle in 0.0f64..6.3, perm_seed in any::<u64>()) {
        let ng = g.rows();
        let gids: Vec<usize> = (0..ng).map(|i| i % 3).collect();
        let qids: Vec<usize> = (0..q.rows()).map(|i| i % 3).collect();
        let base = evaluate_retrieval(&q, &qids, &g, &gids, &[1, 3]).unwrap();

        let (c, s) = (angle.cos(), angle.sin());
        let rot = tensor(vec![2, 2], vec![c, s, -s, c]);
        let rotated = evaluate_retrieval(&q.matmul(&rot).unwrap(), &qids, &g.matmul(&rot).unwrap(), &gids, &[1, 3]).unwrap();
        prop_assert!((rotated.map - base.map).abs() < 1e-9);

        let mut perm: Vec<usize> = (0..ng).collect();
        perm.rotate_left((perm_seed % ng as u64) as usize);
        perm.reverse();
        let pg = g.gather_rows(&perm).unwrap();
        let pids: Vec<usize> = perm.iter().map(|&i| gids[i]).collect();
        let shuffled = evaluate_retrieval(&q, &qids, &pg, &pids, &[1, 3]).unwrap();
        prop_assert!((shuffled.map - base.map).abs() < 1e-12);
        prop_assert_eq!(shuffled.cmc, base.cmc);
    }

    #[test]
    fn class_statistics_scale(f in matrix(4..30, 3), scale in 0.1f64..10.0) {
        let labels: Vec<usize> = (0..f.rows()).map(|i| i % 4).collect();
        let scaled = f.scale(scale);
        let inter = interclass_distance(&f, &labels).unwrap();
        let intra = intraclass_variance(&f, &labels).unwrap();
        prop_assert!((interclass_distance(&scaled, &labels).unwrap() - scale * inter).abs() <= 1e-10 * (1.0 + scale * inter));
        prop_assert!((intraclass_variance(&scaled, &labels).unwrap() - scale * scale * intra).abs() <= 1e-10 * (1.0 + scale * scale * intra));
    }
}
