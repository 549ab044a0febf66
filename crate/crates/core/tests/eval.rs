use approx::assert_abs_diff_eq;
use dir_learn_core::eval::{
    cmc_map, euclidean_distances, knn_predict, make_split, project_2d, split_rng, wda, write_latent_csv, evaluate_over_splits, IdPool,
    Protocol, REPORTED_RANKS,
};
use dir_learn_core::{Error, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(rows: Vec<Vec<f64>>) -> Tensor {
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn average_precision_example() {
    let d = dist(vec![vec![0.1, 0.2, 0.3, 0.4]]);
    let r = cmc_map(&d, &[7], &[7, 1, 7, 2]).unwrap();
    assert_abs_diff_eq!(r.map, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.map, 0.8333, epsilon = 1e-4);
    assert_eq!(r.rank(1), 1.0);
}

#[test]
fn first_match_sets_the_cmc_step() {
    let d = dist(vec![vec![0.5, 0.1, 0.9], vec![0.2, 0.3, 0.1]]);
    let r = cmc_map(&d, &[0, 2], &[0, 1, 2]).unwrap();
    assert_eq!(r.cmc, vec![0.5, 1.0, 1.0]);
    assert_abs_diff_eq!(r.map, (0.5 + 1.0) / 2.0, epsilon = 1e-12);
}

#[test]
fn missing_true_match_is_a_protocol_error() {
    let d = dist(vec![vec![0.1, 0.2]]);
    assert!(matches!(cmc_map(&d, &[5], &[0, 1]), Err(Error::Protocol(_))));
    let bad = dist(vec![vec![f64::NAN, 0.2]]);
    assert!(matches!(cmc_map(&bad, &[0], &[0, 1]), Err(Error::Contract(_))));
}

/// Brute-force CMC and AP for tie-free distances.
fn oracle(d: &[Vec<f64>], pid: &[usize], gid: &[usize]) -> (Vec<f64>, f64) {
    let g = gid.len();
    let mut cmc = vec![0.0; g];
    let mut aps = 0.0;
    for (i, row) in d.iter().enumerate() {
        let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..g).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let rel: Vec<bool> = pairs.iter().map(|&(_, j)| gid[j] == pid[i]).collect();
        let first = rel.iter().position(|&r| r).unwrap();
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
        let total = rel.iter().filter(|&&r| r).count() as f64;
        let mut ap = 0.0;
        for k in 0..g {
            if rel[k] {
                let hits_in_top = rel[..=k].iter().filter(|&&r| r).count() as f64;
                ap += hits_in_top / (k + 1) as f64;
            }
        }
        aps += ap / total;
    }
    let p = pid.len() as f64;
    (cmc.into_iter().map(|c| c / p).collect(), aps / p)
}

#[test]
fn cmc_and_map_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (p, g, ids) = (rng.gen_range(1..8), rng.gen_range(1..15), rng.gen_range(1..6));
        let gid: Vec<usize> = (0..g).map(|_| rng.gen_range(0..ids)).collect();
        let pid: Vec<usize> = (0..p).map(|_| gid[rng.gen_range(0..g)]).collect();
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let r = cmc_map(&dist(rows.clone()), &pid, &gid).unwrap();
        let (cmc, map) = oracle(&rows, &pid, &gid);
        for (a, b) in r.cmc.iter().zip(&cmc) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r.map, map, epsilon = 1e-12);
    }
}

#[test]
fn euclidean_distances_by_hand() {
    let a = dist(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
    let b = dist(vec![vec![3.0, 4.0]]);
    let d = euclidean_distances(&a, &b).unwrap();
    assert_eq!(d.shape(), &[2, 1]);
    assert_abs_diff_eq!(d.data()[0], 5.0, epsilon = 1e-15);
    assert_abs_diff_eq!(d.data()[1], 13f64.sqrt(), epsilon = 1e-15);
    assert!(euclidean_distances(&a, &dist(vec![vec![1.0]])).is_err());
}

#[test]
fn split_sizes_follow_the_reference_tables() {
    let expected = [
        (Protocol::Grid, 125, 1025),
        (Protocol::Ilids, 60, 60),
        (Protocol::Prid, 100, 649),
        (Protocol::Viper, 316, 316),
    ];
    for (protocol, p, g) in expected {
        assert_eq!(protocol.table_sizes(), (p, g));
        let pool = IdPool::reference(protocol);
        for s in 0..3 {
            let split = make_split(protocol, &pool, &mut split_rng(4, s)).unwrap();
            assert_eq!((split.probe.len(), split.gallery.len()), (p, g), "{protocol:?}");
            for &(_, id) in &split.probe {
                assert!(split.gallery.iter().any(|&(_, gid)| gid == id), "{protocol:?}: probe {id} unmatched");
            }
            for &(idx, id) in split.probe.iter().chain(&split.gallery) {
                assert_eq!(pool.items[idx].identity, id);
            }
        }
    }
}

#[test]
fn undersized_pools_are_rejected() {
    let pool = IdPool::with_counts(50, 0, 0);
    for protocol in [Protocol::Grid, Protocol::Ilids, Protocol::Prid] {
        assert!(matches!(make_split(protocol, &pool, &mut split_rng(0, 0)), Err(Error::Protocol(_))));
    }
    assert!(make_split(Protocol::Viper, &pool, &mut split_rng(0, 0)).is_ok());
}

#[test]
fn worst_domain_accuracy_is_the_minimum() {
    assert_eq!(wda(&[0.711, 0.583, 0.478, 0.744]).unwrap(), 0.478);
    assert!(wda(&[]).is_err());
}

fn one_hot(pool: &IdPool, ids: impl Fn(usize) -> usize) -> Tensor {
    let n = pool.num_identities();
    let rows: Vec<Vec<f64>> = pool
        .items
        .iter()
        .map(|it| {
            let mut r = vec![0.0; n];
            r[ids(it.identity)] = 1.0;
            r
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn perfect_embedder_scores_one_everywhere() {
    for protocol in Protocol::ALL {
        let pool = IdPool::reference(protocol);
        let r = evaluate_over_splits(|_| Ok(one_hot(&pool, |i| i)), protocol, &pool, 3, 1).unwrap();
        for k in REPORTED_RANKS {
            assert_eq!(r.mean.rank_k[&k], 1.0, "{protocol:?} rank-{k}");
        }
        assert_eq!(r.mean.map, 1.0);
        assert_eq!(r.splits.len(), 3);
    }
}

#[test]
fn constant_embedder_scores_near_chance() {
    let pool = IdPool::reference(Protocol::Viper);
    let n = pool.len();
    let r = evaluate_over_splits(|_| Ok(Tensor::zeros(&[n, 4])), Protocol::Viper, &pool, 10, 2).unwrap();
    assert!(r.mean.rank_k[&1] < 0.05, "{:?}", r.mean);
    assert!(r.mean.map < 0.05);
}

#[test]
fn permuted_probe_labels_collapse_rank_one() {
    let pool = IdPool::reference(Protocol::Viper);
    let emb = one_hot(&pool, |i| i);
    let split = make_split(Protocol::Viper, &pool, &mut split_rng(3, 0)).unwrap();
    let pick = |xs: &[(usize, usize)]| emb.select_rows(&xs.iter().map(|x| x.0).collect::<Vec<_>>()).unwrap();
    let d = euclidean_distances(&pick(&split.probe), &pick(&split.gallery)).unwrap();
    let gid: Vec<usize> = split.gallery.iter().map(|x| x.1).collect();
    let mut pid: Vec<usize> = split.probe.iter().map(|x| x.1).collect();
    assert_eq!(cmc_map(&d, &pid, &gid).unwrap().rank(1), 1.0);
    pid.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    assert!(cmc_map(&d, &pid, &gid).unwrap().rank(1) < 0.2);
}

#[test]
fn knn_majority_and_ties() {
    let fit = dist(vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]]);
    let labels = [3, 1, 2, 2];
    let q = dist(vec![vec![0.4], vec![10.4]]);
    assert_eq!(knn_predict(&fit, &labels, &q, 1).unwrap(), vec![3, 2]);
    assert_eq!(knn_predict(&fit, &labels, &q, 2).unwrap(), vec![1, 2]);
    assert_eq!(knn_predict(&fit, &labels, &q, 4).unwrap(), vec![2, 2]);
    assert!(knn_predict(&fit, &labels, &q, 0).is_err());
    assert!(knn_predict(&fit, &labels[..3], &q, 1).is_err());
}

#[test]
fn latent_csv_has_header_and_one_row_per_point() {
    let z = dist(vec![vec![0.5, -1.0], vec![2.0, 3.25]]);
    let mut out = Vec::new();
    write_latent_csv(&mut out, &z, &[4, 7], &[0, 1]).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text, "x,y,class,domain\n0.5,-1,4,0\n2,3.25,7,1\n");
    assert!(write_latent_csv(Vec::new(), &dist(vec![vec![1.0, 2.0, 3.0]]), &[0], &[0]).is_err());
    assert!(write_latent_csv(Vec::new(), &z, &[0], &[0, 1]).is_err());
}

#[test]
fn projection_keeps_two_columns_and_pads_one() {
    let z = dist(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    assert_eq!(project_2d(&z).unwrap(), z);
    let one = dist(vec![vec![1.5], vec![-2.0]]);
    assert_eq!(project_2d(&one).unwrap().data(), &[1.5, 0.0, -2.0, 0.0]);
}

#[test]
fn projection_recovers_a_planar_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (u, v) = ([2.0, 1.0, -2.0], [1.0, 0.0, 1.0]);
    let un = 3.0;
    let vn = 2f64.sqrt();
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-0.5..0.5));
            (0..3).map(|j| 5.0 + a * u[j] / un + b * v[j] / vn).collect()
        })
        .collect();
    let z = Tensor::from_rows(&rows).unwrap();
    let p = project_2d(&z).unwrap();
    assert_eq!(p.shape(), &[200, 2]);
    let var = |c: usize| (0..200).map(|i| p.row(i)[c].powi(2)).sum::<f64>();
    assert!(var(0) > var(1));
    for i in 0..200 {
        for j in 0..200 {
            let d3: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            let d2: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            assert_abs_diff_eq!(d3, d2, epsilon = 1e-9);
        }
    }
    let again = project_2d(&z).unwrap();
    assert_eq!(again, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn map_is_invariant_under_monotone_distance_maps(seed in any::<u64>(), p in 1usize..6, g in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gid: Vec<usize> = (0..g).map(|_| rng.gen_range(0..4)).collect();
        let pid: Vec<usize> = (0..p).map(|_| gid[rng.gen_range(0..g)]).collect();
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        let cubed: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * x * x).collect()).collect();
        let a = cmc_map(&dist(rows), &pid, &gid).unwrap();
        let b = cmc_map(&dist(cubed), &pid, &gid).unwrap();
        prop_assert_eq!(a.cmc, b.cmc);
        prop_assert!((a.map - b.map).abs() < 1e-12);
    }

    #[test]
    fn cmc_is_monotone_and_ends_at_one(seed in any::<u64>(), p in 1usize..6, g in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gid: Vec<usize> = (0..g).map(|_| rng.gen_range(0..3)).collect();
        let pid: Vec<usize> = (0..p).map(|_| gid[rng.gen_range(0..g)]).collect();
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| rng.gen_range(0..4) as f64).collect()).collect();
        let r = cmc_map(&dist(rows), &pid, &gid).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        prop_assert!(r.ap.iter().all(|&a| a > 0.0 && a <= 1.0));
    }
}
