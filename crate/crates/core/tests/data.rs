use std::collections::BTreeSet;
use std::path::PathBuf;

use approx::assert_abs_diff_eq;
use dir_learn_core::data::{
    batch_iter, build_rotated_mnist, epoch_batches, load_idx, load_mnist, make_synthetic_blobs, parse_idx_images, parse_idx_labels, rotate,
    synthetic_heldout, synthetic_split, ImagePool, MultiDomainDataset, SyntheticSpec, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use dir_learn_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
        b.extend_from_slice(&x.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// 10 classes with `per_class` random `side x side` images each.
fn fake_pool(seed: u64, per_class: usize, side: usize) -> ImagePool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10 * per_class {
        pixels.extend(random_image(&mut rng, side));
        labels.push(i % 10);
    }
    ImagePool {
        rows: side,
        cols: side,
        pixels,
        labels,
    }
}

#[test]
fn idx_parsing() {
    let payload: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 256) as u8).collect();
    let (n, r, c, px) = parse_idx_images(&idx_images(4, 28, 28, &payload)).unwrap();
    assert_eq!((n, r, c), (4, 28, 28));
    assert_eq!(px.len(), 4 * 784);
    assert_eq!(px[255], 1.0);
    assert!(px.iter().all(|p| (0.0..=1.0).contains(p)));

    let mut bad = idx_images(4, 28, 28, &payload);
    bad[..4].copy_from_slice(&0u32.to_be_bytes());
    assert!(matches!(parse_idx_images(&bad), Err(Error::Format(_))));
    assert!(matches!(parse_idx_images(&idx_images(4, 28, 28, &payload[..100])), Err(Error::Length(_))));
    assert!(matches!(parse_idx_labels(&idx_images(1, 1, 1, &[0])), Err(Error::Format(_))));
    assert_eq!(parse_idx_labels(&idx_labels(&[3, 1, 4])).unwrap(), vec![3, 1, 4]);

    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, idx_images(4, 28, 28, &payload)).unwrap();
    std::fs::write(&lp, idx_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Length(_))));
    std::fs::write(&lp, idx_labels(&[1, 2, 3, 4])).unwrap();
    let pool = load_idx(&ip, &lp).unwrap();
    assert_eq!((pool.len(), pool.rows, pool.cols), (4, 28, 28));
}

#[test]
fn rotation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [5usize, 7, 28] {
        let img = random_image(&mut rng, n);
        assert_eq!(rotate(&img, n, n, 0.0), img);
        let r90 = rotate(&img, n, n, 90.0);
        for r in 0..n {
            for c in 0..n {
                assert_abs_diff_eq!(r90[r * n + c], img[c * n + (n - 1 - r)], epsilon = 1e-9);
            }
        }
        let mid = (n / 2) * n + n / 2;
        for deg in [15.0, 33.3, 75.0, 180.0, 271.0] {
            let out = rotate(&img, n, n, deg);
            if n % 2 == 1 {
                assert_abs_diff_eq!(out[mid], img[mid], epsilon = 1e-9);
            }
            assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn rotated_mnist_structure_on_a_stand_in_pool() {
    let train = fake_pool(0, 120, 6);
    let test = fake_pool(1, 110, 6);
    let rm = build_rotated_mnist(&train, &test, 3).unwrap();
    assert_eq!(rm.train.len(), 5000);
    assert_eq!(rm.test.len(), 1000);
    assert_eq!((rm.train.num_ids, rm.train.num_domains), (10, 5));
    rm.train.validate().unwrap();
    rm.test.validate().unwrap();
    for d in 0..5 {
        for y in 0..10 {
            let cell = (0..rm.train.len())
                .filter(|&i| rm.train.domains[i] == d && rm.train.identities[i] == y)
                .count();
            assert_eq!(cell, 100);
        }
        let ids: Vec<usize> = (0..rm.train.len()).filter(|&i| rm.train.domains[i] == d).map(|i| rm.train.identities[i]).collect();
        assert_eq!(ids, rm.train.identities[..1000]);
    }
    for (j, &src) in rm.train_indices.iter().enumerate() {
        assert_eq!(rm.train.image(j), train.image(src));
    }
    assert_eq!(rm.train_indices.iter().collect::<BTreeSet<_>>().len(), 1000);
    assert_eq!(rm.test_indices.iter().collect::<BTreeSet<_>>().len(), 1000);
    let again = build_rotated_mnist(&train, &test, 3).unwrap();
    assert_eq!(again.train_indices, rm.train_indices);
    assert_eq!(again.test_indices, rm.test_indices);

    let short = fake_pool(0, 50, 6);
    assert!(matches!(build_rotated_mnist(&short, &test, 0), Err(Error::Sampling(_))));
}

/// The real MNIST files, when `DIR_LEARN_MNIST` names their directory.
fn mnist_dir() -> Option<PathBuf> {
    std::env::var_os("DIR_LEARN_MNIST").map(PathBuf::from).filter(|p| p.join("train-images-idx3-ubyte").exists())
}

#[test]
fn real_mnist_when_available() {
    let Some(dir) = mnist_dir() else {
        eprintln!("DIR_LEARN_MNIST not set; skipping");
        return;
    };
    let (train, test) = load_mnist(&dir).unwrap();
    for pool in [&train, &test] {
        assert_eq!((pool.rows, pool.cols), (28, 28));
        assert_eq!(pool.pixels.len(), pool.len() * 784);
        assert!(pool.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        for c in 0..10 {
            assert!(pool.labels.iter().filter(|&&l| l == c).count() >= 100, "class {c}");
        }
        assert!(pool.labels.iter().all(|&l| l < 10));
    }
    let rm = build_rotated_mnist(&train, &test, 0).unwrap();
    assert_eq!(rm.train.len(), 5000);
    assert_eq!(rm.test.domain_tags, vec!["75deg".to_string()]);
}

#[test]
fn synthetic_generator_contracts() {
    let a = make_synthetic_blobs(3, 4, 10, 16, 7).unwrap();
    let b = make_synthetic_blobs(3, 4, 10, 16, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.pixels, b.pixels);
    a.validate().unwrap();
    assert_eq!(a.len(), 3 * 4 * 10);
    let mean = |keep: &dyn Fn(usize) -> bool| {
        let idx = a.select(keep);
        idx.iter().map(|&i| a.image(i).iter().sum::<f64>()).sum::<f64>() / (idx.len() * a.image_len()) as f64
    };
    let domain_means: Vec<f64> = (0..3).map(|d| mean(&|i| a.domains[i] == d)).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!((domain_means[i] - domain_means[j]).abs() > 1e-3, "{domain_means:?}");
        }
    }
    let class_image = |d: usize, y: usize| -> Vec<f64> {
        let idx = a.select(|i| a.domains[i] == d && a.identities[i] == y);
        (0..a.image_len())
            .map(|p| idx.iter().map(|&i| a.image(i)[p]).sum::<f64>() / idx.len() as f64)
            .collect()
    };
    for d in 0..3 {
        for y in 0..4 {
            for z in y + 1..4 {
                let gap: f64 = class_image(d, y).iter().zip(class_image(d, z)).map(|(p, q)| (p - q).abs()).sum();
                assert!(gap > 1.0, "domain {d} classes {y},{z}: {gap}");
            }
        }
    }
    assert!(matches!(make_synthetic_blobs(1, 4, 10, 16, 0), Err(Error::Config { .. })));
}

#[test]
fn synthetic_split_and_heldout() {
    let spec = SyntheticSpec {
        domains: 3,
        ids: 4,
        per_class: 8,
        image_size: 16,
    };
    let (train, test) = synthetic_split(&spec, 0).unwrap();
    assert_eq!((train.num_domains, test.num_domains), (3, 1));
    assert_eq!((train.len(), test.len()), (96, 32));
    let held = synthetic_heldout(&spec, 0).unwrap();
    assert_eq!(held.len(), train.len());
    assert_eq!(held.identities, train.identities);
    assert_ne!(held.pixels, train.pixels);
}

#[test]
fn batching_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = epoch_batches(5000, 100, &mut rng).unwrap();
    assert_eq!(plan.len(), 50);
    let plan = epoch_batches(1050, 100, &mut rng).unwrap();
    assert_eq!(plan.len(), 10);
    let seen: BTreeSet<usize> = plan.iter().flatten().copied().collect();
    assert_eq!(seen.len(), 1000);
    assert!(epoch_batches(10, 11, &mut rng).is_err());

    let ds = make_synthetic_blobs(2, 2, 5, 8, 1).unwrap();
    let a: Vec<Vec<usize>> = batch_iter(&ds, 4, 9).unwrap().map(|b| b.ids).collect();
    let b: Vec<Vec<usize>> = batch_iter(&ds, 4, 9).unwrap().map(|b| b.ids).collect();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    for batch in batch_iter(&ds, 4, 9).unwrap() {
        assert_eq!(batch.pixels.shape(), &[4, 1, 8, 8]);
        assert_eq!(batch.domains.len(), 4);
    }
}

#[test]
fn cache_round_trip() {
    let ds = make_synthetic_blobs(2, 3, 4, 8, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save_cache(dir.path()).unwrap();
    for f in ["manifest.csv", "pixels.bin", "dataset.json"] {
        assert!(dir.path().join(f).exists());
    }
    let header = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(header.starts_with("index,identity,domain\n"));
    let back = MultiDomainDataset::load_cache(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.pixels, ds.pixels);
    assert_eq!(back.identities, ds.identities);
    assert_eq!(back.domains, ds.domains);
}

proptest! {
    #[test]
    fn labels_within_declared_ranges(domains in 2usize..5, ids in 2usize..5, per in 1usize..4, seed in any::<u64>()) {
        let ds = make_synthetic_blobs(domains, ids, per, 8, seed).unwrap();
        prop_assert!(ds.validate().is_ok());
        prop_assert!(ds.identities.iter().all(|&y| y < ids));
        prop_assert!(ds.domains.iter().all(|&d| d < domains));
        prop_assert_eq!(ds.len(), domains * ids * per);
    }

    #[test]
    fn rotation_preserves_range(seed in any::<u64>(), deg in 0.0f64..360.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 9);
        let out = rotate(&img, 9, 9, deg);
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((out[40] - img[40]).abs() < 1e-9);
    }
}
