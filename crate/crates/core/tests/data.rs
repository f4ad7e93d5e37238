use std::collections::HashSet;

use glab::data::{parse_cifar10, partition_dirichlet, partition_iid, sample_uniform_noise, synth_dataset, Dataset};
use glab::error::Error;
use proptest::prelude::*;

fn cifar_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        out.push(y);
        out.extend((0..3072).map(|p| ((p + i * 7) % 256) as u8));
    }
    out
}

#[test]
fn cifar_records_parse_into_unit_range() {
    let ds = parse_cifar10(&cifar_bytes(&[3, 9, 0])).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.labels(), &[3, 9, 0]);
    assert_eq!(ds.image_shape(), [3, 32, 32]);
    assert_eq!(ds.image(0)[255], 1.0);
    assert_eq!(ds.image(1)[0], 7.0 / 255.0);
    assert!(ds.images().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn truncated_cifar_reports_offset_of_partial_record() {
    let mut bytes = cifar_bytes(&[1, 2]);
    bytes.truncate(3073 + 100);
    match parse_cifar10(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn cifar_label_out_of_range_is_rejected() {
    let bytes = cifar_bytes(&[1, 10]);
    assert!(matches!(parse_cifar10(&bytes), Err(Error::Format { offset: 3073, .. })));
}

#[test]
fn dataset_rejects_out_of_range_pixels_and_labels() {
    assert!(Dataset::new("x", vec![0.5, 1.5], [1, 1, 2], vec![0], 2).is_err());
    assert!(Dataset::new("x", vec![0.5, 0.5], [1, 1, 2], vec![2], 2).is_err());
    assert!(Dataset::new("x", vec![0.5, 0.5], [1, 1, 2], vec![1], 2).is_ok());
}

#[test]
fn synthetic_data_is_seeded_and_balanced() {
    let a = synth_dataset(4, 25, 8, 8, 11).unwrap();
    let b = synth_dataset(4, 25, 8, 8, 11).unwrap();
    let c = synth_dataset(4, 25, 8, 8, 12).unwrap();
    assert_eq!(a.images(), b.images());
    assert_ne!(a.images(), c.images());
    for k in 0..4 {
        assert_eq!(a.labels().iter().filter(|&&y| y == k).count(), 25);
    }
    assert!(a.images().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn split_is_disjoint_and_complete() {
    let ds = synth_dataset(3, 20, 4, 4, 0).unwrap();
    let (train, test) = ds.split(15, 5).unwrap();
    assert_eq!((train.len(), test.len()), (45, 15));
    let key = |d: &Dataset, i: usize| d.image(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let seen: HashSet<_> = (0..train.len()).map(|i| key(&train, i)).collect();
    assert!((0..test.len()).all(|i| !seen.contains(&key(&test, i))));
}

#[test]
fn dataset_file_round_trip() {
    let ds = synth_dataset(2, 3, 4, 5, 9).unwrap();
    let dir = std::env::temp_dir().join(format!("glab-data-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ds.glab");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.images(), ds.images());
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.image_shape(), ds.image_shape());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn dirichlet_quotas_are_equal() {
    let ds = synth_dataset(10, 30, 2, 2, 1).unwrap();
    let p = partition_dirichlet(&ds, 7, 0.5, 3).unwrap();
    assert!(p.clients.iter().all(|c| c.len() == 300 / 7));
}

#[test]
fn small_concentration_skews_labels() {
    // Mean per-client label entropy falls as the concentration shrinks.
    let ds = synth_dataset(10, 100, 2, 2, 4).unwrap();
    let entropy = |conc: f64| {
        let mut total = 0.0;
        let p = partition_dirichlet(&ds, 10, conc, 8).unwrap();
        for c in &p.clients {
            let mut counts = [0.0f64; 10];
            c.iter().for_each(|&i| counts[ds.labels()[i]] += 1.0);
            let n = c.len() as f64;
            total -= counts.iter().filter(|&&k| k > 0.0).map(|k| k / n * (k / n).ln()).sum::<f64>();
        }
        total / 10.0
    };
    let (skewed, even) = (entropy(0.1), entropy(100.0));
    assert!(skewed < 1.2, "entropy at 0.1: {skewed}");
    assert!(even > 2.1, "entropy at 100: {even}");
}

#[test]
fn partitions_reject_bad_arguments() {
    let ds = synth_dataset(2, 2, 2, 2, 0).unwrap();
    assert!(partition_iid(&ds, 0, 0).is_err());
    assert!(partition_iid(&ds, 5, 0).is_err());
    assert!(partition_dirichlet(&ds, 2, 0.0, 0).is_err());
    assert!(partition_dirichlet(&ds, 2, f64::NAN, 0).is_err());
}

#[test]
fn uniform_noise_moments() {
    let t = sample_uniform_noise(&[4, 3, 32, 32], 2);
    let v = t.data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    assert!((mean - 0.5).abs() < 0.01);
    assert!((var - 1.0 / 12.0).abs() < 0.003);
    assert!(v.iter().all(|x| (0.0..1.0).contains(x)));
}

fn check_partition(ds: &Dataset, clients: &[Vec<usize>]) {
    let mut seen = HashSet::new();
    for c in clients {
        for &i in c {
            assert!(i < ds.len());
            assert!(seen.insert(i), "index {i} assigned twice");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn iid_partition_is_disjoint_and_balanced(n in 2usize..60, k in 1usize..12, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let ds = synth_dataset(2, n, 1, 1, 0).unwrap();
        let p = partition_iid(&ds, k, seed).unwrap();
        check_partition(&ds, &p.clients);
        let sizes: Vec<usize> = p.clients.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), ds.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(p, partition_iid(&ds, k, seed).unwrap());
    }

    #[test]
    fn dirichlet_partition_is_disjoint_and_reproducible(per in 1usize..20, k in 1usize..10, conc in 0.05f64..10.0, seed in 0u64..1000) {
        let ds = synth_dataset(5, per, 1, 1, 0).unwrap();
        prop_assume!(k <= ds.len());
        let p = partition_dirichlet(&ds, k, conc, seed).unwrap();
        check_partition(&ds, &p.clients);
        prop_assert!(p.clients.iter().all(|c| c.len() == ds.len() / k));
        prop_assert_eq!(p, partition_dirichlet(&ds, k, conc, seed).unwrap());
    }
}
