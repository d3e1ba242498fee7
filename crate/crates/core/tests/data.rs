use fedhenet_core::data::{
    femb_from_bytes, femb_to_bytes, load_femb, mean_histogram_entropy, partition, partition_labels, save_femb,
    synth_blobs, EmbeddingDataset, PartitionPlan, PartitionSpec, Scheme, FEMB_HEADER_LEN,
};
use fedhenet_core::rolann::{accuracy, centralized_fit, HyperParams};
use fedhenet_core::CoreError;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn small() -> EmbeddingDataset {
    let data = DMatrix::from_row_slice(3, 4, &[0.5, -1.0, 2.25, 3.0, 1e-3, 7.0, -0.125, 0.0, 9.5, 1.0, 2.0, -4.0]);
    EmbeddingDataset::new(data, vec![2, 0, 1], 3).unwrap()
}

#[test]
fn femb_roundtrip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.femb");
    let ds = small();
    save_femb(&ds, &path).unwrap();
    let back = load_femb(&path).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.n_classes, 3);
    for (a, b) in back.data.iter().zip(ds.data.iter()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, FEMB_HEADER_LEN + 3 * 4 + 3 * 4 * 4);
}

#[test]
fn femb_header_layout() {
    let bytes = femb_to_bytes(&small());
    assert_eq!(&bytes[..4], b"FEMB");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(bytes[6], 0);
    assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[15..19].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[23..27].try_into().unwrap()), 2);
}

#[test]
fn femb_rejects_damage() {
    let bytes = femb_to_bytes(&small());
    let err = femb_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
    assert!(matches!(&err, CoreError::Format(msg) if msg.contains("5 bytes missing")), "{err}");
    let err = femb_from_bytes(&bytes[..10]).unwrap_err();
    assert!(matches!(&err, CoreError::Format(msg) if msg.contains("13 bytes missing")), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(femb_from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(femb_from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[23] = 3; // label 3 with 3 classes
    assert!(femb_from_bytes(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(femb_from_bytes(&long).is_err());
}

fn labels_balanced(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes * per_class).map(|i| i % classes).collect()
}

#[test]
fn iid_gives_equal_shares() {
    let labels = labels_balanced(10, 10);
    let plan = partition_labels(&labels, 10, &PartitionSpec { scheme: Scheme::Iid, clients: 10, seed: 1 }).unwrap();
    assert!(plan.assignments.iter().all(|a| a.len() == 10));
    plan.check_cover(100).unwrap();
}

#[test]
fn single_class_histograms() {
    let labels = labels_balanced(10, 20);
    let plan =
        partition_labels(&labels, 10, &PartitionSpec { scheme: Scheme::SingleClass, clients: 10, seed: 1 }).unwrap();
    for (k, h) in plan.histograms.iter().enumerate() {
        for (c, &n) in h.iter().enumerate() {
            assert_eq!(n > 0, c == k, "client {k} class {c}");
        }
    }
    let shared =
        partition_labels(&labels, 10, &PartitionSpec { scheme: Scheme::SingleClass, clients: 20, seed: 1 }).unwrap();
    for (k, h) in shared.histograms.iter().enumerate() {
        assert_eq!(h[k % 10], 10);
    }
    let wrapped =
        partition_labels(&labels, 10, &PartitionSpec { scheme: Scheme::SingleClass, clients: 4, seed: 1 }).unwrap();
    assert_eq!(wrapped.histograms[1], vec![0, 20, 0, 0, 0, 20, 0, 0, 0, 20]);
}

#[test]
fn huge_alpha_dirichlet_tracks_global_ratio() {
    let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    let plan = partition_labels(
        &labels,
        2,
        &PartitionSpec { scheme: Scheme::Dirichlet { alpha: 10000.0 }, clients: 4, seed: 9 },
    )
    .unwrap();
    for h in &plan.histograms {
        let ratio = h[0] as f64 / (h[0] + h[1]) as f64;
        assert!((ratio - 0.5).abs() <= 0.05, "histogram {h:?}");
    }
}

#[test]
fn partition_errors_and_repairs() {
    let labels = vec![0; 5];
    let spec = |clients| PartitionSpec { scheme: Scheme::Dirichlet { alpha: 0.01 }, clients, seed: 2 };
    assert!(matches!(partition_labels(&labels, 1, &spec(6)), Err(CoreError::Input(_))));
    assert!(partition_labels(&labels, 1, &spec(0)).is_err());
    let bad_alpha = PartitionSpec { scheme: Scheme::Dirichlet { alpha: 0.0 }, clients: 2, seed: 0 };
    assert!(partition_labels(&labels, 1, &bad_alpha).is_err());
    // One class and tiny alpha put everything on one client before repair.
    let plan = partition_labels(&labels, 1, &spec(5)).unwrap();
    assert!(plan.assignments.iter().all(|a| a.len() == 1));
}

#[test]
fn plan_text_roundtrip() {
    let labels = labels_balanced(3, 7);
    let plan = partition_labels(&labels, 3, &PartitionSpec { scheme: Scheme::Iid, clients: 4, seed: 5 }).unwrap();
    let text = plan.to_text();
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
    assert_eq!(PartitionPlan::from_text(&text, &labels, 3).unwrap(), plan);
    assert!(PartitionPlan::from_text("0\t99\n", &labels, 3).is_err());
}

#[test]
fn dirichlet_skew_grows_as_alpha_falls() {
    let labels = labels_balanced(10, 50);
    let mut means = Vec::new();
    for alpha in [100.0, 1.0, 0.1, 0.01] {
        let mut total = 0.0;
        for seed in 0..20 {
            let spec = PartitionSpec { scheme: Scheme::Dirichlet { alpha }, clients: 10, seed };
            total += mean_histogram_entropy(&partition_labels(&labels, 10, &spec).unwrap());
        }
        means.push(total / 20.0);
    }
    println!("mean client entropy for alpha 100, 1, 0.1, 0.01: {means:?}");
    assert!(means.windows(2).all(|w| w[0] >= w[1]), "{means:?}");
}

#[test]
fn blobs_are_deterministic_and_separable() {
    let a = synth_blobs(2, 2, 50, 10.0, 3).unwrap();
    assert_eq!(a, synth_blobs(2, 2, 50, 10.0, 3).unwrap());
    assert_ne!(a, synth_blobs(2, 2, 50, 10.0, 4).unwrap());
    let model = centralized_fit(&a, &HyperParams::default()).unwrap();
    assert_eq!(accuracy(&model.predict(&a.data).unwrap(), &a.labels), 1.0);
    assert!(synth_blobs(3, 2, 5, 1.0, 0).is_err());
}

#[test]
fn zero_separation_is_chance_level() {
    let train = synth_blobs(4, 8, 100, 0.0, 5).unwrap();
    let test = synth_blobs(4, 8, 200, 0.0, 6).unwrap();
    let model = centralized_fit(&train, &HyperParams::default()).unwrap();
    let acc = accuracy(&model.predict(&test.data).unwrap(), &test.labels);
    assert!((acc - 0.25).abs() <= 0.10, "accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_are_exact_partitions(
        seed in any::<u64>(),
        m in 1usize..300,
        classes in 1usize..8,
        k in 1usize..20,
        which in 0usize..3,
        alpha in 0.005f64..50.0,
    ) {
        prop_assume!(m >= k);
        let labels: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % classes).collect();
        let scheme = [Scheme::Iid, Scheme::Dirichlet { alpha }, Scheme::SingleClass][which];
        let spec = PartitionSpec { scheme, clients: k, seed };
        let plan = partition_labels(&labels, classes, &spec).unwrap();
        prop_assert_eq!(plan.clients(), k);
        prop_assert!(plan.check_cover(m).is_ok());
        prop_assert_eq!(&plan, &partition_labels(&labels, classes, &spec).unwrap());
        let counted: usize = plan.histograms.iter().flatten().sum();
        prop_assert_eq!(counted, m);
    }

    #[test]
    fn femb_roundtrip_is_lossless_at_f32(vals in proptest::collection::vec(-1e6f32..1e6, 6..=6)) {
        let data = DMatrix::from_row_slice(2, 3, &vals.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let ds = EmbeddingDataset::new(data, vec![1, 0], 2).unwrap();
        prop_assert_eq!(femb_from_bytes(&femb_to_bytes(&ds)).unwrap(), ds);
    }
}

#[test]
fn partition_uses_dataset_labels() {
    let ds = synth_blobs(3, 3, 10, 1.0, 0).unwrap();
    let plan = partition(&ds, &PartitionSpec { scheme: Scheme::SingleClass, clients: 3, seed: 0 }).unwrap();
    assert_eq!(plan.histograms, vec![vec![10, 0, 0], vec![0, 10, 0], vec![0, 0, 10]]);
}
