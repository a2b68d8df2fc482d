use skd_harness::data::{gen_data, DataConfig, SyntheticDataset, CLASS_NAMES};

#[test]
fn default_dataset_shape_and_balance() {
    let d = gen_data(2024, &DataConfig::default()).unwrap();
    assert_eq!(d.num_classes(), 8);
    assert_eq!(d.train.len(), 8 * 500);
    assert_eq!(d.val.len(), 8 * 100);
    assert_eq!(d.test.len(), 8 * 100);
    assert_eq!(d.train.images.len(), 4000 * 32 * 32);
    assert_eq!(d.train.histogram(8), vec![500; 8]);
    assert_eq!(d.test.histogram(8), vec![100; 8]);
    assert_eq!(d.class_names, CLASS_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    assert!(d.train.images.iter().all(|v| v.is_finite()));
    // The leading prefix stays balanced.
    assert_eq!(d.train_prefix(2000).histogram(8), vec![250; 8]);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = DataConfig {
        train_per_class: 30,
        val_per_class: 5,
        test_per_class: 5,
        ..DataConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.skd"), dir.path().join("b.skd"));
    gen_data(5, &cfg).unwrap().save(&pa).unwrap();
    gen_data(5, &cfg).unwrap().save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let other = gen_data(6, &cfg).unwrap();
    let back = SyntheticDataset::load(&pa).unwrap();
    assert_ne!(back.train.images, other.train.images);
    assert_eq!(back.train.labels, gen_data(5, &cfg).unwrap().train.labels);
}

#[test]
fn proxy_samples_are_seeded_and_distinct() {
    let cfg = DataConfig {
        train_per_class: 40,
        val_per_class: 2,
        test_per_class: 2,
        ..DataConfig::default()
    };
    let d = gen_data(1, &cfg).unwrap();
    let a = d.proxy_indices(64, 3).unwrap();
    assert_eq!(a, d.proxy_indices(64, 3).unwrap());
    assert_ne!(a, d.proxy_indices(64, 4).unwrap());
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(d.sample_proxy(64, 3).unwrap().len(), 64);
    assert!(d.proxy_indices(0, 1).is_err());
    assert!(d.proxy_indices(d.train.len() + 1, 1).is_err());
}
