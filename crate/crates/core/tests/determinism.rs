use trimix::config::TriMixConfig;
use trimix::data::{batches, load_dataset, two_views, AugmentPolicy, StreamKey};
use trimix::train::{pretrain, PretrainOptions};

fn tiny(seed: u64) -> TriMixConfig {
    let mut cfg = TriMixConfig {
        seed,
        epochs: 2,
        ..TriMixConfig::default()
    };
    cfg.set("synthetic.train_n", "128").unwrap();
    cfg.set("batch", "32").unwrap();
    cfg
}

fn metrics_bytes(cfg: &TriMixConfig) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let train = load_dataset(&cfg.train_source()).unwrap();
    pretrain(
        cfg,
        &train,
        PretrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        },
    )
    .unwrap();
    std::fs::read(dir.path().join("metrics.csv")).unwrap()
}

#[test]
fn same_seed_same_metrics_file() {
    let a = metrics_bytes(&tiny(5));
    assert!(!a.is_empty());
    assert_eq!(a, metrics_bytes(&tiny(5)));
    assert_ne!(a, metrics_bytes(&tiny(6)));
}

#[test]
fn views_depend_only_on_key() {
    let cfg = tiny(1);
    let data = load_dataset(&cfg.train_source()).unwrap();
    let idx = &batches(data.len(), 8, 1, 0).unwrap()[0];
    let sub = data.subset(idx);
    let key = StreamKey {
        seed: 1,
        epoch: 3,
        batch: 2,
    };
    let policy = AugmentPolicy::default();
    let a = two_views(&sub.images, &sub.labels, idx, &policy, key).unwrap();
    let b = two_views(&sub.images, &sub.labels, idx, &policy, key).unwrap();
    assert!(a.x.bit_eq(&b.x) && a.x_prime.bit_eq(&b.x_prime));
    let c = two_views(
        &sub.images,
        &sub.labels,
        idx,
        &policy,
        StreamKey { batch: 3, ..key },
    )
    .unwrap();
    assert!(!a.x.bit_eq(&c.x));
}

#[test]
fn shuffles_are_seeded_permutations() {
    let a = batches(100, 10, 9, 4).unwrap();
    assert_eq!(a, batches(100, 10, 9, 4).unwrap());
    assert_ne!(a, batches(100, 10, 9, 5).unwrap());
    let mut all: Vec<usize> = a.concat();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}
