use std::path::{Path, PathBuf};

use pathcaps::capsules::RoutingMode;
use pathcaps::data::{self, Dataset, SplitConfig};
use pathcaps::model::NetworkSpec;
use pathcaps::paths::PathVariant;
use pathcaps::train::{self, Datasets, TrainConfig};

/// Ten classes, each a bright block at its own spot; written through the
/// IDX encoder so the load path is exercised too.
fn fixture_files(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut pixels = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for (i, &k) in labels.iter().enumerate() {
        let k = usize::from(k);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        for (j, p) in img.iter_mut().enumerate() {
            *p = ((j * 5 + i * 11) % 19) as u8;
        }
        let (oy, ox) = (3 + 10 * (k / 5), 2 + 5 * (k % 5));
        for y in oy..oy + 6 {
            for x in ox..ox + 6 {
                img[y * 28 + x] = 240;
            }
        }
    }
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&ip, data::encode_idx_images(28, 28, &pixels)).unwrap();
    std::fs::write(&lp, data::encode_idx_labels(&labels)).unwrap();
    (ip, lp)
}

#[test]
fn load_split_train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = fixture_files(dir.path(), 120);
    let all = Dataset::load(&ip, &lp).unwrap();
    assert_eq!(all.len(), 120);
    assert_eq!(all.provenance.len(), 2);
    assert!(all.provenance.iter().all(|h| h.len() == 64));

    let (train_set, val) = data::split(&all, &SplitConfig { val_fraction: 0.25, seed: 4 }).unwrap();
    assert_eq!((train_set.len(), val.len()), (90, 30));

    let mut spec = NetworkSpec::path_caps(2, PathVariant::Table2Matched, RoutingMode::FanOut);
    spec.reconstruction = true;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 15,
        ..TrainConfig::default()
    };
    let datasets = Datasets {
        train: train_set,
        validation: val.clone(),
        test: Some(val.clone()),
    };
    let out = train::train(&spec, &datasets, &cfg, dir.path().join("run")).unwrap();
    assert_eq!(out.records.len(), 2);
    assert!(out.records.iter().all(|r| r.train_recon_loss.is_some()));

    let restored = train::load_checkpoint(&out.checkpoint_path).unwrap();
    assert_eq!(restored.spec, spec);
    let ev = train::evaluate(&restored.spec, &restored.params, &val, 7).unwrap();
    assert_eq!(ev.error_pct, out.best_val_error_pct);
    assert_eq!(Some(ev.error_pct), out.best_test_error_pct);

    let csv = std::fs::read_to_string(&out.metrics_path).unwrap();
    assert_eq!(csv, train::metrics_csv(&out.records));
}

#[test]
fn official_mnist_files_when_present() {
    let dir = std::env::var_os("PATHCAPS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    if !dir.join(data::TRAIN_IMAGES).exists() {
        eprintln!("skipping: no MNIST files in {}", dir.display());
        return;
    }
    let train_set = Dataset::load_mnist_train(&dir).unwrap();
    let test = Dataset::load_mnist_test(&dir).unwrap();
    assert_eq!((train_set.len(), test.len()), (60_000, 10_000));
    assert_eq!(train_set.labels[0], 5);
    assert_eq!(test.labels[0], 7);
    assert!(train_set.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
}
