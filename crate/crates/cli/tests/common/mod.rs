#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pathcaps::data::{encode_idx_images, encode_idx_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pathcaps"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("PATHCAPS_DATA_DIR").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Digit `k` is a bright 6×6 block at a class-specific position over faint
/// deterministic texture.
fn block_images(n: usize, salt: usize) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| ((i + salt) % 10) as u8).collect();
    for (i, &k) in labels.iter().enumerate() {
        let k = usize::from(k);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        for (j, p) in img.iter_mut().enumerate() {
            *p = ((j * 7 + i * 13 + salt) % 23) as u8;
        }
        let (oy, ox) = (3 + 10 * (k / 5), 2 + 5 * (k % 5));
        for y in oy..oy + 6 {
            for x in ox..ox + 6 {
                img[y * 28 + x] = 230;
            }
        }
    }
    (pixels, labels)
}

/// Writes the four MNIST-named IDX files into `dir`.
pub fn write_fixture(dir: &Path, n_train: usize, n_test: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let (px, lb) = block_images(n_train, 0);
    fs::write(dir.join(TRAIN_IMAGES), encode_idx_images(28, 28, &px)).unwrap();
    fs::write(dir.join(TRAIN_LABELS), encode_idx_labels(&lb)).unwrap();
    let (px, lb) = block_images(n_test, 3);
    fs::write(dir.join(TEST_IMAGES), encode_idx_images(28, 28, &px)).unwrap();
    fs::write(dir.join(TEST_LABELS), encode_idx_labels(&lb)).unwrap();
    dir.to_path_buf()
}

/// MNIST directory: `PATHCAPS_DATA_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("PATHCAPS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join(TRAIN_IMAGES).exists().then_some(dir)
}
