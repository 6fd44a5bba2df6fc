use std::path::{Path, PathBuf};

use super::{read_file, Dataset, Split};
use crate::error::{Error, Result};
use crate::topology::Shape3;

/// One label byte followed by 32x32 red, green and blue planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_binary(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        let rem = bytes.len() % CIFAR_RECORD;
        if rem != 0 || bytes.is_empty() {
            return Err(Error::format(
                path,
                (bytes.len() - rem) as u64,
                format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (k, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::format(
                    path,
                    (k * CIFAR_RECORD) as u64,
                    format!("label {} out of range", rec[0]),
                ));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Dataset::new(Shape3::new(3, 32, 32), 10, split, pixels, labels)
}

/// Loads one split from a directory with `data_batch_{1..5}.bin` and
/// `test_batch.bin`, either directly or in a `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let base = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|k| format!("data_batch_{k}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let paths = names
        .iter()
        .map(|n| super::locate(&base, &[n.as_str()]))
        .collect::<Result<Vec<_>>>()?;
    load_cifar10_binary(&paths, split)
}
