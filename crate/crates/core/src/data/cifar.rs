use std::fs;
use std::path::Path;

use super::{bytes_to_pixels, with_path, Dataset, Split};
use crate::backbones::InputShape;
use crate::error::{Error, Result};

/// One label byte followed by 3×32×32 channel-planar pixels.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

const SHAPE: InputShape = InputShape {
    channels: 3,
    height: 32,
    width: 32,
};

/// Raw labels and pixel bytes of one binary batch file holding any whole
/// number of records.
pub fn read_cifar10_file(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = with_path(path, fs::read(path))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected a non-zero multiple of {CIFAR_RECORD_BYTES} bytes, found {}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("record {i} has label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// The standard layout: `data_batch_1.bin` .. `data_batch_5.bin` for
/// training and `test_batch.bin` for test, each exactly 10000 records.
pub fn read_cifar10(root: &Path, split: Split, mean: &[f32], std: &[f32]) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut labels = Vec::new();
    let mut bytes = Vec::new();
    for name in files {
        let path = root.join(&name);
        let expected = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE;
        let actual = with_path(&path, fs::metadata(&path))?.len() as usize;
        if actual != expected {
            return Err(Error::Format {
                path,
                message: format!("expected {expected} bytes, found {actual}"),
            });
        }
        let (l, p) = read_cifar10_file(&path)?;
        labels.extend(l);
        bytes.extend(p);
    }
    Dataset::new(SHAPE, 10, bytes_to_pixels(&bytes, SHAPE, mean, std), labels)
}
