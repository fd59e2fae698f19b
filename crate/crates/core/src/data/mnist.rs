use std::fs;
use std::path::Path;

use super::{bytes_to_pixels, with_path, Dataset, Split};
use crate::backbones::InputShape;
use crate::error::{Error, Result};

fn format_err(path: &Path, message: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message,
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// `(count, rows, cols, pixels)` from an IDX3 unsigned-byte file.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = with_path(path, fs::read(path))?;
    if bytes.len() < 16 || be_u32(&bytes, 0) != 0x0803 {
        return Err(format_err(path, "missing IDX3 header (magic 0x00000803)".into()));
    }
    let (n, rows, cols) = (
        be_u32(&bytes, 4) as usize,
        be_u32(&bytes, 8) as usize,
        be_u32(&bytes, 12) as usize,
    );
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = with_path(path, fs::read(path))?;
    if bytes.len() < 8 || be_u32(&bytes, 0) != 0x0801 {
        return Err(format_err(path, "missing IDX1 header (magic 0x00000801)".into()));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        ));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l > 9 {
                Err(format_err(path, format!("record {i} has label {l} outside 0..=9")))
            } else {
                Ok(l as usize)
            }
        })
        .collect()
}

pub fn read_mnist(root: &Path, split: Split, mean: &[f32], std: &[f32]) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = root.join(format!("{prefix}-images-idx3-ubyte"));
    let (n, rows, cols, bytes) = read_idx_images(&img_path)?;
    if (rows, cols) != (28, 28) {
        return Err(format_err(&img_path, format!("expected 28×28 images, found {rows}×{cols}")));
    }
    let labels = read_idx_labels(&root.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if labels.len() != n {
        return Err(format_err(
            &img_path,
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    let shape = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    Dataset::new(shape, 10, bytes_to_pixels(&bytes, shape, mean, std), labels)
}
