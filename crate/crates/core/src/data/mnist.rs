use std::path::Path;

use crate::data::{read_file, Dataset, Normalization, Split};
use crate::error::DataError;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, DataError> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())).ok_or_else(|| {
        DataError::Truncated { what: format!("{what} header"), expected: offset + 4, actual: bytes.len() }
    })
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let magic = be_u32(bytes, 0, "IDX image")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Format { offset: 0, msg: format!("bad IDX image magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, "IDX image")? as usize;
    let rows = be_u32(bytes, 8, "IDX image")? as usize;
    let cols = be_u32(bytes, 12, "IDX image")? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Format { offset: 8, msg: format!("degenerate image size {rows}x{cols}") });
    }
    let expected = n
        .checked_mul(rows * cols)
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| DataError::Format { offset: 4, msg: "image count overflows".into() })?;
    if bytes.len() != expected {
        return Err(DataError::Truncated { what: "IDX image file".into(), expected, actual: bytes.len() });
    }
    Ok((n, rows, cols, &bytes[16..]))
}

fn parse_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = be_u32(bytes, 0, "IDX label")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::Format { offset: 0, msg: format!("bad IDX label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, "IDX label")? as usize;
    let expected = n + 8;
    if bytes.len() != expected {
        return Err(DataError::Truncated { what: "IDX label file".into(), expected, actual: bytes.len() });
    }
    let labels = &bytes[8..];
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(DataError::Format { offset: 8 + pos, msg: format!("label {} not in [0, 10)", labels[pos]) });
    }
    Ok(labels)
}

/// Parses an IDX image/label pair from memory.
pub fn parse_mnist(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::Invalid(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(DataError::Empty("MNIST file holds no images".into()));
    }
    let norm = Normalization { mean: vec![MNIST_MEAN], std: vec![MNIST_STD] };
    let mut data = Vec::with_capacity(pixels.len());
    for img in pixels.chunks(rows * cols) {
        norm.apply_u8(img, &mut data);
    }
    Dataset::new(data, labels.iter().map(|&l| l as usize).collect(), 1, rows, cols, 10, split, norm)
}

/// Loads an IDX image file and its label file.
pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    parse_mnist(&read_file(images)?, &read_file(labels)?, split)
}

/// Loads the train or test split from a directory holding the four
/// canonical, uncompressed MNIST files.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let prefix = match split {
        Split::Test => "t10k",
        _ => "train",
    };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

#[cfg(test)]
pub(crate) fn encode_idx(images: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::new();
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}
