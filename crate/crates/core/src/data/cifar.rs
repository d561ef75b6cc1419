use std::path::Path;

use crate::data::{read_file, Dataset, Normalization, Split};
use crate::error::DataError;

pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const SIDE: usize = 32;
const IMAGE_BYTES: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + IMAGE_BYTES;

fn parse_batch(
    bytes: &[u8],
    norm: &Normalization,
    images: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    if !bytes.len().is_multiple_of(RECORD) {
        let expected = (bytes.len() / RECORD + 1) * RECORD;
        return Err(DataError::Truncated { what: "CIFAR-10 batch".into(), expected, actual: bytes.len() });
    }
    for (i, record) in bytes.chunks(RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(DataError::Format { offset: i * RECORD, msg: format!("label {label} not in [0, 10)") });
        }
        labels.push(label as usize);
        norm.apply_u8(&record[1..], images);
    }
    Ok(())
}

/// Parses CIFAR-10 binary batches (one label byte, then 3072 channel-major pixels per record).
pub fn parse_cifar10(batches: &[&[u8]], split: Split) -> Result<Dataset, DataError> {
    let norm = Normalization { mean: CIFAR10_MEAN.to_vec(), std: CIFAR10_STD.to_vec() };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for b in batches {
        parse_batch(b, &norm, &mut images, &mut labels)?;
    }
    if labels.is_empty() {
        return Err(DataError::Empty("CIFAR-10 batches hold no records".into()));
    }
    Dataset::new(images, labels, 3, SIDE, SIDE, 10, split, norm)
}

pub fn load_cifar10(paths: &[&Path], split: Split) -> Result<Dataset, DataError> {
    let files = paths.iter().map(|p| read_file(p)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[u8]> = files.iter().map(Vec::as_slice).collect();
    parse_cifar10(&refs, split)
}

/// Loads `data_batch_{1..5}.bin` (train) or `test_batch.bin` (test) from `dir`.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let names: Vec<String> = match split {
        Split::Test => vec!["test_batch.bin".into()],
        _ => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
    };
    let paths: Vec<_> = names.iter().map(|n| dir.join(n)).collect();
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    load_cifar10(&refs, split)
}
