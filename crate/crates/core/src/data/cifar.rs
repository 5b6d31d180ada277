use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Split};
use crate::augment::Image;
use crate::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Batch file names of a split, in load order.
pub fn cifar_files(split: Split) -> Vec<&'static str> {
    match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => vec!["test_batch.bin"],
    }
}

/// Serializes one image and label as a record of the given side length.
pub fn record_bytes(image: &Image, label: usize) -> Result<Vec<u8>> {
    let label = u8::try_from(label).map_err(|_| Error::Parameter(format!("label {label} does not fit a byte")))?;
    let mut out = Vec::with_capacity(1 + image.pixels().len());
    out.push(label);
    out.extend(image.to_planes());
    Ok(out)
}

/// Parses records of `side×side` images. `path` is only used in error messages.
pub fn parse_cifar_records(
    bytes: &[u8],
    side: usize,
    num_classes: usize,
    path: &Path,
) -> Result<Vec<(Image, usize)>> {
    let record = 1 + 3 * side * side;
    if bytes.len() % record != 0 {
        let offset = (bytes.len() - bytes.len() % record) as u64;
        return Err(Error::io(
            path,
            offset,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("truncated record: {} trailing bytes", bytes.len() % record),
            ),
        ));
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= num_classes {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    offset: (i * record) as u64,
                    reason: format!("label byte {label} exceeds {}", num_classes - 1),
                });
            }
            Ok((Image::from_planes(side, side, &rec[1..])?, label))
        })
        .collect()
}

pub fn read_cifar_file(path: &Path) -> Result<Vec<(Image, usize)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, 0, e))?;
    parse_cifar_records(&bytes, CIFAR_SIDE, CIFAR_CLASSES, path)
}

/// Writes a dataset in the CIFAR record layout (any square image size).
pub fn write_cifar_file(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut out = Vec::new();
    for (im, &l) in dataset.images().iter().zip(dataset.labels()) {
        if im.width() != im.height() {
            return Err(Error::Dimension(format!(
                "record layout needs square images, got {}×{}",
                im.width(),
                im.height()
            )));
        }
        out.extend(record_bytes(im, l)?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, 0, e))
}

/// Loads a split from a directory holding the binary batch files.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in cifar_files(split) {
        let path: PathBuf = dir.join(name);
        for (im, l) in read_cifar_file(&path)? {
            images.push(im);
            labels.push(l);
        }
    }
    LabeledDataset::new(images, labels, CIFAR_CLASSES, split)
}
