use std::path::Path;

use super::{locate, read_file, Dataset, Split};
use crate::error::{Error, Result};
use crate::topology::Shape3;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, bytes.len() as u64, "file truncated inside the header"))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::format(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| {
        Error::format(
            path,
            bytes.len() as u64,
            format!("file truncated: expected {} bytes of data after byte {start}", len),
        )
    })
}

/// Loads an IDX image file and its label file.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read_file(images)?;
    check_magic(&img, IMAGE_MAGIC, images)?;
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let pixels = payload(&img, 16, n * rows * cols, images)?.to_vec();

    let lab = read_file(labels)?;
    check_magic(&lab, LABEL_MAGIC, labels)?;
    let m = be_u32(&lab, 4, labels)? as usize;
    if m != n {
        return Err(Error::format(labels, 4, format!("{m} labels for {n} images")));
    }
    let label_bytes = payload(&lab, 8, n, labels)?.to_vec();
    if let Some(pos) = label_bytes.iter().position(|&l| l >= 10) {
        return Err(Error::format(labels, 8 + pos as u64, format!("label {} out of range", label_bytes[pos])));
    }
    Dataset::new(Shape3::new(1, rows, cols), 10, split, pixels, label_bytes)
}

/// Loads one split from a directory holding the four standard IDX files
/// (optionally gzip-compressed).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = locate(
        dir,
        &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")],
    )?;
    let labels = locate(
        dir,
        &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")],
    )?;
    load_mnist_idx(&images, &labels, split)
}
