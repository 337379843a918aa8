//! Reader/writer for the big-endian IDX files used by classic digit
//! datasets: magic 0x00000803 + count/rows/cols for image files, magic
//! 0x00000801 + count for label files, then raw unsigned bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LabeledBatch;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a big-endian u32 from the header; a short read is a format error
/// (the file is not a complete IDX header).
fn read_header_u32(r: &mut impl Read, what: &str, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| {
        Error::format(format!("{} ends before the IDX {what} field", path.display()))
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Raw image payload of an IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_header_u32(&mut r, "magic", path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{} has IDX magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} (images)",
            path.display()
        )));
    }
    let count = read_header_u32(&mut r, "count", path)? as usize;
    let rows = read_header_u32(&mut r, "rows", path)? as usize;
    let cols = read_header_u32(&mut r, "cols", path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    // A short payload is an IO error: the header promised more data.
    r.read_exact(&mut pixels)?;
    Ok((count, rows, cols, pixels))
}

/// Raw labels of an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_header_u32(&mut r, "magic", path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(format!(
            "{} has IDX magic {magic:#010x}, expected {LABELS_MAGIC:#010x} (labels)",
            path.display()
        )));
    }
    let count = read_header_u32(&mut r, "count", path)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)?;
    Ok(labels)
}

/// Loads paired IDX image/label files as a grayscale digit batch with
/// intensities scaled to `[0,1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledBatch> {
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::data(format!(
            "{} holds {count} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    let images: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledBatch::new(
        Tensor::new(vec![count, rows, cols, 1], images)?,
        labels.iter().map(|&l| l as usize).collect(),
        10,
    )
}

/// Writes an IDX image file from raw bytes (row-major, one byte per pixel).
pub fn write_idx_images(
    path: &Path,
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::data(format!(
            "IDX image payload holds {} bytes, header declares {}",
            pixels.len(),
            count * rows * cols
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(count as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}
