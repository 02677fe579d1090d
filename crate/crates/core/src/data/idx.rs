//! IDX files: a big-endian magic (`0x00000803` for u8 image stacks,
//! `0x00000801` for u8 label vectors), one big-endian u32 per dimension,
//! then raw bytes.

use std::path::Path;

use super::Dataset;
use crate::numerics::{bilinear_resize, Tensor};
use crate::Error;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw u8 image stack as stored in an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        what: "IDX file",
        offset: offset as u64,
        message: message.into(),
    }
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, Error> {
    let word = |i: usize| -> Result<u32, Error> {
        let at = 4 * i;
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| format_err(bytes.len(), format!("truncated header, expected {} bytes", 4 * (dims + 1))))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(0, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    (1..=dims).map(|i| word(i).map(|w| w as usize)).collect()
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8], Error> {
    bytes.get(start..start + len).ok_or_else(|| {
        format_err(bytes.len(), format!("truncated data, expected {} bytes in total", start + len))
    })
}

pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages, Error> {
    let dims = header(bytes, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, Error> {
    let dims = header(bytes, LABELS_MAGIC, 1)?;
    Ok(payload(bytes, 8, dims[0])?.to_vec())
}

pub fn write_idx_images(images: &IdxImages) -> Result<Vec<u8>, Error> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Invalid(format!(
            "{} pixels do not form {}x{}x{} images",
            images.pixels.len(),
            images.count,
            images.rows,
            images.cols
        )));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair as a dataset of `side x side` images with
/// `channels` copies of the grey level, scaled to `[0, 1]`.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    side: usize,
    channels: usize,
    num_classes: usize,
) -> Result<Dataset, Error> {
    let images = read_idx_images(&read_file(images_path)?)?;
    let labels = read_idx_labels(&read_file(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    if let Some(pos) = labels.iter().position(|&l| l as usize >= num_classes) {
        return Err(format_err(8 + pos, format!("label {} outside 0..{num_classes}", labels[pos])));
    }
    let grey = Tensor::new(
        vec![images.count, images.rows, images.cols, 1],
        images.pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
    )
    .map_err(|_| Error::Invalid("IDX file holds no images".into()))?;
    let grey = if images.rows == side && images.cols == side {
        grey
    } else {
        bilinear_resize(&grey, side, side)?
    };
    let data = grey.data().iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect();
    Dataset::new(
        Tensor::new(vec![images.count, side, side, channels], data)?,
        labels.into_iter().map(usize::from).collect(),
    )
}
