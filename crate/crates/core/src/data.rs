//! IDX (MNIST / Fashion-MNIST) ingestion and minibatching.
//!
//! IDX layout: a big-endian `u32` magic (`0x00000803` for `u8` rank-3 image
//! files, `0x00000801` for `u8` rank-1 label files), one big-endian `u32` per
//! dimension, then the raw unsigned bytes. Gzip-compressed files are detected
//! by their `1f 8b` header and decompressed transparently.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::ndcore::{SeededRng, Tensor2};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images are `pixels x N` with values in `[0, 1]`; `labels[j]` belongs to
/// column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Tensor2,
    pub labels: Vec<usize>,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| Error::Idx {
        offset,
        msg: format!("header truncated, file has {} bytes", bytes.len()),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

fn expect_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Idx { offset: 0, msg: format!("bad magic {magic:#010x}, expected {want:#010x}") });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < offset + len {
        return Err(Error::Idx {
            offset: bytes.len(),
            msg: format!("payload truncated, need {} bytes after header, have {}", len, bytes.len() - offset),
        });
    }
    if bytes.len() > offset + len {
        return Err(Error::Idx {
            offset: offset + len,
            msg: format!("{} trailing bytes after payload", bytes.len() - offset - len),
        });
    }
    Ok(&bytes[offset..offset + len])
}

/// Parses an IDX image file into a `(rows·cols) x N` tensor scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor2> {
    expect_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let raw = payload(bytes, 16, n * pixels)?;
    let mut out = Tensor2::zeros(pixels, n);
    let data = out.data_mut();
    for (j, image) in raw.chunks_exact(pixels.max(1)).enumerate() {
        for (p, &b) in image.iter().enumerate() {
            data[p * n + j] = f64::from(b) / 255.0;
        }
    }
    Ok(out)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    expect_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| usize::from(b)).collect())
}

/// Serializes a `(rows·cols) x N` tensor back to IDX image bytes, quantizing
/// with `round(v·255)`.
pub fn serialize_idx_images(images: &Tensor2, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if images.rows() != rows * cols {
        return Err(Error::Shape { op: "serialize_idx_images", left: (rows, cols), right: images.shape() });
    }
    let n = images.cols();
    let mut out = Vec::with_capacity(16 + images.data().len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for j in 0..n {
        for p in 0..rows * cols {
            out.push((images.get(p, j) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn serialize_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Reads a file, gunzipping it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Finds `<stem>` or `<stem>.gz` in `dir`.
fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("neither {} nor {} exists", plain.display(), gz.display()),
    )))
}

impl ImageDataset {
    /// Loads `train-*` or `t10k-*` IDX files from a directory using the
    /// canonical MNIST file names.
    pub fn load(dir: &Path, split: Split, name: &str) -> Result<Self> {
        let images_path = locate(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
        let labels_path = locate(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
        let images = parse_idx_images(&read_maybe_gz(&images_path)?)?;
        let labels = parse_idx_labels(&read_maybe_gz(&labels_path)?)?;
        Self::new(images, labels, name)
    }

    pub fn new(images: Tensor2, labels: Vec<usize>, name: &str) -> Result<Self> {
        if images.cols() != labels.len() {
            return Err(Error::Shape { op: "ImageDataset", left: images.shape(), right: (1, labels.len()) });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::LabelOutOfRange { label: bad, n_categories: 10 });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageDataset { images, labels, name: name.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Examples with the given label, in their original order.
    pub fn filter_by_label(&self, label: usize) -> Result<ImageDataset> {
        self.filter_by_labels(&[label])
    }

    pub fn filter_by_labels(&self, keep: &[usize]) -> Result<ImageDataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&j| keep.contains(&self.labels[j])).collect();
        if idx.is_empty() {
            return Err(Error::EmptyData(format!("no examples with label(s) {keep:?} in {}", self.name)));
        }
        Ok(ImageDataset {
            images: self.images.select_columns(&idx),
            labels: idx.iter().map(|&j| self.labels[j]).collect(),
            name: self.name.clone(),
        })
    }

    /// First `n` examples of each label, keeping dataset order.
    pub fn take_per_label(&self, n: usize) -> ImageDataset {
        let mut seen = BTreeMap::new();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&j| {
                let c = seen.entry(self.labels[j]).or_insert(0usize);
                *c += 1;
                *c <= n
            })
            .collect();
        ImageDataset {
            images: self.images.select_columns(&idx),
            labels: idx.iter().map(|&j| self.labels[j]).collect(),
            name: self.name.clone(),
        }
    }

    pub fn batches(&self, batch_size: usize, seed: u64) -> Batches<'_> {
        Batches::new(&self.images, batch_size, seed)
    }
}

/// Shuffled minibatches over the columns of an image tensor. The final
/// partial batch is kept.
pub struct Batches<'a> {
    images: &'a Tensor2,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    pub fn new(images: &'a Tensor2, batch_size: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..images.cols()).collect();
        SeededRng::new(seed).shuffle(&mut order);
        Batches { images, order, batch_size: batch_size.max(1), pos: 0 }
    }

    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Column indices of the next batch without materializing it.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let s = &self.order[self.pos..end];
        self.pos = end;
        Some(s)
    }
}

impl Iterator for Batches<'_> {
    type Item = Tensor2;

    fn next(&mut self) -> Option<Tensor2> {
        let images = self.images;
        self.next_indices().map(|idx| images.select_columns(idx))
    }
}
