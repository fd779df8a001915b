//! IDX dataset loading, splitting and batching.
//!
//! IDX layout: two zero bytes, a dtype byte (only `0x08`, unsigned byte, is
//! accepted), a dimension-count byte, one big-endian `u32` extent per
//! dimension, then the raw payload. Files ending in `.gz` are decompressed
//! transparently.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{HebbError, Result};
use crate::tensor::{RngState, Tensor};

const DTYPE_U8: u8 = 0x08;

/// Images scaled to `[0, 1]` with their class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[count × channels × height × width]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(HebbError::dim(
                "Dataset",
                format!("images must be [count×c×h×w], got {:?}", images.shape()),
            ));
        }
        if images.rows() != labels.len() {
            return Err(HebbError::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Number of classes implied by the largest label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels)
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(HebbError::Config("subset of zero samples".into()));
        }
        Dataset::new(self.images.slice_rows(0, n)?, self.labels[..n].to_vec())
    }
}

struct IdxArray {
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| HebbError::io(path, e))?;
    let mut buf = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(file).read_to_end(&mut buf)
    } else {
        file.read_to_end(&mut buf)
    };
    res.map_err(|e| HebbError::io(path, e))?;
    Ok(buf)
}

fn parse_idx(path: &Path, raw: &[u8]) -> Result<IdxArray> {
    let fmt = |offset: usize, detail: String| HebbError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if raw.len() < 4 {
        return Err(fmt(raw.len(), "file shorter than the 4-byte magic".into()));
    }
    if raw[0] != 0 || raw[1] != 0 {
        return Err(fmt(0, format!("magic must start with two zero bytes, got {:02x} {:02x}", raw[0], raw[1])));
    }
    if raw[2] != DTYPE_U8 {
        return Err(fmt(2, format!("unsupported dtype 0x{:02x}, expected 0x08", raw[2])));
    }
    let ndim = raw[3] as usize;
    if ndim == 0 {
        return Err(fmt(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if raw.len() < header {
        return Err(fmt(raw.len(), format!("truncated header: {ndim} extents need {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as usize
        })
        .collect();
    let payload: usize = dims.iter().product();
    if raw.len() - header < payload {
        return Err(fmt(
            raw.len(),
            format!("truncated payload: dims {dims:?} need {payload} bytes, found {}", raw.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        bytes: raw[header..header + payload].to_vec(),
    })
}

/// Loads an image/label IDX pair. Pixels are divided by 255; 3-D image files
/// get a single channel.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx(images_path, &read_all(images_path)?)?;
    let labels = parse_idx(labels_path, &read_all(labels_path)?)?;

    let shape = match images.dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        d => {
            return Err(HebbError::Format {
                path: images_path.to_path_buf(),
                offset: 3,
                detail: format!("image file must have 3 or 4 dimensions, got {d:?}"),
            })
        }
    };
    if labels.dims.len() != 1 {
        return Err(HebbError::Format {
            path: labels_path.to_path_buf(),
            offset: 3,
            detail: format!("label file must be 1-D, got {:?}", labels.dims),
        });
    }
    if labels.dims[0] != shape[0] {
        return Err(HebbError::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            shape[0],
            labels_path.display(),
            labels.dims[0]
        )));
    }
    let pixels = images.bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(shape, pixels)?;
    Dataset::new(images, labels.bytes.iter().map(|&b| b as usize).collect())
}

/// Writes an unsigned-byte IDX file (gzip if the name ends in `.gz`).
/// Values are taken as already-quantized bytes.
pub fn write_idx(path: &Path, dims: &[usize], bytes: &[u8]) -> Result<()> {
    let mut buf = vec![0, 0, DTYPE_U8, dims.len() as u8];
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(bytes);
    let file = File::create(path).map_err(|e| HebbError::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&buf).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&buf)
    };
    res.map_err(|e| HebbError::io(path, e))
}

/// Writes a dataset back out as an IDX pair, re-quantizing pixels to bytes.
pub fn write_idx_pair(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.images.shape();
    let dims: Vec<usize> = if s[1] == 1 {
        vec![s[0], s[2], s[3]]
    } else {
        s.to_vec()
    };
    let bytes: Vec<u8> = dataset
        .images
        .data()
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_idx(images_path, &dims, &bytes)?;
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    write_idx(labels_path, &[labels.len()], &labels)
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle: bool,
    pub rng: RngState,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle: bool, rng: RngState) -> Self {
        BatchPlan {
            batch_size,
            shuffle,
            rng,
        }
    }
}

/// One epoch's worth of batches. Images are gathered lazily per batch.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.dataset.images.select_rows(idx).expect("indices in range");
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((images, labels))
    }
}

/// Batches for one epoch. With shuffling, the permutation is drawn from
/// `plan.rng`, which advances so the next call yields a fresh order.
pub fn batches<'a>(dataset: &'a Dataset, plan: &mut BatchPlan) -> Result<Batches<'a>> {
    if plan.batch_size == 0 {
        return Err(HebbError::Config("batch size must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(HebbError::Config("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if plan.shuffle {
        plan.rng.shuffle(&mut order);
    }
    Ok(Batches {
        dataset,
        order,
        batch_size: plan.batch_size,
        pos: 0,
    })
}

/// Seeded disjoint split; the holdout gets `round(len · fraction)` samples.
pub fn split(dataset: &Dataset, fraction: f64, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HebbError::Config(format!("split fraction {fraction} must be in (0, 1)")));
    }
    let holdout = (dataset.len() as f64 * fraction).round() as usize;
    if holdout == 0 || holdout == dataset.len() {
        return Err(HebbError::Config(format!(
            "split fraction {fraction} of {} samples leaves an empty side",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let (hold, train) = order.split_at(holdout);
    Ok((dataset.select(train)?, dataset.select(hold)?))
}
