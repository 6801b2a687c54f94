//! Datasets: synthetic Gaussian blobs and the IDX image/label file format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Classification dataset: inputs with the batch on axis 0, one integer
/// class id per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::shape(
                "dataset inputs need at least a batch axis and one feature axis",
            ));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::param("num_classes must be >= 1"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::param(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of scalars per sample.
    pub fn sample_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    /// Copies the given samples into a new batch, preserving index order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        (
            Tensor::from_vec(shape, data).expect("gather preserves sample shape"),
            labels,
        )
    }
}

/// Synthetic 2-D Gaussian clusters, one per class, centers evenly spaced on
/// the unit circle. Class sizes are balanced within one sample.
pub fn make_blobs(
    rng: &mut SeededRng,
    n: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if classes == 0 {
        return Err(Error::param("classes must be >= 1"));
    }
    if n < classes {
        return Err(Error::param(format!(
            "need at least one sample per class: n = {n}, classes = {classes}"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::param(format!("spread must be >= 0, got {spread}")));
    }
    let centers: Vec<(f64, f64)> = (0..classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            (angle.cos(), angle.sin())
        })
        .collect();
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (cx, cy) = centers[class];
        data.push(cx + rng.normal(0.0, spread));
        data.push(cy + rng.normal(0.0, spread));
        labels.push(class);
    }
    Dataset::new(Tensor::from_vec(vec![n, 2], data)?, labels, classes)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len(),
                format!("truncated while reading {what}"),
            ));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
}

/// Reads an IDX image file (magic `0x00000803`): shape `(n, rows, cols)` of
/// unsigned bytes. Pixels are scaled to `[0, 1]` and the result is shaped
/// `(n, 1, rows, cols)` for the conv layers; `Flatten` front ends accept it
/// unchanged.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut r = IdxReader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::format(
            0,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_MAGIC_IMAGES:08x}"),
        ));
    }
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, "zero extent in image header".to_string()));
    }
    let expected = n * rows * cols;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated image payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            r.pos + expected,
            format!("{} trailing bytes after image payload", payload.len() - expected),
        ));
    }
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(vec![n, 1, rows, cols], data)
}

/// Reads an IDX label file (magic `0x00000801`): `n` unsigned byte labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let mut r = IdxReader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::format(
            0,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_MAGIC_LABELS:08x}"),
        ));
    }
    let n = r.u32_be("label count")? as usize;
    let payload = &bytes[r.pos..];
    if payload.len() < n {
        return Err(Error::format(
            bytes.len(),
            format!("truncated label payload: expected {n} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(Error::format(
            r.pos + n,
            format!("{} trailing bytes after label payload", payload.len() - n),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads a paired IDX image/label file set into a dataset. `num_classes`
/// defaults to `max label + 1` when not given.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let inputs = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if inputs.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "{} images but {} labels",
            inputs.shape()[0],
            labels.len()
        )));
    }
    let classes = match num_classes {
        Some(c) => c,
        None => labels.iter().max().map_or(1, |&m| m + 1),
    };
    Dataset::new(inputs, labels, classes)
}
