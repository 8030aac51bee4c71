//! IDX image/label files (the MNIST distribution format), plain or gzipped.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as `[h, w, 1]` tensors scaled to `[0, 1]`, with class labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images.first().and_then(|x| x.dims3().ok()).unwrap_or((0, 0, 0))
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset(format!("{what}: truncated header")))
}

/// Parses an IDX3 image buffer into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Dataset(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Dataset(format!(
            "images: header promises {n}x{rows}x{cols} bytes, file holds {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX1 label buffer.
pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Dataset(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Dataset(format!("labels: header promises {n}, file holds {}", body.len())));
    }
    Ok(body)
}

/// Builds a dataset from raw IDX buffers.
pub fn from_idx<T: Real>(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
    }
    let images = pixels
        .chunks_exact(rows * cols)
        .map(|img| {
            let data = img.iter().map(|&p| T::from_f64_lossy(p as f64 / 255.0)).collect();
            Tensor::new(vec![rows, cols, 1], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    Ok(Dataset { images, labels, classes })
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Dataset(format!("{} not found in {}", stem, dir.display())))
}

/// Loads `{split}-images-idx3-ubyte[.gz]` and `{split}-labels-idx1-ubyte[.gz]`
/// from `dir`, where `split` is `train` or `t10k`.
pub fn load_mnist<T: Real>(dir: &Path, split: &str) -> Result<Dataset<T>> {
    let images = read_all(&locate(dir, &format!("{split}-images-idx3-ubyte"))?)?;
    let labels = read_all(&locate(dir, &format!("{split}-labels-idx1-ubyte"))?)?;
    from_idx(&images, &labels, 10)
}

/// Encodes images and labels as IDX buffers.
pub fn to_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        img.extend(v.to_be_bytes());
    }
    for i in images {
        img.extend(i);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend(LABELS_MAGIC.to_be_bytes());
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    (img, lab)
}
