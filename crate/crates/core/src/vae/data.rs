use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::model::PIXELS;
use super::VaeError;
use crate::samplers::RngStream;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const SIDE: usize = 28;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> VaeError {
        VaeError::Idx {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn u32(&mut self) -> Result<u32, VaeError> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err(self.pos, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, want: u32) -> Result<(), VaeError> {
        let got = self.u32()?;
        if got != want {
            return Err(self.err(0, format!("bad magic 0x{got:08x}, expected 0x{want:08x}")));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&'a [u8], VaeError> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            self.err(
                self.bytes.len(),
                format!("truncated payload: need {} bytes from offset {}", len, self.pos),
            )
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, VaeError> {
    std::fs::read(path).map_err(|source| VaeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses an IDX image file (magic `0x803`), pixels scaled to `[0, 1]`.
/// `limit` keeps only the first images.
pub fn load_idx_images(path: &Path, limit: Option<usize>) -> Result<Tensor, VaeError> {
    let bytes = read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    if rows != SIDE || cols != SIDE {
        return Err(r.err(8, format!("expected 28x28 images, got {rows}x{cols}")));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let raw = r.payload(count * PIXELS)?;
    let data = raw[..n * PIXELS].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(&[n, PIXELS], data)?)
}

/// Parses an IDX label file (magic `0x801`).
pub fn load_idx_labels(path: &Path, limit: Option<usize>) -> Result<Vec<u8>, VaeError> {
    let bytes = read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    let n = limit.map_or(count, |l| l.min(count));
    Ok(r.payload(count)?[..n].to_vec())
}

/// Training images and labels from `dir` (the standard MNIST file names).
pub fn load_mnist(dir: &Path, limit: Option<usize>) -> Result<(Tensor, Vec<u8>), VaeError> {
    let images = load_idx_images(&dir.join(TRAIN_IMAGES), limit)?;
    let labels = load_idx_labels(&dir.join(TRAIN_LABELS), limit)?;
    if labels.len() != images.shape()[0] {
        return Err(VaeError::Config(format!(
            "{} images but {} labels in {}",
            images.shape()[0],
            labels.len(),
            dir.display()
        )));
    }
    Ok((images, labels))
}

/// `$GST_DATA_DIR`, if set.
pub fn default_data_dir() -> Option<PathBuf> {
    std::env::var_os("GST_DATA_DIR").map(PathBuf::from)
}

/// Binary 28x28 images, each the union of `parts` prototypes drawn from
/// `pattern_count` random stroke patterns, with 2% of pixels flipped.
pub fn synth_dataset(n: usize, pattern_count: usize, rng: &mut RngStream) -> Tensor {
    synth_dataset_with(n, pattern_count, 3, 0.02, rng)
}

pub fn synth_dataset_with(n: usize, pattern_count: usize, parts: usize, flip: f64, rng: &mut RngStream) -> Tensor {
    let pattern_count = pattern_count.max(1);
    let mut protos = rng.fork(0);
    let patterns: Vec<Vec<bool>> = (0..pattern_count).map(|_| stroke_pattern(&mut protos)).collect();
    let mut pick = rng.fork(1);
    let ids: Vec<usize> = (0..pattern_count).collect();
    let mut data = Vec::with_capacity(n * PIXELS);
    for _ in 0..n {
        let mut img = vec![false; PIXELS];
        for &k in ids.choose_multiple(&mut pick, parts.min(pattern_count)) {
            for (px, &on) in img.iter_mut().zip(&patterns[k]) {
                *px |= on;
            }
        }
        data.extend(img.into_iter().map(|on| {
            let on = on ^ pick.gen_bool(flip);
            if on {
                1.0
            } else {
                0.0
            }
        }));
    }
    Tensor::new(&[n, PIXELS], data).expect("sizes agree")
}

/// Two or three filled rectangles on the 28x28 grid.
fn stroke_pattern(rng: &mut RngStream) -> Vec<bool> {
    let mut img = vec![false; PIXELS];
    for _ in 0..rng.gen_range(2..=3) {
        let (h, w) = if rng.gen_bool(0.5) {
            (rng.gen_range(2..=4), rng.gen_range(6..=14))
        } else {
            (rng.gen_range(6..=14), rng.gen_range(2..=4))
        };
        let top = rng.gen_range(2..SIDE - 2 - h);
        let left = rng.gen_range(2..SIDE - 2 - w);
        for r in top..top + h {
            for c in left..left + w {
                img[r * SIDE + c] = true;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_binary_and_seeded() {
        let a = synth_dataset(50, 20, &mut RngStream::new(4));
        let b = synth_dataset(50, 20, &mut RngStream::new(4));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[50, PIXELS]);
        assert!(a.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert_ne!(a, synth_dataset(50, 20, &mut RngStream::new(5)));
    }
}
