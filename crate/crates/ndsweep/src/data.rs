//! Dataset parsing (CIFAR-10 binary, MNIST IDX) and preprocessing, plus
//! a self-contained synthetic digit generator for runs without a real
//! dataset on disk.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loaded dataset: images `[N, C, H, W]` as normalized reals, class
/// labels, and a record of the preprocessing applied.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    /// Divisor applied to raw pixel bytes (255 for both formats here).
    pub scale: f32,
    /// Per-pixel mean image subtracted after scaling, if any.
    pub mean_image: Option<Vec<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (deterministic subset).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::InvalidInput("cannot take an empty subset".into()));
        }
        let sample_len: usize = self.images.shape()[1..].iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Ok(Dataset {
            images: Tensor::from_vec(&shape, self.images.data()[..n * sample_len].to_vec())?,
            labels: self.labels[..n].to_vec(),
            meta: self.meta.clone(),
        })
    }
}

const CIFAR_PIXELS: usize = 3072;
const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;

/// Parse CIFAR-10 binary batch files: 3073-byte records, one label byte
/// then 3072 pixel bytes (R, G, B planes, 32x32 row-major). Pixels are
/// scaled to `[0, 1]`; mean subtraction is a separate step so the mean
/// can come from the training split.
pub fn load_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::MalformedFile {
                path: path.clone(),
                reason: format!(
                    "size {} is not a positive multiple of {CIFAR_RECORD}",
                    bytes.len()
                ),
            });
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0];
            if label > 9 {
                return Err(Error::MalformedRecord {
                    path: path.clone(),
                    index: rec,
                    reason: format!("label byte {label} > 9"),
                });
            }
            labels.push(label as usize);
            images.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], images)?,
        labels,
        meta: DatasetMeta {
            source: "cifar10".into(),
            scale: 255.0,
            mean_image: None,
        },
    })
}

/// Compute the mean image over `train`, subtract it from both splits,
/// and record it in both metas.
pub fn subtract_train_mean(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<()> {
    let n = train.len();
    let sample_len: usize = train.images.shape()[1..].iter().product();
    let mut mean = vec![0.0f32; sample_len];
    for i in 0..n {
        for (m, &v) in mean
            .iter_mut()
            .zip(&train.images.data()[i * sample_len..(i + 1) * sample_len])
        {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f32;
    }
    let apply = |ds: &mut Dataset| {
        for i in 0..ds.len() {
            for (v, m) in ds.images.data_mut()[i * sample_len..(i + 1) * sample_len]
                .iter_mut()
                .zip(&mean)
            {
                *v -= m;
            }
        }
        ds.meta.mean_image = Some(mean.clone());
    };
    apply(train);
    for ds in others {
        if ds.images.shape()[1..] != train.images.shape()[1..] {
            return Err(Error::Inconsistency(
                "mean subtraction across differently shaped datasets".into(),
            ));
        }
        apply(ds);
    }
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("truncated header at offset {off}"),
        })
}

/// Parse an MNIST IDX image/label file pair. Pixels are scaled to
/// `[0, 1]`, single channel.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::MalformedFile {
            path: images_path.to_path_buf(),
            reason: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&img_bytes, 4, images_path)? as usize;
    let h = be_u32(&img_bytes, 8, images_path)? as usize;
    let w = be_u32(&img_bytes, 12, images_path)? as usize;
    if img_bytes.len() != 16 + n * h * w {
        return Err(Error::MalformedFile {
            path: images_path.to_path_buf(),
            reason: format!(
                "size {} does not match header N={n}, {h}x{w}",
                img_bytes.len()
            ),
        });
    }

    let lab_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = be_u32(&lab_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::MalformedFile {
            path: labels_path.to_path_buf(),
            reason: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = be_u32(&lab_bytes, 4, labels_path)? as usize;
    if lab_bytes.len() != 8 + n_labels {
        return Err(Error::MalformedFile {
            path: labels_path.to_path_buf(),
            reason: format!("size {} does not match header N={n_labels}", lab_bytes.len()),
        });
    }
    if n != n_labels {
        return Err(Error::Inconsistency(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    if n == 0 {
        return Err(Error::MalformedFile {
            path: images_path.to_path_buf(),
            reason: "empty dataset".into(),
        });
    }

    let images: Vec<f32> = img_bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, h, w], images)?,
        labels,
        meta: DatasetMeta {
            source: "mnist-idx".into(),
            scale: 255.0,
            mean_image: None,
        },
    })
}

/// Write raw images/labels as an MNIST IDX file pair.
pub fn write_mnist_idx(
    images: &[u8],
    labels: &[u8],
    h: usize,
    w: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let n = labels.len();
    if images.len() != n * h * w {
        return Err(Error::Inconsistency(format!(
            "{} image bytes for {n} labels of {h}x{w}",
            images.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend_from_slice(images);
    fs::write(images_path, &img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(labels_path, &lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

pub mod synth {
    //! Procedural 28x28 digit glyphs (seven-segment style) with position
    //! jitter, intensity variation, and pixel noise. Deterministic under
    //! the seed; intended as a stand-in when no MNIST files are on disk.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GLYPH_W: usize = 12;
    const GLYPH_H: usize = 20;
    const IMG: usize = 28;

    // segment bit order: A top, B top-right, C bottom-right, D bottom,
    // E bottom-left, F top-left, G middle
    const SEGMENTS: [u8; 10] = [
        0b0111111, // 0: ABCDEF
        0b0000110, // 1: BC
        0b1011011, // 2: ABDEG
        0b1001111, // 3: ABCDG
        0b1100110, // 4: BCFG
        0b1101101, // 5: ACDFG
        0b1111101, // 6: ACDEFG
        0b0000111, // 7: ABC
        0b1111111, // 8
        0b1101111, // 9: ABCDFG
    ];

    fn draw_segment(glyph: &mut [f32; GLYPH_W * GLYPH_H], seg: usize) {
        let mut rect = |x0: usize, x1: usize, y0: usize, y1: usize| {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    glyph[y * GLYPH_W + x] = 1.0;
                }
            }
        };
        match seg {
            0 => rect(0, GLYPH_W - 1, 0, 1),                          // A
            1 => rect(GLYPH_W - 2, GLYPH_W - 1, 0, GLYPH_H / 2),      // B
            2 => rect(GLYPH_W - 2, GLYPH_W - 1, GLYPH_H / 2, GLYPH_H - 1), // C
            3 => rect(0, GLYPH_W - 1, GLYPH_H - 2, GLYPH_H - 1),      // D
            4 => rect(0, 1, GLYPH_H / 2, GLYPH_H - 1),                // E
            5 => rect(0, 1, 0, GLYPH_H / 2),                          // F
            6 => rect(0, GLYPH_W - 1, GLYPH_H / 2 - 1, GLYPH_H / 2),  // G
            _ => unreachable!(),
        }
    }

    /// Generate `n` images (u8 pixels, row-major 28x28) and labels.
    /// Each glyph gets a random scale, shear, position, per-segment
    /// intensity, pixel noise, and occasional speckles, so the classes
    /// overlap enough that capacity actually matters.
    pub fn generate(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * IMG * IMG);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let digit = rng.gen_range(0..10u8);
            let mut glyph = [0.0f32; GLYPH_W * GLYPH_H];
            for seg in 0..7 {
                if SEGMENTS[digit as usize] & (1 << seg) != 0 {
                    let mut stroke = [0.0f32; GLYPH_W * GLYPH_H];
                    draw_segment(&mut stroke, seg);
                    let level = 0.45 + 0.55 * rng.gen::<f32>();
                    for (g, s) in glyph.iter_mut().zip(stroke) {
                        *g = g.max(s * level);
                    }
                }
            }
            let gw = rng.gen_range(8..=15usize);
            let gh = rng.gen_range(13..=23usize);
            let slant = rng.gen_range(-0.30..0.30f32);
            let ox = rng.gen_range(4..=IMG - gw - 4) as f32;
            let oy = rng.gen_range(2..=IMG - gh - 2) as f32;
            for py in 0..IMG {
                for px in 0..IMG {
                    let gy = py as f32 - oy;
                    let gx = px as f32 - ox - slant * (gy - gh as f32 / 2.0);
                    let mut v = 0.0f32;
                    if gx >= 0.0 && gy >= 0.0 && (gx as usize) < gw && (gy as usize) < gh {
                        let cx = (gx * GLYPH_W as f32 / gw as f32) as usize;
                        let cy = (gy * GLYPH_H as f32 / gh as f32) as usize;
                        v = glyph[cy.min(GLYPH_H - 1) * GLYPH_W + cx.min(GLYPH_W - 1)];
                    }
                    v += 0.30 * (rng.gen::<f32>() - 0.5);
                    if rng.gen::<f32>() < 0.004 {
                        v = rng.gen();
                    }
                    images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(digit);
        }
        (images, labels)
    }
}
