//! Dataset ingestion: MNIST-style IDX files and CIFAR-10 binary batches.
//!
//! Pixels are scaled by `1/255` into `[0, 1]`; no mean/std standardization.
//! Gzip-compressed files are detected by their magic bytes and inflated
//! transparently. Every loaded file's SHA-256 (of the bytes on disk) is kept
//! in the dataset's provenance.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub files: Vec<FileChecksum>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, provenance: Provenance) -> Result<Dataset> {
        if images.rank() != 4 {
            return Err(Error::shape(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {l} is not a valid class")));
        }
        Ok(Dataset {
            images,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Ok(Dataset {
            images,
            labels,
            provenance: self.provenance.clone(),
        })
    }

    /// A seeded random subset of `n` samples (original order kept), or a
    /// clone when `n >= len`.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        if n == 0 {
            return Err(Error::config("subset size must be >= 1"));
        }
        let mut idx = Rng::with_stream(seed, streams::SUBSET).permutation(self.len());
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Seeded mini-batches covering every sample once; the final batch may
    /// be short.
    pub fn batches<'a>(&'a self, batch_size: usize, rng: &mut Rng) -> Result<Batches<'a>> {
        Ok(Batches {
            dataset: self,
            order: epoch_order(self.len(), batch_size, rng)?,
            next: 0,
        })
    }
}

/// Index batches for one epoch: a fresh seeded shuffle, chunked.
pub fn epoch_order(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<Vec<usize>>,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<(Tensor, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.get(self.next)?;
        self.next += 1;
        Some(self.dataset.gather(idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(validation_fraction: f64, seed: u64) -> SplitSpec {
        SplitSpec {
            validation_fraction,
            seed,
        }
    }
}

/// `(train, validation)` index sets after a seeded shuffle. The validation
/// part holds `round(n * fraction)` samples.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let f = spec.validation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::config(format!("validation fraction must be in (0, 1), got {f}")));
    }
    let n_val = (n as f64 * f).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::config(format!(
            "validation fraction {f} of {n} samples leaves an empty split"
        )));
    }
    let perm = Rng::with_stream(spec.seed, streams::SPLIT).permutation(n);
    let (val, train) = perm.split_at(n_val);
    Ok((train.to_vec(), val.to_vec()))
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), spec)?;
    Ok((dataset.select(&train)?, dataset.select(&val)?))
}

fn read_bytes(path: &Path) -> Result<(Vec<u8>, FileChecksum)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sum = FileChecksum {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&raw)),
    };
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    Ok((bytes, sum))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Loads an IDX image file (`0x00000803`, dims `N x rows x cols`) and its
/// IDX label file (`0x00000801`, dim `N`).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (img, img_sum) = read_bytes(ip)?;
    let (lab, lab_sum) = read_bytes(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(ip, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(format_err(ip, img.len(), format!("truncated: expected {need} bytes")));
    }
    if img.len() > need {
        return Err(format_err(ip, need, "trailing bytes after the last image"));
    }

    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(lp, 0, format!("bad label magic {magic:#010x}")));
    }
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    if n_labels != n {
        return Err(format_err(lp, 4, format!("{n_labels} labels for {n} images")));
    }
    if lab.len() != 8 + n {
        return Err(format_err(lp, lab.len().min(8 + n), format!("expected {} bytes", 8 + n)));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in lab[8..].iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(format_err(lp, 8 + i, format!("label {l} out of range")));
        }
        labels.push(l as usize);
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err(ip, 4, "empty image set"));
    }
    let pixels = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::from_vec(&[n, 1, rows, cols], pixels)?,
        labels,
        Provenance {
            source: "idx".into(),
            files: vec![img_sum, lab_sum],
        },
    )
}

/// Loads and concatenates CIFAR-10 binary batches: records of one label byte
/// followed by 3072 channel-planar (R, G, B) pixels of a 32x32 image.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::config("no CIFAR-10 batch files given"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut files = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let (bytes, sum) = read_bytes(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(format_err(
                path,
                offset,
                format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(format_err(path, r * CIFAR_RECORD, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
        files.push(sum);
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], pixels)?,
        labels,
        Provenance {
            source: "cifar10".into(),
            files,
        },
    )
}

/// Writes IDX files for `dataset` (single-channel only); mostly for fixtures.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.images.shape();
    if s[1] != 1 {
        return Err(Error::shape("IDX export needs single-channel images"));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.images.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Crop offsets and flip decision for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

pub const AUGMENT_PAD: usize = 4;

/// Pads by [`AUGMENT_PAD`] zero pixels, crops back to `H x W` at offset
/// `(dy, dx)` within the padded image, then optionally mirrors horizontally.
pub fn pad_crop_flip(batch: &Tensor, plan: &[CropFlip]) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::shape(format!("augmentation needs [B, C, H, W], got {:?}", batch.shape())));
    }
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if plan.len() != b {
        return Err(Error::shape(format!("{} crop plans for {b} images", plan.len())));
    }
    let mut out = Tensor::zeros(s)?;
    let src = batch.data();
    let dst = out.data_mut();
    for (n, p) in plan.iter().enumerate() {
        if p.dy > 2 * AUGMENT_PAD || p.dx > 2 * AUGMENT_PAD {
            return Err(Error::config(format!("crop offset ({}, {}) out of range", p.dy, p.dx)));
        }
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + p.dy as isize - AUGMENT_PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let ox = if p.flip { w - 1 - x } else { x };
                    let sx = x as isize + p.dx as isize - AUGMENT_PAD as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[base + y * w + ox] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Random pad-and-crop plus horizontal flip (p = 0.5) for CIFAR-10 batches.
pub fn augment_cifar(batch: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if batch.rank() != 4 || batch.shape()[1..] != [3, 32, 32] {
        return Err(Error::shape(format!(
            "CIFAR augmentation needs [B, 3, 32, 32], got {:?}",
            batch.shape()
        )));
    }
    let plan: Vec<CropFlip> = (0..batch.shape()[0])
        .map(|_| CropFlip {
            dy: rng.below(2 * AUGMENT_PAD + 1),
            dx: rng.below(2 * AUGMENT_PAD + 1),
            flip: rng.uniform() < 0.5,
        })
        .collect();
    pad_crop_flip(batch, &plan)
}

/// First existing path among `name` and `name.gz` under `dir`.
pub fn find_file(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names
        .iter()
        .flat_map(|n| [dir.join(n), dir.join(format!("{n}.gz"))])
        .find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn idx_bytes(n: usize, rows: usize, cols: usize, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [0x803u32, n as u32, rows as u32, cols as u32] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend((0..n * rows * cols).map(fill));
        v
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&0x801u32.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = idx_bytes(2, 2, 2, |i| i as u8);
        img[3] = 0x04;
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, label_bytes(&[1, 2])).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let img = idx_bytes(2, 2, 2, |i| i as u8);
        std::fs::write(&ip, &img[..img.len() - 1]).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, img.len() - 1),
            other => panic!("{other:?}"),
        }
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, label_bytes(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 4, .. })));
        std::fs::write(&lp, label_bytes(&[1, 12])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_idx("/nonexistent/a", "/nonexistent/b").unwrap_err();
        assert_eq!(err.category(), "io");
    }

    #[test]
    fn batch_sizes() {
        let mut rng = Rng::new(0);
        let order = epoch_order(300, 128, &mut rng).unwrap();
        let sizes: Vec<usize> = order.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [128, 128, 44]);
        let mut all: Vec<usize> = order.concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert!(epoch_order(10, 0, &mut rng).is_err());
    }

    #[test]
    fn epoch_orders_differ_but_replay() {
        let mut a = Rng::new(5);
        let e1 = epoch_order(50, 8, &mut a).unwrap();
        let e2 = epoch_order(50, 8, &mut a).unwrap();
        assert_ne!(e1, e2);
        let mut b = Rng::new(5);
        assert_eq!(epoch_order(50, 8, &mut b).unwrap(), e1);
        assert_eq!(epoch_order(50, 8, &mut b).unwrap(), e2);
    }

    #[test]
    fn split_sizes() {
        let (train, val) = split_indices(50_000, &SplitSpec::new(0.2, 1)).unwrap();
        assert_eq!((train.len(), val.len()), (40_000, 10_000));
        assert!(split_indices(10, &SplitSpec::new(0.0, 1)).is_err());
        assert!(split_indices(10, &SplitSpec::new(1.0, 1)).is_err());
    }

    #[test]
    fn augmentation_identities() {
        let mut rng = Rng::new(2);
        let x = Tensor::random_normal(&mut rng, &[2, 3, 32, 32], 0.5, 0.1).unwrap();
        let center = vec![CropFlip { dy: 4, dx: 4, flip: false }; 2];
        assert_eq!(pad_crop_flip(&x, &center).unwrap(), x);
        let flip = vec![CropFlip { dy: 4, dx: 4, flip: true }; 2];
        let twice = pad_crop_flip(&pad_crop_flip(&x, &flip).unwrap(), &flip).unwrap();
        assert_eq!(twice, x);
        for _ in 0..5 {
            assert_eq!(augment_cifar(&x, &mut rng).unwrap().shape(), [2, 3, 32, 32]);
        }
        let mnist = Tensor::zeros(&[2, 1, 28, 28]).unwrap();
        assert!(matches!(augment_cifar(&mnist, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn crop_shifts_content() {
        let mut x = Tensor::zeros(&[1, 3, 32, 32]).unwrap();
        x.data_mut()[5 * 32 + 7] = 1.0;
        // offset (5, 6) means the output pixel (y, x) reads input (y + 1, x + 2)
        let y = pad_crop_flip(&x, &[CropFlip { dy: 5, dx: 6, flip: false }]).unwrap();
        assert_eq!(y.data()[4 * 32 + 5], 1.0);
        assert_eq!(y.sum(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn split_is_a_deterministic_partition(seed in any::<u64>(), n in 2usize..500, f in 0.05f64..0.95) {
            let spec = SplitSpec::new(f, seed);
            let Ok((train, val)) = split_indices(n, &spec) else { return Ok(()); };
            prop_assert_eq!(train.len() + val.len(), n);
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(split_indices(n, &spec).unwrap(), (train, val));
        }
    }
}
