//! Dataset ingestion and batch streaming.
//!
//! Reads the standard CIFAR-10 binary distribution (`data_batch_{1..5}.bin`,
//! `test_batch.bin`; 10,000 records of 1 label byte + 3,072 pixel bytes each)
//! and converts pixels to `f32` in `[0, 1]`. Scaling back to the 0..255 range
//! happens only inside the PSNR metric.
//!
//! The [`synth`] submodule can generate a corpus in the same binary layout
//! for machines without the real dataset.

use crate::error::{Error, Result};
use crate::keys;
use ndarray::{Array4, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use tapegrad::Scalar;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const PIXELS_PER_IMAGE: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
const RECORD_BYTES: usize = 1 + PIXELS_PER_IMAGE;
const IMAGES_PER_FILE: usize = 10_000;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(&self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// A dataset split held in memory as `(N, 3, 32, 32)` reals in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub images: Array4<f32>,
    pub split: Split,
}

impl ImageSet {
    pub fn count(&self) -> usize {
        self.images.shape()[0]
    }
}

/// A batch of images in `[0, 1]`, shape `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct ImageBatch<F: Scalar = f32> {
    pub data: Array4<F>,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn new(data: Array4<F>) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(Error::Argument("image batch must be non-empty".into()));
        }
        let (lo, hi) = (F::zero(), F::one());
        if data.iter().any(|&v| v < lo || v > hi || !v.is_finite()) {
            return Err(Error::Argument("image batch values must lie in [0, 1]".into()));
        }
        Ok(ImageBatch { data })
    }

    /// Wraps values that are already known to be in range (decoder outputs
    /// are sigmoid-bounded).
    pub fn from_bounded(data: Array4<F>) -> Self {
        debug_assert!(data.iter().all(|v| *v >= F::zero() && *v <= F::one()));
        ImageBatch { data }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels_per_image(&self) -> usize {
        self.data.len() / self.len()
    }

    pub fn view(&self) -> ArrayView4<'_, F> {
        self.data.view()
    }

    pub fn cast<G: Scalar>(&self) -> ImageBatch<G> {
        ImageBatch { data: self.data.mapv(|v| G::of(v.f64())) }
    }
}

fn first_n_lossy(buf: &[u8]) -> String {
    String::from_utf8_lossy(&buf[..buf.len().min(32)]).into_owned()
}

/// Loads one split from the CIFAR-10 binary layout under `root`.
pub fn load_dataset(root: &Path, split: Split) -> Result<ImageSet> {
    let files = split.files();
    let mut images = Vec::with_capacity(files.len() * IMAGES_PER_FILE * PIXELS_PER_IMAGE);
    for name in &files {
        let path = root.join(name);
        let mut raw = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::Ingestion { path: path.clone(), msg: e.to_string() })?;
        if raw.len() != RECORD_BYTES * IMAGES_PER_FILE {
            return Err(Error::Ingestion {
                path,
                msg: format!(
                    "expected {} bytes ({} records of {}), found {} (starts with {:?})",
                    RECORD_BYTES * IMAGES_PER_FILE,
                    IMAGES_PER_FILE,
                    RECORD_BYTES,
                    raw.len(),
                    first_n_lossy(&raw),
                ),
            });
        }
        for record in raw.chunks_exact(RECORD_BYTES) {
            images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let count = images.len() / PIXELS_PER_IMAGE;
    let images = Array4::from_shape_vec((count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE), images)
        .expect("record layout");
    Ok(ImageSet { images, split })
}

/// One minibatch plus the dataset indices of its rows. The indices key the
/// per-image channel noise streams.
pub struct Minibatch {
    pub images: ImageBatch<f32>,
    pub indices: Vec<u64>,
}

/// Deterministic epoch stream: every image exactly once, final partial batch
/// included. Order depends only on `(seed, shuffle)`.
pub struct BatchStream<'a> {
    set: &'a ImageSet,
    order: Vec<u32>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Minibatch;

    fn next(&mut self) -> Option<Minibatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let mut data = Array4::zeros((idx.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
        for (row, &i) in idx.iter().enumerate() {
            data.index_axis_mut(Axis(0), row).assign(&self.set.images.index_axis(Axis(0), i as usize));
        }
        Some(Minibatch { images: ImageBatch::from_bounded(data), indices: idx.iter().map(|&i| i as u64).collect() })
    }
}

/// Streams one epoch of batches.
pub fn batches(set: &ImageSet, batch_size: usize, shuffle: bool, seed: u64) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<u32> = (0..set.count() as u32).collect();
    if shuffle {
        let mut rng = keys::rng_for(seed, "shuffle", &[]);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    Ok(BatchStream { set, order, batch_size, cursor: 0 })
}

/// Number of batches per epoch (final partial batch counted).
pub fn batch_count(n_images: usize, batch_size: usize) -> usize {
    n_images.div_ceil(batch_size)
}

/// Seeded sample of `count` images without replacement. Selected indices are
/// re-sorted ascending, so `count == set.count()` returns the identical set.
pub fn subset(set: &ImageSet, count: usize, seed: u64) -> Result<ImageSet> {
    if count == 0 || count > set.count() {
        return Err(Error::Argument(format!(
            "subset count {count} out of range 1..={}",
            set.count()
        )));
    }
    let mut order: Vec<u32> = (0..set.count() as u32).collect();
    let mut rng = keys::rng_for(seed, "subset", &[]);
    for i in 0..count {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    let mut data = Array4::zeros((count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
    for (row, &i) in chosen.iter().enumerate() {
        data.index_axis_mut(Axis(0), row).assign(&set.images.index_axis(Axis(0), i as usize));
    }
    Ok(ImageSet { images: data, split: set.split })
}

/// Mean image of a set (the reconstruction floor for failed baseline
/// transmissions).
pub fn mean_image(set: &ImageSet) -> Array4<f32> {
    let mut mean = set.images.mean_axis(Axis(0)).expect("non-empty set");
    mean.mapv_inplace(|v| v.clamp(0.0, 1.0));
    mean.insert_axis(Axis(0))
}

pub mod synth {
    //! Deterministic procedural corpus in the CIFAR-10 binary layout:
    //! smooth two-color gradients with a few anti-aliased shapes and a faint
    //! sinusoidal texture. Structured enough to be learnable at the CBRs the
    //! codecs target.

    use super::*;
    use std::io::Write;

    fn gen_image(rng: &mut impl Rng) -> [u8; PIXELS_PER_IMAGE] {
        let side = IMAGE_SIDE as f32;
        let mut px = [[0f32; PIXELS_PER_IMAGE / IMAGE_CHANNELS]; IMAGE_CHANNELS];

        // gradient background between two random colors
        let c0: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let c1: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let (gx, gy): (f32, f32) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let norm = (gx * gx + gy * gy).sqrt().max(1e-3);
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let t = 0.5 + 0.5 * (gx * (x as f32 / side - 0.5) + gy * (y as f32 / side - 0.5)) / norm;
                for c in 0..IMAGE_CHANNELS {
                    px[c][y * IMAGE_SIDE + x] = c0[c] * (1.0 - t) + c1[c] * t;
                }
            }
        }

        // a few soft-edged shapes
        let n_shapes = rng.random_range(1..=3);
        for _ in 0..n_shapes {
            let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let kind = rng.random_range(0..3u8);
            let (cx, cy): (f32, f32) = (rng.random_range(4.0..28.0), rng.random_range(4.0..28.0));
            let r: f32 = rng.random_range(3.0..10.0);
            let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let dx = x as f32 - cx;
                    let dy = y as f32 - cy;
                    // signed distance to the shape boundary
                    let d = match kind {
                        0 => (dx * dx + dy * dy).sqrt() - r, // disc
                        1 => dx.abs().max(dy.abs()) - r,     // square
                        _ => (dx * ca + dy * sa).abs() - r * 0.35, // stripe
                    };
                    let alpha = (0.5 - d).clamp(0.0, 1.0); // ~1px anti-aliased edge
                    if alpha > 0.0 {
                        for c in 0..IMAGE_CHANNELS {
                            let p = &mut px[c][y * IMAGE_SIDE + x];
                            *p = *p * (1.0 - alpha) + color[c] * alpha;
                        }
                    }
                }
            }
        }

        // faint smooth texture
        let (fx, fy): (f32, f32) = (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9));
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let v = 0.03 * (fx * x as f32 + fy * y as f32 + phase).sin();
                for c in 0..IMAGE_CHANNELS {
                    px[c][y * IMAGE_SIDE + x] += v;
                }
            }
        }

        let mut out = [0u8; PIXELS_PER_IMAGE];
        for c in 0..IMAGE_CHANNELS {
            for i in 0..IMAGE_SIDE * IMAGE_SIDE {
                out[c * IMAGE_SIDE * IMAGE_SIDE + i] = (px[c][i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    /// Writes `n_files` binary files of 10,000 records each.
    fn write_split(root: &Path, names: &[String], split_tag: u64, seed: u64) -> Result<()> {
        for (file_idx, name) in names.iter().enumerate() {
            let path = root.join(name);
            let mut buf = Vec::with_capacity(RECORD_BYTES * IMAGES_PER_FILE);
            for i in 0..IMAGES_PER_FILE {
                let global = file_idx * IMAGES_PER_FILE + i;
                let mut rng = keys::rng_for(seed, "synth-image", &[split_tag, global as u64]);
                let label = rng.random_range(0..10u8);
                buf.push(label);
                buf.extend_from_slice(&gen_image(&mut rng));
            }
            let mut f = fs::File::create(&path)?;
            f.write_all(&buf)?;
        }
        Ok(())
    }

    /// Generates the full corpus (50,000 train + 10,000 test) under `root`.
    pub fn generate_corpus(root: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(root)?;
        write_split(root, &Split::Train.files(), 0, seed)?;
        write_split(root, &Split::Test.files(), 1, seed)?;
        Ok(())
    }
}

/// Resolves the dataset root: loads it if present, generates a synthetic
/// corpus if `allow_synth`, otherwise reports what is missing.
pub fn ensure_dataset(root: &Path, download: bool) -> Result<PathBuf> {
    let probe = root.join("data_batch_1.bin");
    if probe.exists() {
        return Ok(root.to_path_buf());
    }
    if download {
        return Err(Error::Config(format!(
            "dataset not found under {} and network download is not available in this build; \
             fetch the CIFAR-10 binary archive manually or run `semhop gen-data` for a synthetic corpus",
            root.display()
        )));
    }
    Err(Error::Config(format!(
        "dataset not found under {} (set data.download=true only with a pre-fetched archive, \
         or generate a synthetic corpus with `semhop gen-data`)",
        root.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use tempfile::TempDir;

    #[test]
    fn loads_full_size_binary_file() {
        let dir = TempDir::new().unwrap();
        let mut buf = Vec::with_capacity(RECORD_BYTES * IMAGES_PER_FILE);
        for i in 0..IMAGES_PER_FILE {
            buf.push((i % 10) as u8); // label
            buf.extend(std::iter::repeat_n((i % 256) as u8, PIXELS_PER_IMAGE));
        }
        std::fs::write(dir.path().join("test_batch.bin"), &buf).unwrap();
        let set = load_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(set.count(), 10_000);
        assert_eq!(set.images[[0, 0, 0, 0]], 0.0);
        assert_eq!(set.images[[255, 0, 0, 0]], 1.0);
        assert!((set.images[[100, 2, 31, 31]] - 100.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn byte_scaling_round_trips_all_values() {
        for b in 0u16..=255 {
            let v = b as f32 / 255.0;
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() as u16, b);
        }
    }

    #[test]
    fn missing_archive_is_a_named_ingestion_error() {
        let dir = TempDir::new().unwrap();
        let err = load_dataset(dir.path(), Split::Test).unwrap_err();
        match err {
            Error::Ingestion { path, .. } => assert!(path.ends_with("test_batch.bin")),
            other => panic!("expected ingestion error, got {other}"),
        }
    }

    #[test]
    fn corrupt_archive_is_rejected() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), b"not a cifar file").unwrap();
        let err = load_dataset(dir.path(), Split::Test).unwrap_err();
        match err {
            Error::Ingestion { path, msg } => {
                assert!(path.ends_with("test_batch.bin"));
                assert!(msg.contains("expected"));
            }
            other => panic!("expected ingestion error, got {other}"),
        }
    }

    fn fake_set(n: usize) -> ImageSet {
        let mut images = Array4::zeros((n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
        for i in 0..n {
            images.index_axis_mut(Axis(0), i).fill(i as f32 / n as f32);
        }
        ImageSet { images, split: Split::Train }
    }

    #[test]
    fn epoch_covers_every_image_once_with_partial_tail() {
        let set = fake_set(150);
        let stream = batches(&set, 64, true, 9).unwrap();
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        for mb in stream {
            sizes.push(mb.images.len());
            seen.extend(mb.indices);
        }
        assert_eq!(sizes, vec![64, 64, 22]);
        let unique: HashSet<u64> = seen.iter().copied().collect();
        assert_eq!(unique.len(), 150);
        assert_eq!(seen.len(), 150);
        assert_eq!(batch_count(10_000, 64), 157);
    }

    #[test]
    fn unshuffled_batches_follow_storage_order() {
        let set = fake_set(10);
        let stream = batches(&set, 4, false, 0).unwrap();
        let indices: Vec<u64> = stream.flat_map(|mb| mb.indices).collect();
        assert_eq!(indices, (0..10).collect::<Vec<u64>>());
    }

    #[test]
    fn same_seed_same_batch_sequence() {
        let set = fake_set(33);
        let a: Vec<Vec<u64>> = batches(&set, 8, true, 42).unwrap().map(|m| m.indices).collect();
        let b: Vec<Vec<u64>> = batches(&set, 8, true, 42).unwrap().map(|m| m.indices).collect();
        let c: Vec<Vec<u64>> = batches(&set, 8, true, 43).unwrap().map(|m| m.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn subset_bounds_and_determinism() {
        let set = fake_set(40);
        assert!(subset(&set, 0, 1).is_err());
        assert!(subset(&set, 41, 1).is_err());

        let full = subset(&set, 40, 1).unwrap();
        assert_eq!(full.images, set.images);

        let one = subset(&set, 1, 1).unwrap();
        assert_eq!(one.count(), 1);

        let a = subset(&set, 10, 5).unwrap();
        let b = subset(&set, 10, 5).unwrap();
        assert_eq!(a.images, b.images);

        // distinctness: all rows differ in our fake set
        let mut vals: Vec<f32> = a.images.axis_iter(Axis(0)).map(|img| img[[0, 0, 0]]).collect();
        vals.sort_by(f32::total_cmp);
        vals.dedup();
        assert_eq!(vals.len(), 10);
    }
}
