//! Manifest-gated data access, augmentation, and normalization.
//!
//! Readers are views over one or more splits of a manifest; every logical
//! read is logged per split, which lets tests assert that training never
//! touches the test split.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::{read_slice_image, DatasetManifest, ManifestEntry, Split};
use crate::tensor::Tensor;

/// Slice source rooted at a dataset directory. Images are cached after the
/// first disk read; the access log counts logical reads per split either
/// way.
pub struct DataSource {
    root: PathBuf,
    pub manifest: DatasetManifest,
    cache: RefCell<BTreeMap<usize, Vec<f32>>>,
    log: RefCell<BTreeMap<String, usize>>,
    image_size: RefCell<Option<usize>>,
}

impl DataSource {
    pub fn new(root: PathBuf, manifest: DatasetManifest) -> Self {
        DataSource {
            root,
            manifest,
            cache: RefCell::new(BTreeMap::new()),
            log: RefCell::new(BTreeMap::new()),
            image_size: RefCell::new(None),
        }
    }

    /// Indices of entries belonging to `split`, manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn entry(&self, idx: usize) -> &ManifestEntry {
        &self.manifest.entries[idx]
    }

    /// Read one slice (logged).
    pub fn read(&self, idx: usize) -> Result<Tensor> {
        let entry = &self.manifest.entries[idx];
        *self
            .log
            .borrow_mut()
            .entry(entry.split.as_str())
            .or_insert(0) += 1;
        if let Some(cached) = self.cache.borrow().get(&idx) {
            let size = self.image_size.borrow().expect("size known after first read");
            let data: Vec<f64> = cached.iter().map(|&v| v as f64).collect();
            return Tensor::new(vec![1, size, size], data);
        }
        let img = read_slice_image(&self.root.join(&entry.rel_path))?;
        let size = img.shape[1];
        if img.shape[1] != img.shape[2] {
            return Err(Error::config(format!(
                "{}: non-square slice {:?}",
                entry.rel_path, img.shape
            )));
        }
        let mut known = self.image_size.borrow_mut();
        match *known {
            None => *known = Some(size),
            Some(s) if s != size => {
                return Err(Error::config(format!(
                    "{}: size {size} differs from dataset size {s}",
                    entry.rel_path
                )))
            }
            _ => {}
        }
        self.cache
            .borrow_mut()
            .insert(idx, img.data.iter().map(|&v| v as f32).collect());
        Ok(img)
    }

    /// Logical reads per split so far.
    pub fn access_counts(&self) -> BTreeMap<String, usize> {
        self.log.borrow().clone()
    }

    pub fn reads_of(&self, split: Split) -> usize {
        self.log.borrow().get(&split.as_str()).copied().unwrap_or(0)
    }
}

// ── Normalization ────────────────────────────────────────────────────

/// Mean and standard deviation over the pixels of the listed entries;
/// the training-split statistics that every stage normalizes with.
pub fn intensity_stats(source: &DataSource, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::contract("intensity_stats over an empty set"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for &idx in indices {
        let img = source.read(idx)?;
        for &v in &img.data {
            sum += v;
            sum_sq += v * v;
        }
        count += img.data.len();
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(1e-12);
    Ok((mean, var.sqrt()))
}

pub fn normalize(image: &Tensor, mean: f64, std: f64) -> Tensor {
    let data: Vec<f64> = image.data.iter().map(|v| (v - mean) / std).collect();
    Tensor::new(image.shape.clone(), data).expect("same shape")
}

// ── Augmentation ─────────────────────────────────────────────────────

/// Bilinear resample of a [1,h,w] image to (oh, ow).
pub fn resize_bilinear(src: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = match src.shape.as_slice() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("resize expects [1,H,W], got {s:?}"))),
    };
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let v00 = src.data[y0 * w + x0];
            let v01 = src.data[y0 * w + x1];
            let v10 = src.data[y1 * w + x0];
            let v11 = src.data[y1 * w + x1];
            out[oy * ow + ox] =
                v00 * (1.0 - wy) * (1.0 - wx) + v01 * (1.0 - wy) * wx + v10 * wy * (1.0 - wx) + v11 * wy * wx;
        }
    }
    Tensor::new(vec![1, oh, ow], out)
}

/// Deterministic eval view: resize to `target` then center crop (identity
/// when sizes already match).
pub fn eval_view(image: &Tensor, target: usize) -> Result<Tensor> {
    let (h, w) = (image.shape[1], image.shape[2]);
    if h == target && w == target {
        return Ok(image.clone());
    }
    // resize the short side to target, then center crop
    let scale = target as f64 / h.min(w) as f64;
    let rh = ((h as f64 * scale).round() as usize).max(target);
    let rw = ((w as f64 * scale).round() as usize).max(target);
    let resized = resize_bilinear(image, rh, rw)?;
    let y0 = (rh - target) / 2;
    let x0 = (rw - target) / 2;
    let mut out = vec![0.0; target * target];
    for y in 0..target {
        for x in 0..target {
            out[y * target + x] = resized.data[(y0 + y) * rw + (x0 + x)];
        }
    }
    Tensor::new(vec![1, target, target], out)
}

/// Training view: random horizontal flip plus random resized crop back to
/// `target`.
pub fn train_view(image: &Tensor, target: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = (image.shape[1], image.shape[2]);
    // crop scale in [0.7, 1.0] of the short side
    let side = ((0.7 + 0.3 * rng.gen::<f64>()) * h.min(w) as f64).round() as usize;
    let side = side.clamp(8, h.min(w));
    let y0 = if h > side { rng.gen_range(0..=h - side) } else { 0 };
    let x0 = if w > side { rng.gen_range(0..=w - side) } else { 0 };
    let flip = rng.gen::<f64>() < 0.5;
    let mut crop = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let sx = if flip { x0 + side - 1 - x } else { x0 + x };
            crop[y * side + x] = image.data[(y0 + y) * w + sx];
        }
    }
    let crop = Tensor::new(vec![1, side, side], crop)?;
    if side == target {
        Ok(crop)
    } else {
        resize_bilinear(&crop, target, target)
    }
}

/// Stack [1,H,W] slices into one [B,1,H,W] batch tensor.
pub fn stack_batch(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let shape = images[0].shape.clone();
    let mut data = Vec::with_capacity(images[0].numel() * images.len());
    for img in images {
        if img.shape != shape {
            return Err(Error::dim("mixed shapes in one batch".to_string()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), 1, shape[1], shape[2]], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::synth::{generate_dataset, DatasetSpec, GenConfig};

    fn small_source() -> (tempfile::TempDir, DataSource) {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_orders: 8,
            slices_per_order: 4,
            gen: GenConfig { image_size: 16, cell_pitch: 6.0, noise: 0.02 },
            seed: 1,
            ..Default::default()
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        let source = DataSource::new(dir.path().to_path_buf(), manifest);
        (dir, source)
    }

    #[test]
    fn access_log_counts_reads_per_split() {
        let (_dir, source) = small_source();
        let train = source.split_indices(Split::Train);
        for &i in train.iter().take(5) {
            source.read(i).unwrap();
        }
        // cached reads still count as logical accesses
        source.read(train[0]).unwrap();
        assert_eq!(source.reads_of(Split::Train), 6);
        assert_eq!(source.reads_of(Split::Test), 0);
    }

    #[test]
    fn eval_view_is_identity_at_matching_size() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let v = eval_view(&img, 4).unwrap();
        assert_eq!(v.data, img.data);
        let up = eval_view(&img, 8).unwrap();
        assert_eq!(up.shape, vec![1, 8, 8]);
    }

    #[test]
    fn train_view_is_deterministic_per_stream() {
        let img = Tensor::new(vec![1, 16, 16], (0..256).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let a = train_view(&img, 16, &mut stream(3, "aug", 5)).unwrap();
        let b = train_view(&img, 16, &mut stream(3, "aug", 5)).unwrap();
        assert_eq!(a.data, b.data);
        let c = train_view(&img, 16, &mut stream(3, "aug", 6)).unwrap();
        assert_eq!(c.shape, vec![1, 16, 16]);
    }

    #[test]
    fn normalization_zero_mean_unit_variance() {
        let (_dir, source) = small_source();
        let train = source.split_indices(Split::Train);
        let (mean, std) = intensity_stats(&source, &train).unwrap();
        // re-normalized statistics over the same set are (0, 1)
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for &i in &train {
            let img = normalize(&source.read(i).unwrap(), mean, std);
            for v in &img.data {
                sum += v;
                sum_sq += v * v;
            }
            count += img.data.len();
        }
        let m = sum / count as f64;
        let v = sum_sq / count as f64 - m * m;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stack_batch_shape() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let batch = stack_batch(&[a, b]).unwrap();
        assert_eq!(batch.shape, vec![2, 1, 2, 2]);
        assert_eq!(batch.data, (1..=8).map(|i| i as f64).collect::<Vec<_>>());
    }
}
