//! Procedural generator of honeycomb-like XCT slices with seven defect
//! classes and production-order structure.
//!
//! A slice is a hexagonal-cell lattice rendered as bright walls on a dark
//! background, perturbed per class and drifted over production time (cell
//! pitch, contrast, background, noise, slight rotation). Everything is
//! deterministic given (class, seed, drift); the lattice and noise derive
//! from the seed alone so renders of different classes under one seed are
//! directly comparable.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;

/// Class names, in label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "no_defect",
    "core_deformation",
    "core_displacement",
    "core_split",
    "fod",
    "resin_buildup",
    "splice_gap",
];

/// Default class mix: the no-defect class dominates at roughly 39%, the six
/// defect classes share the rest.
pub const DEFAULT_CLASS_MIX: [f64; NUM_CLASSES] =
    [0.390, 0.1055, 0.1065, 0.0935, 0.105, 0.0975, 0.102];

// ── Rendering ────────────────────────────────────────────────────────

/// Rendering knobs shared by every slice.
#[derive(Clone, Copy, Debug)]
pub struct GenConfig {
    pub image_size: usize,
    /// Horizontal center-to-center cell distance in pixels.
    pub cell_pitch: f64,
    /// Additive Gaussian noise sigma.
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { image_size: 64, cell_pitch: 10.0, noise: 0.03 }
    }
}

const SQRT3: f64 = 1.732_050_807_568_877_2;
const BG_LEVEL: f64 = 0.10;
const WALL_LEVEL: f64 = 0.80;

/// Hexagon norm for pointy-top cells: unit ball has inradius 1.
fn hexnorm(x: f64, y: f64) -> f64 {
    let p1 = x.abs();
    let p2 = (0.5 * x + 0.5 * SQRT3 * y).abs();
    let p3 = (0.5 * x - 0.5 * SQRT3 * y).abs();
    p1.max(p2).max(p3)
}

/// Distance from the nearest cell boundary, in the hex norm (>= 0 inside a
/// cell, 0 on a wall centerline).
fn wall_distance(x: f64, y: f64, r: f64) -> f64 {
    // lattice: centers at i*(2r, 0) + j*(r, sqrt3 r)
    let j0 = (y / (SQRT3 * r)).floor() as i64;
    let mut best = f64::INFINITY;
    for dj in -1..=1 {
        let j = j0 + dj;
        let cy = j as f64 * SQRT3 * r;
        let i0 = ((x - j as f64 * r) / (2.0 * r)).floor() as i64;
        for di in -1..=1 {
            let i = i0 + di;
            let cx = i as f64 * 2.0 * r + j as f64 * r;
            let d = hexnorm(x - cx, y - cy);
            if d < best {
                best = d;
            }
        }
    }
    r - best
}

struct SliceGeometry {
    r: f64,
    phase: (f64, f64),
    rot: f64,
    wall_level: f64,
    bg_level: f64,
    wall_width: f64,
}

impl SliceGeometry {
    /// Lattice coordinates of an image pixel.
    fn lattice_xy(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.rot.sin_cos();
        let x = c * px - s * py + self.phase.0;
        let y = s * px + c * py + self.phase.1;
        (x, y)
    }

    fn wall_intensity(&self, x: f64, y: f64) -> f64 {
        let d = wall_distance(x, y, self.r);
        let t = d / self.wall_width;
        (-t * t).exp()
    }
}

/// Render one slice. Base lattice and noise derive from `seed` alone;
/// defect placement draws from a (seed, class) stream, so different classes
/// under the same seed share their lattice and noise exactly.
pub fn render_slice(cfg: &GenConfig, class: usize, seed: u64, drift: f64) -> Result<Tensor> {
    if class >= NUM_CLASSES {
        return Err(Error::index(format!("class {class} out of range 0..{NUM_CLASSES}")));
    }
    if drift < 0.0 {
        return Err(Error::config(format!("drift_level {drift} must be >= 0")));
    }
    let n = cfg.image_size;
    let nf = n as f64;
    let mut base_rng: ChaCha8Rng = stream(seed, "slice-base", 0);
    let mut defect_rng: ChaCha8Rng = stream(seed, "slice-defect", class as u64);

    // drift stretches the lattice, washes out contrast, brightens the
    // background, adds noise, and tilts the grid slightly
    let pitch = cfg.cell_pitch * (1.0 + 0.18 * drift);
    let geo = SliceGeometry {
        r: pitch / 2.0,
        phase: (base_rng.gen::<f64>() * pitch, base_rng.gen::<f64>() * pitch),
        rot: (base_rng.gen::<f64>() - 0.5) * 0.08 + 0.20 * drift,
        wall_level: WALL_LEVEL * (1.0 - 0.22 * drift),
        bg_level: BG_LEVEL + 0.06 * drift,
        wall_width: 0.09 * pitch,
    };
    let noise_sigma = cfg.noise * (1.0 + 0.8 * drift);

    // class-specific perturbation parameters
    let rand_pos = |rng: &mut ChaCha8Rng| -> (f64, f64) {
        (
            nf * (0.25 + 0.5 * rng.gen::<f64>()),
            nf * (0.25 + 0.5 * rng.gen::<f64>()),
        )
    };
    enum Defect {
        None,
        /// local sinusoidal wall bending around a center
        Deform { cx: f64, cy: f64, radius: f64, amp: f64, wave: f64, dir: f64 },
        /// lattice phase jump across a line
        Displace { nx: f64, ny: f64, off: f64, shift: f64 },
        /// walls erased along a segment
        Split { cx: f64, cy: f64, dx: f64, dy: f64, half_len: f64, width: f64 },
        /// bright foreign-object blob
        Fod { cx: f64, cy: f64, radius: f64, level: f64 },
        /// cell interiors filled around a point
        Resin { cx: f64, cy: f64, radius: f64, level: f64 },
        /// widened seam with bright borders
        Seam { nx: f64, ny: f64, off: f64, half_width: f64 },
    }
    let defect = match class {
        0 => Defect::None,
        1 => {
            let (cx, cy) = rand_pos(&mut defect_rng);
            Defect::Deform {
                cx,
                cy,
                radius: nf * (0.18 + 0.10 * defect_rng.gen::<f64>()),
                amp: pitch * (0.35 + 0.25 * defect_rng.gen::<f64>()),
                wave: pitch * (1.4 + 0.8 * defect_rng.gen::<f64>()),
                dir: defect_rng.gen::<f64>() * std::f64::consts::PI,
            }
        }
        2 => {
            let theta = defect_rng.gen::<f64>() * std::f64::consts::PI;
            Defect::Displace {
                nx: theta.cos(),
                ny: theta.sin(),
                off: nf * (0.35 + 0.3 * defect_rng.gen::<f64>()),
                shift: pitch * (0.35 + 0.20 * defect_rng.gen::<f64>()),
            }
        }
        3 => {
            let (cx, cy) = rand_pos(&mut defect_rng);
            let theta = defect_rng.gen::<f64>() * std::f64::consts::PI;
            Defect::Split {
                cx,
                cy,
                dx: theta.cos(),
                dy: theta.sin(),
                half_len: nf * (0.15 + 0.10 * defect_rng.gen::<f64>()),
                width: pitch * (0.30 + 0.15 * defect_rng.gen::<f64>()),
            }
        }
        4 => {
            let (cx, cy) = rand_pos(&mut defect_rng);
            Defect::Fod {
                cx,
                cy,
                radius: nf * (0.06 + 0.04 * defect_rng.gen::<f64>()),
                level: 0.99,
            }
        }
        5 => {
            let (cx, cy) = rand_pos(&mut defect_rng);
            Defect::Resin {
                cx,
                cy,
                radius: pitch * (0.9 + 0.5 * defect_rng.gen::<f64>()),
                level: 0.55 + 0.08 * defect_rng.gen::<f64>(),
            }
        }
        6 => {
            let theta = defect_rng.gen::<f64>() * std::f64::consts::PI;
            Defect::Seam {
                nx: theta.cos(),
                ny: theta.sin(),
                off: nf * (0.35 + 0.3 * defect_rng.gen::<f64>()),
                half_width: pitch * (0.55 + 0.20 * defect_rng.gen::<f64>()),
            }
        }
        _ => unreachable!(),
    };

    let mut data = vec![0.0f64; n * n];
    for py in 0..n {
        for px in 0..n {
            let (mut fx, mut fy) = (px as f64, py as f64);

            // geometric defects act on pixel coordinates before the
            // lattice lookup
            match &defect {
                Defect::Deform { cx, cy, radius, amp, wave, dir } => {
                    let dx = fx - cx;
                    let dy = fy - cy;
                    let w = (-(dx * dx + dy * dy) / (radius * radius)).exp();
                    let along = dx * dir.cos() + dy * dir.sin();
                    let bend = amp * (2.0 * std::f64::consts::PI * along / wave).sin() * w;
                    fx += bend * -dir.sin();
                    fy += bend * dir.cos();
                }
                Defect::Displace { nx, ny, off, shift } => {
                    if fx * nx + fy * ny > *off {
                        fx += shift * nx;
                        fy += shift * ny;
                    }
                }
                _ => {}
            }

            let (lx, ly) = geo.lattice_xy(fx, fy);
            let mut wall = geo.wall_intensity(lx, ly);
            let mut level = geo.bg_level;

            match &defect {
                Defect::Split { cx, cy, dx, dy, half_len, width } => {
                    let rx = fx - cx;
                    let ry = fy - cy;
                    let along = rx * dx + ry * dy;
                    let across = (rx * -dy + ry * dx).abs();
                    if along.abs() < *half_len && across < *width {
                        wall = 0.0;
                    }
                }
                Defect::Seam { nx, ny, off, half_width } => {
                    let dist = fx * nx + fy * ny - off;
                    if dist.abs() < *half_width {
                        // dark gap with bright borders
                        let edge = 1.0 - (dist.abs() - (half_width - 1.2)).abs().min(1.2) / 1.2;
                        wall = 0.0;
                        level = geo.bg_level * 0.6 + geo.wall_level * 1.05 * edge.max(0.0);
                    }
                }
                Defect::Resin { cx, cy, radius, level: fill } => {
                    let dx = fx - cx;
                    let dy = fy - cy;
                    if (dx * dx + dy * dy).sqrt() < *radius {
                        level = level.max(*fill);
                    }
                }
                _ => {}
            }

            let mut v = level + (geo.wall_level - level).max(0.0) * wall;

            if let Defect::Fod { cx, cy, radius, level: peak } = &defect {
                // flat-topped profile so the object reads as a solid body
                let dx = fx - cx;
                let dy = fy - cy;
                let t = (dx * dx + dy * dy) / (radius * radius);
                let bump = (-(t * t * t * t)).exp();
                v = v.max(v * (1.0 - bump) + peak * bump);
            }

            data[py * n + px] = v;
        }
    }

    // additive noise, then clamp into [0,1]
    for v in data.iter_mut() {
        let z: f64 = base_rng.sample(StandardNormal);
        *v = (*v + noise_sigma * z).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, n, n], data)
}

// ── Slice image file format ──────────────────────────────────────────

const IMAGE_MAGIC: &[u8; 4] = b"NLXI";
const IMAGE_VERSION: u32 = 1;

/// Write a [1,H,W] (or [H,W]) slice: magic `NLXI`, u32 version, u32 H,
/// u32 W, then H*W little-endian f32, row-major.
pub fn write_slice_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::dim(format!("slice image must be [1,H,W], got {s:?}"))),
    };
    let mut buf = Vec::with_capacity(16 + h * w * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in &image.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_slice_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[0..4] != IMAGE_MAGIC {
        return Err(Error::config(format!("{}: not a slice image", path.display())));
    }
    if bytes.len() < 16 {
        return Err(Error::config(format!("{}: truncated header", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != IMAGE_VERSION {
        return Err(Error::config(format!("{}: unsupported version {version}", path.display())));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + h * w * 4;
    if bytes.len() < need {
        return Err(Error::config(format!(
            "{}: truncated payload ({} of {need} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let off = 16 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::new(vec![1, h, w], data)
}

// ── Manifest ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Sequential production batch for the continual protocol, 1-based.
    Batch(u8),
}

impl Split {
    pub fn as_str(&self) -> String {
        match self {
            Split::Train => "train".into(),
            Split::Val => "val".into(),
            Split::Test => "test".into(),
            Split::Batch(b) => format!("batch{b}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => {
                if let Some(num) = other.strip_prefix("batch") {
                    let b: u8 = num
                        .parse()
                        .map_err(|_| Error::config(format!("bad split `{other}`")))?;
                    Ok(Split::Batch(b))
                } else {
                    Err(Error::config(format!("bad split `{other}`")))
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub order_id: u32,
    pub order_time: u64,
    pub split: Split,
    /// -1 marks an unlabeled slice.
    pub label: i32,
    pub rel_path: String,
}

/// Per-split lists of sample records, persisted as one text line per slice:
/// `order_id,order_time,split,label,relative_path`.
#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.order_id,
                e.order_time,
                e.split.as_str(),
                e.label,
                e.rel_path
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(5, ',').collect();
            if parts.len() != 5 {
                return Err(Error::config(format!(
                    "{}:{}: expected 5 fields",
                    path.display(),
                    ln + 1
                )));
            }
            let bad = |what: &str| Error::config(format!("{}:{}: bad {what}", path.display(), ln + 1));
            entries.push(ManifestEntry {
                order_id: parts[0].parse().map_err(|_| bad("order_id"))?,
                order_time: parts[1].parse().map_err(|_| bad("order_time"))?,
                split: Split::parse(parts[2])?,
                label: parts[3].parse().map_err(|_| bad("label"))?,
                rel_path: parts[4].to_string(),
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn orders_in(&self, split: Split) -> Vec<u32> {
        let mut ids: Vec<u32> = self.split_entries(split).iter().map(|e| e.order_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        let mut hist = vec![0usize; NUM_CLASSES];
        for e in self.split_entries(split) {
            if e.label >= 0 {
                hist[e.label as usize] += 1;
            }
        }
        hist
    }
}

// ── Dataset generation ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub n_orders: usize,
    pub slices_per_order: usize,
    pub class_mix: [f64; NUM_CLASSES],
    /// train/val/test fractions at order granularity, chronological.
    pub split_fractions: [f64; 3],
    /// drift_level ramps linearly across orders from .0 to .1.
    pub drift_range: (f64, f64),
    pub gen: GenConfig,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_orders: 40,
            slices_per_order: 50,
            class_mix: DEFAULT_CLASS_MIX,
            split_fractions: [0.65, 0.10, 0.25],
            drift_range: (0.0, 0.5),
            gen: GenConfig::default(),
            seed: 0,
        }
    }
}

/// Largest-remainder apportionment of `total` into `fractions`.
pub fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(fractions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(fractions.len());
    let mut assigned = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        let exact = f * total as f64;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((i, exact - floor as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total - assigned {
        counts[remainders[k].0] += 1;
    }
    counts
}

fn check_fractions(fr: &[f64], what: &str) -> Result<()> {
    if fr.iter().any(|&f| f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("{what} fractions must be >= 0 and sum to 1")));
    }
    Ok(())
}

/// Deal per-class counts across orders with even spacing, then shuffle
/// inside each order. Class c lands on order k exactly
/// floor(((k+1)*count + phase)/m) - floor((k*count + phase)/m) times, so any
/// chronological prefix of L orders holds within one slice of L*count/m per
/// class. Order sizes wobble a little, like real scans.
fn deal_labels(counts: &[usize], n_orders: usize, seed: u64) -> Vec<Vec<usize>> {
    let m = n_orders;
    let mut orders: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (class, &count) in counts.iter().enumerate() {
        let phase = class * m / counts.len();
        for (k, order) in orders.iter_mut().enumerate() {
            let hi = ((k + 1) * count + phase) / m;
            let lo = (k * count + phase) / m;
            for _ in 0..hi - lo {
                order.push(class);
            }
        }
    }
    for (k, order) in orders.iter_mut().enumerate() {
        let mut rng: ChaCha8Rng = stream(seed, "order-labels", k as u64);
        order.shuffle(&mut rng);
    }
    orders
}

fn drift_for(spec_lo: f64, spec_hi: f64, idx: usize, n: usize) -> f64 {
    if n <= 1 {
        spec_lo
    } else {
        spec_lo + (spec_hi - spec_lo) * idx as f64 / (n - 1) as f64
    }
}

/// Generate the labeled dataset under `root`: one image file per slice plus
/// `manifest.txt`. Orders carry monotone timestamps; the earliest fraction
/// becomes train, then validation, then test, so no order straddles splits.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<DatasetManifest> {
    check_fractions(&spec.class_mix, "class_mix")?;
    check_fractions(&spec.split_fractions, "split")?;
    let total = spec.n_orders * spec.slices_per_order;
    let counts = largest_remainder(&spec.class_mix, total);
    let labels = deal_labels(&counts, spec.n_orders, spec.seed);
    let split_counts = largest_remainder(&spec.split_fractions, spec.n_orders);
    let mut entries = Vec::with_capacity(total);
    let mut global = 0u64;
    for order in 0..spec.n_orders {
        let split = if order < split_counts[0] {
            Split::Train
        } else if order < split_counts[0] + split_counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let drift = drift_for(spec.drift_range.0, spec.drift_range.1, order, spec.n_orders);
        for (si, &label) in labels[order].iter().enumerate() {
            let slice_seed = derive_seed(spec.seed, "slice", global);
            let image = render_slice(&spec.gen, label, slice_seed, drift)?;
            let rel = format!("images/order_{order:04}/slice_{si:04}.nlxi");
            write_slice_image(&root.join(&rel), &image)?;
            entries.push(ManifestEntry {
                order_id: order as u32,
                order_time: order as u64,
                split,
                label: label as i32,
                rel_path: rel,
            });
            global += 1;
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.save(&root.join("manifest.txt"))?;
    Ok(manifest)
}

/// Generate the unlabeled pretraining pool: same generator, labels
/// discarded, wider drift range. All entries are split `train`.
pub fn generate_unlabeled_pool(
    spec: &DatasetSpec,
    root: &Path,
) -> Result<DatasetManifest> {
    check_fractions(&spec.class_mix, "class_mix")?;
    let total = spec.n_orders * spec.slices_per_order;
    let counts = largest_remainder(&spec.class_mix, total);
    let labels = deal_labels(&counts, spec.n_orders, spec.seed);
    let mut entries = Vec::with_capacity(total);
    let mut global = 0u64;
    for order in 0..spec.n_orders {
        let drift = drift_for(spec.drift_range.0, spec.drift_range.1, order, spec.n_orders);
        for (si, &label) in labels[order].iter().enumerate() {
            let slice_seed = derive_seed(spec.seed, "unlabeled-slice", global);
            let image = render_slice(&spec.gen, label, slice_seed, drift)?;
            let rel = format!("unlabeled/order_{order:04}/slice_{si:04}.nlxi");
            write_slice_image(&root.join(&rel), &image)?;
            entries.push(ManifestEntry {
                order_id: order as u32,
                order_time: order as u64,
                split: Split::Train,
                label: -1,
                rel_path: rel,
            });
            global += 1;
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.save(&root.join("unlabeled_manifest.txt"))?;
    Ok(manifest)
}

/// Generate the sequential production batches for the continual protocol:
/// equal-sized batches at increasing drift levels.
pub fn generate_continual_batches(
    spec: &DatasetSpec,
    n_batches: usize,
    orders_per_batch: usize,
    drift_levels: &[f64],
    root: &Path,
) -> Result<DatasetManifest> {
    check_fractions(&spec.class_mix, "class_mix")?;
    if drift_levels.len() != n_batches {
        return Err(Error::config(format!(
            "{} drift levels for {n_batches} batches",
            drift_levels.len()
        )));
    }
    let per_batch = orders_per_batch * spec.slices_per_order;
    let mut entries = Vec::new();
    let mut global = 0u64;
    for batch in 0..n_batches {
        let counts = largest_remainder(&spec.class_mix, per_batch);
        let labels = deal_labels(
            &counts,
            orders_per_batch,
            derive_seed(spec.seed, "continual-batch", batch as u64),
        );
        for order in 0..orders_per_batch {
            let order_id = (1000 + batch * orders_per_batch + order) as u32;
            for (si, &label) in labels[order].iter().enumerate() {
                let slice_seed = derive_seed(spec.seed, "continual-slice", global);
                let image = render_slice(&spec.gen, label, slice_seed, drift_levels[batch])?;
                let rel = format!("continual/batch{}/order_{order_id}/slice_{si:04}.nlxi", batch + 1);
                write_slice_image(&root.join(&rel), &image)?;
                entries.push(ManifestEntry {
                    order_id,
                    order_time: order_id as u64,
                    split: Split::Batch((batch + 1) as u8),
                    label: label as i32,
                    rel_path: rel,
                });
                global += 1;
            }
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.save(&root.join("continual_manifest.txt"))?;
    Ok(manifest)
}

// ── Stratified label-efficiency subsets ──────────────────────────────

/// Keep the earliest fraction `p` of training orders per stratum (stratum =
/// the order's majority label), preserving class balance and chronology.
/// Validation and test entries pass through unchanged. p = 1 is the
/// identity.
pub fn stratified_fraction(manifest: &DatasetManifest, p: f64) -> Result<DatasetManifest> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("fraction {p} outside (0,1]")));
    }
    let train_orders = manifest.orders_in(Split::Train);
    // stratum: majority label per order, lowest label wins ties
    let mut strata: Vec<(u32, usize)> = Vec::new();
    for &oid in &train_orders {
        let mut hist = vec![0usize; NUM_CLASSES];
        for e in manifest.split_entries(Split::Train) {
            if e.order_id == oid && e.label >= 0 {
                hist[e.label as usize] += 1;
            }
        }
        let maj = hist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap_or(0);
        strata.push((oid, maj));
    }
    let mut keep: Vec<u32> = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut members: Vec<u32> = strata
            .iter()
            .filter(|(_, m)| *m == class)
            .map(|(oid, _)| *oid)
            .collect();
        members.sort_unstable(); // chronological: ids are time-ordered
        let take = ((p * members.len() as f64).round() as usize).min(members.len());
        keep.extend(members.into_iter().take(take));
    }
    keep.sort_unstable();
    let entries: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Train || keep.binary_search(&e.order_id).is_ok())
        .cloned()
        .collect();
    Ok(DatasetManifest { entries })
}
