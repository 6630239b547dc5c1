//! Synthetic stand-in corpus: textured backgrounds with task-specific
//! foreground shapes and exact rasterized masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::{quantize, write_mask, write_patch};
use super::manifest::{Manifest, ManifestRow};
use super::split::assign_splits;
use crate::datamodel::{Mask, Patch, Registries, Sample, Source, Split, MICROVASCULAR_LABEL};
use crate::error::{Error, Result};
use crate::training::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count_per_task: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    pub seed: u64,
    /// Train:val:test.
    pub split_ratio: [usize; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count_per_task: 10,
            image_size: 512,
            noise: 0.03,
            seed: 0,
            split_ratio: [3, 1, 1],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_task == 0 {
            return Err(Error::invalid("count_per_task must be positive"));
        }
        if self.image_size < 32 {
            return Err(Error::invalid(format!("image_size {} is below 32", self.image_size)));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 0.5]"));
        }
        if self.split_ratio.iter().sum::<usize>() == 0 {
            return Err(Error::invalid("split_ratio must not be all zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Ring { cx: f64, cy: f64, inner: f64, outer: f64 },
    /// Polyline swept by a disk of `radius`.
    Stroke { points: Vec<(f64, f64)>, radius: f64 },
}

impl Shape {
    /// Point test in pixel coordinates; pixel (y, x) is sampled at its
    /// center (x + 0.5, y + 0.5).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Ring { cx, cy, inner, outer } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
            Shape::Stroke { ref points, radius } => points.windows(2).any(|seg| {
                let ((ax, ay), (bx, by)) = (seg[0], seg[1]);
                let (vx, vy) = (bx - ax, by - ay);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (x - ax - t * vx).powi(2) + (y - ay - t * vy).powi(2) <= radius * radius
            }),
        }
    }
}

pub fn rasterize(shapes: &[Shape], height: usize, width: usize) -> Mask {
    let mut mask = Mask::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if shapes.iter().any(|s| s.contains(px, py)) {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Blob,
    Capsule,
    Tubules,
    HollowTubules,
    Vessel,
    Curvilinear,
    Disk,
}

fn family(name: &str, label: &str) -> Family {
    match name {
        "TUFT" => Family::Blob,
        "CAP" => Family::Capsule,
        "PT" => Family::Tubules,
        "DT" => Family::HollowTubules,
        "ART" => Family::Vessel,
        _ if label == MICROVASCULAR_LABEL => Family::Curvilinear,
        _ => Family::Disk,
    }
}

fn foreground_color(f: Family) -> [f32; 3] {
    match f {
        Family::Blob => [0.55, 0.22, 0.48],
        Family::Capsule => [0.62, 0.30, 0.55],
        Family::Tubules => [0.78, 0.38, 0.52],
        Family::HollowTubules => [0.70, 0.30, 0.62],
        Family::Vessel => [0.50, 0.18, 0.30],
        Family::Curvilinear => [0.45, 0.20, 0.40],
        Family::Disk => [0.40, 0.25, 0.55],
    }
}

fn shapes_for(f: Family, size: f64, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let center = |rng: &mut ChaCha8Rng, extent: f64| {
        let lo = extent.min(size / 2.0);
        (rng.gen_range(lo..=size - lo), rng.gen_range(lo..=size - lo))
    };
    match f {
        Family::Blob => {
            let (rx, ry) = (rng.gen_range(0.12..0.22) * size, rng.gen_range(0.10..0.18) * size);
            let (cx, cy) = center(rng, rx.max(ry) + 2.0);
            vec![Shape::Ellipse { cx, cy, rx, ry, angle: rng.gen_range(0.0..std::f64::consts::PI) }]
        }
        Family::Capsule | Family::Vessel => {
            let (lo, hi, frac) = if f == Family::Capsule {
                (0.18, 0.26, 0.75..0.85)
            } else {
                (0.12, 0.18, 0.40..0.55)
            };
            let outer = rng.gen_range(lo..hi) * size;
            let (cx, cy) = center(rng, outer + 2.0);
            vec![Shape::Ring { cx, cy, inner: outer * rng.gen_range(frac), outer }]
        }
        Family::Tubules | Family::HollowTubules => (0..rng.gen_range(3..=5))
            .map(|_| {
                let outer = rng.gen_range(0.06..0.10) * size;
                let (cx, cy) = center(rng, outer + 1.0);
                if f == Family::Tubules {
                    let ry = outer * rng.gen_range(0.6..1.0);
                    Shape::Ellipse { cx, cy, rx: outer, ry, angle: rng.gen_range(0.0..std::f64::consts::PI) }
                } else {
                    Shape::Ring { cx, cy, inner: outer * rng.gen_range(0.5..0.65), outer }
                }
            })
            .collect(),
        Family::Curvilinear => (0..rng.gen_range(2..=3))
            .map(|_| {
                let step = 0.12 * size;
                let (mut x, mut y) = center(rng, 0.15 * size);
                let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut points = vec![(x, y)];
                for _ in 0..rng.gen_range(4..=6) {
                    heading += rng.gen_range(-0.6..0.6);
                    x = (x + step * heading.cos()).clamp(2.0, size - 2.0);
                    y = (y + step * heading.sin()).clamp(2.0, size - 2.0);
                    points.push((x, y));
                }
                Shape::Stroke { points, radius: (0.02 * size).max(1.5) }
            })
            .collect(),
        Family::Disk => {
            let r = rng.gen_range(0.10..0.20) * size;
            let (cx, cy) = center(rng, r + 1.0);
            vec![Shape::Disk { cx, cy, r }]
        }
    }
}

fn render(mask: &Mask, fg: [f32; 3], noise: f32, rng: &mut ChaCha8Rng) -> Patch {
    let (h, w) = (mask.height(), mask.width());
    let base = [0.90, 0.78, 0.85].map(|v: f32| v + rng.gen_range(-0.03..0.03));
    let fg = fg.map(|v| v + rng.gen_range(-0.04..0.04));
    let (fx, fy, phase) = (
        rng.gen_range(1.0..3.0) * std::f32::consts::TAU / w as f32,
        rng.gen_range(1.0..3.0) * std::f32::consts::TAU / h as f32,
        rng.gen_range(0.0..std::f32::consts::TAU),
    );
    let normal = Normal::new(0.0, noise.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let texture = 0.04 * ((fx * x as f32 + phase).sin() * (fy * y as f32).cos());
            let color = if mask.get(y, x) == 1 { fg } else { base };
            for c in color {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                data.push(f32::from(quantize(c + texture + n)) / 255.0);
            }
        }
    }
    Patch::new(h, w, data).expect("rendered patch is valid")
}

/// Textured background with no foreground structure, drawn like the
/// backgrounds of [`generate`].
pub fn background_patch(size: usize, noise: f32, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 200, 0));
    render(&Mask::zeros(size, size), [0.0; 3], noise, &mut rng)
}

/// One generated sample with its manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticItem {
    pub row: ManifestRow,
    pub sample: Sample,
}

/// Builds the corpus in memory. Pixel values are already quantized to
/// 8 bits, so they equal what a write and re-read would produce.
pub fn generate(spec: &SyntheticSpec, registries: &Registries) -> Result<Vec<SyntheticItem>> {
    spec.validate()?;
    let mut out = Vec::new();
    let scales = registries.scales.entries();
    for entry in registries.classes.entries() {
        let f = family(&entry.name, &entry.semantic_label);
        let scale = &scales[entry.id % scales.len()];
        let splits = assign_splits(spec.count_per_task, spec.split_ratio, mix_seed(spec.seed, 100, entry.id as u64))?;
        for (i, &split) in splits.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, entry.id as u64, i as u64));
            let size = spec.image_size;
            let shapes = shapes_for(f, size as f64, &mut rng);
            let mask = rasterize(&shapes, size, size);
            let image = render(&mask, foreground_color(f), spec.noise, &mut rng);
            let dir = format!("{}/{}/{}", Source::Synthetic, entry.name, split);
            let row = ManifestRow {
                image_path: format!("{dir}/{i:04}_image.png"),
                mask_path: format!("{dir}/{i:04}_mask.png"),
                task: entry.name.clone(),
                magnification: scale.magnification,
                split,
                source: Source::Synthetic,
                group_id: String::new(),
            };
            let sample = Sample::new(image, mask, entry.id, scale.id, Source::Synthetic, split)?;
            out.push(SyntheticItem { row, sample });
        }
    }
    Ok(out)
}

/// Writes images, masks and `manifest.csv` under `root`.
pub fn gen_synthetic(spec: &SyntheticSpec, registries: &Registries, root: &Path) -> Result<Manifest> {
    let items = generate(spec, registries)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::with_capacity(items.len());
    for (n, item) in items.into_iter().enumerate() {
        write_patch(&root.join(&item.row.image_path), &item.sample.image)?;
        write_mask(&root.join(&item.row.mask_path), &item.sample.mask)?;
        rows.push((n + 1, item.row));
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        rows,
        dropped: 0,
    };
    manifest.save(&root.join("manifest.csv"))?;
    Ok(manifest)
}

/// Splits generated items by their assigned split.
pub fn samples_in(items: &[SyntheticItem], split: Split) -> Vec<Sample> {
    items.iter().filter(|i| i.row.split == split).map(|i| i.sample.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::manifest::{load_sample, ManifestDataset};
    use crate::training::SampleSource;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            count_per_task: 2,
            image_size: 64,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn disk_matches_point_in_circle_scan() {
        let (cx, cy, r) = (31.3, 28.7, (100.0 / std::f64::consts::PI).sqrt());
        let mask = rasterize(&[Shape::Disk { cx, cy, r }], 64, 64);
        // count lattice centers per row from the chord half-width
        let mut expected = 0i64;
        for y in 0..64 {
            let dy = y as f64 + 0.5 - cy;
            if dy.abs() > r {
                continue;
            }
            let half = (r * r - dy * dy).sqrt();
            let lo = (cx - half - 0.5).ceil().max(0.0) as i64;
            let hi = (cx + half - 0.5).floor().min(63.0) as i64;
            expected += (hi - lo + 1).max(0);
        }
        assert_eq!(mask.count() as i64, expected);
        assert!((mask.count() as i64 - 100).abs() <= 8);
    }

    #[test]
    fn counting_and_determinism() {
        let reg = Registries::default();
        let a = generate(&small(4), &reg).unwrap();
        assert_eq!(a.len(), 14);
        assert_eq!(a, generate(&small(4), &reg).unwrap());
        assert_ne!(a, generate(&small(5), &reg).unwrap());
        let nonempty = a.iter().filter(|i| i.sample.mask.count() > 0).count();
        assert!(nonempty * 10 >= a.len() * 9);
    }

    #[test]
    fn files_round_trip_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registries::default();
        let spec = small(9);
        let written = gen_synthetic(&spec, &reg, dir.path()).unwrap();
        let items = generate(&spec, &reg).unwrap();
        let loaded = Manifest::load_with_root(&dir.path().join("manifest.csv"), None).unwrap();
        assert_eq!(loaded.rows, written.rows);
        for (i, item) in items.iter().enumerate() {
            assert_eq!(load_sample(&loaded, i, &reg).unwrap(), item.sample);
        }
        let train = ManifestDataset::new(loaded, reg, Split::Train).unwrap();
        assert_eq!(train.len(), samples_in(&items, Split::Train).len());
        assert!(items[0].row.image_path.starts_with("SYNTHETIC/TUFT/"));
    }

    #[test]
    fn stroke_and_ring_geometry() {
        let ring = Shape::Ring { cx: 10.0, cy: 10.0, inner: 3.0, outer: 5.0 };
        assert!(ring.contains(14.0, 10.0) && !ring.contains(10.0, 10.0) && !ring.contains(16.0, 10.0));
        let stroke = Shape::Stroke { points: vec![(0.0, 0.0), (10.0, 0.0)], radius: 1.0 };
        assert!(stroke.contains(5.0, 0.9) && !stroke.contains(5.0, 1.1) && !stroke.contains(11.5, 0.0));
    }
}
