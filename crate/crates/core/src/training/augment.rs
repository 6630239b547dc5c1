//! Training-time augmentation. Each transform family is drawn independently
//! with the configured probability. Geometric transforms move image and mask
//! together (mask resampled nearest-neighbour); photometric transforms touch
//! the image only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Mask, Patch, Sample};

/// Parameter ranges for each transform family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub max_translate: f64,
    pub max_scale_delta: f64,
    pub max_brightness: f32,
    pub contrast: (f32, f32),
    pub max_blur_sigma: f64,
    pub max_noise_sigma: f64,
    pub max_dropout_area: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translate: 0.10,
            max_scale_delta: 0.10,
            max_brightness: 0.1,
            contrast: (0.8, 1.2),
            max_blur_sigma: 1.5,
            max_noise_sigma: 0.02,
            max_dropout_area: 0.05,
        }
    }
}

/// `(top, left, height, width)` rectangle.
pub type Rect = (usize, usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub enum AugOp {
    /// Rotation about the patch centre, translation as a fraction of the
    /// side, isotropic scale.
    Affine {
        angle_deg: f64,
        translate: (f64, f64),
        scale: f64,
    },
    HorizontalFlip,
    VerticalFlip,
    Contrast(f32),
    Brightness(f32),
    GaussianBlur(f64),
    GaussianNoise { sigma: f64, seed: u64 },
    CoarseDropout(Vec<Rect>),
}

impl AugOp {
    fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugOp::Affine { .. } | AugOp::HorizontalFlip | AugOp::VerticalFlip
        )
    }
}

/// An ordered list of transforms to apply to one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub ops: Vec<AugOp>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(ops: Vec<AugOp>) -> Self {
        Self { ops }
    }

    /// Draws each family with probability `p`.
    pub fn sample(
        rng: &mut ChaCha8Rng,
        p: f64,
        ranges: &AugmentRanges,
        height: usize,
        width: usize,
    ) -> Self {
        let mut ops = Vec::new();
        let draw = |rng: &mut ChaCha8Rng| rng.gen_bool(p.clamp(0.0, 1.0));
        if draw(rng) {
            let r = ranges.max_rotation_deg.max(0.0);
            let t = ranges.max_translate.clamp(0.0, 0.5);
            let s = ranges.max_scale_delta.clamp(0.0, 0.9);
            ops.push(AugOp::Affine {
                angle_deg: sym(rng, r),
                translate: (sym(rng, t), sym(rng, t)),
                scale: 1.0 + sym(rng, s),
            });
        }
        if draw(rng) {
            ops.push(AugOp::HorizontalFlip);
        }
        if draw(rng) {
            ops.push(AugOp::VerticalFlip);
        }
        if draw(rng) {
            let (lo, hi) = ranges.contrast;
            let f = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            ops.push(AugOp::Contrast(f.max(0.0)));
        }
        if draw(rng) {
            let b = ranges.max_brightness.abs();
            ops.push(AugOp::Brightness(if b > 0.0 { rng.gen_range(-b..b) } else { 0.0 }));
        }
        if draw(rng) {
            ops.push(AugOp::GaussianBlur(rng.gen_range(0.0..=ranges.max_blur_sigma.max(0.0))));
        }
        if draw(rng) {
            ops.push(AugOp::GaussianNoise {
                sigma: rng.gen_range(0.0..=ranges.max_noise_sigma.max(0.0)),
                seed: rng.gen(),
            });
        }
        if draw(rng) {
            ops.push(AugOp::CoarseDropout(dropout_rects(
                rng,
                ranges.max_dropout_area.clamp(0.0, 1.0),
                height,
                width,
            )));
        }
        Self { ops }
    }

    /// Geometric ops first, then photometric ops, each group in plan order.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let mut image = sample.image.clone();
        let mut mask = sample.mask.clone();
        let geometric = self.ops.iter().filter(|op| op.is_geometric());
        let photometric = self.ops.iter().filter(|op| !op.is_geometric());
        for op in geometric.chain(photometric) {
            match op {
                AugOp::Affine {
                    angle_deg,
                    translate,
                    scale,
                } => {
                    let (i, m) = affine(&image, &mask, *angle_deg, *translate, *scale);
                    image = i;
                    mask = m;
                }
                AugOp::HorizontalFlip => {
                    image = flip_patch(&image, true);
                    mask = flip_mask(&mask, true);
                }
                AugOp::VerticalFlip => {
                    image = flip_patch(&image, false);
                    mask = flip_mask(&mask, false);
                }
                AugOp::Contrast(f) => contrast(&mut image, *f),
                AugOp::Brightness(d) => map_clipped(&mut image, |v| v + d),
                AugOp::GaussianBlur(sigma) => image = gaussian_blur(&image, *sigma),
                AugOp::GaussianNoise { sigma, seed } => gaussian_noise(&mut image, *sigma, *seed),
                AugOp::CoarseDropout(rects) => coarse_dropout(&mut image, rects),
            }
        }
        Sample {
            image,
            mask,
            ..sample.clone()
        }
    }
}

/// Draws a plan with probability `p` per family and applies it.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng, p: f64, ranges: &AugmentRanges) -> Sample {
    AugmentPlan::sample(rng, p, ranges, sample.height(), sample.width()).apply(sample)
}

fn sym(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..r)
    } else {
        0.0
    }
}

fn dropout_rects(rng: &mut ChaCha8Rng, max_area: f64, h: usize, w: usize) -> Vec<Rect> {
    let count = rng.gen_range(1..=4usize);
    let per_rect = max_area * (h * w) as f64 / count as f64;
    let side = per_rect.sqrt().floor() as usize;
    let (rh, rw) = (side.min(h), side.min(w));
    if rh == 0 || rw == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let top = rng.gen_range(0..=h - rh);
            let left = rng.gen_range(0..=w - rw);
            (top, left, rh, rw)
        })
        .collect()
}

fn map_clipped(image: &mut Patch, f: impl Fn(f32) -> f32) {
    for v in image.data_mut() {
        *v = f(*v).clamp(0.0, 1.0);
    }
}

fn contrast(image: &mut Patch, factor: f32) {
    let n = (image.height() * image.width()) as f32;
    let mut mean = [0.0f32; 3];
    for px in image.data().chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for px in image.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = ((px[c] - mean[c]) * factor + mean[c]).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_noise(image: &mut Patch, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in image.data_mut() {
        *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
    }
}

fn coarse_dropout(image: &mut Patch, rects: &[Rect]) {
    let (h, w) = (image.height(), image.width());
    for &(top, left, rh, rw) in rects {
        for y in top..(top + rh).min(h) {
            for x in left..(left + rw).min(w) {
                image.set_pixel(y, x, [0.0; 3]);
            }
        }
    }
}

fn gaussian_blur(image: &Patch, sigma: f64) -> Patch {
    if sigma <= 1e-3 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let raw: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / s) as f32).collect()
    };
    let (h, w) = (image.height() as isize, image.width() as isize);
    let pass = |src: &Patch, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, kv) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y, (x + off).clamp(0, w - 1))
                    } else {
                        ((y + off).clamp(0, h - 1), x)
                    };
                    let px = src.pixel(sy as usize, sx as usize);
                    for c in 0..3 {
                        acc[c] += kv * px[c];
                    }
                }
                out.set_pixel(y as usize, x as usize, acc.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

fn flip_patch(image: &Patch, horizontal: bool) -> Patch {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            out.set_pixel(y, x, image.pixel(sy, sx));
        }
    }
    out
}

fn flip_mask(mask: &Mask, horizontal: bool) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            out.set(y, x, mask.get(sy, sx) == 1);
        }
    }
    out
}

/// Inverse-maps every output pixel centre; out-of-image sources read as 0.
fn affine(image: &Patch, mask: &Mask, angle_deg: f64, translate: (f64, f64), scale: f64) -> (Patch, Mask) {
    let (h, w) = (image.height(), image.width());
    let scale = scale.max(1e-3);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (tx, ty) = (translate.0 * w as f64, translate.1 * h as f64);
    let mut out_img = Patch::filled(h, w, [0.0; 3]);
    let mut out_mask = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx - tx) / scale;
            let dy = (y as f64 + 0.5 - cy - ty) / scale;
            // inverse rotation
            let sx = cos * dx + sin * dy + cx - 0.5;
            let sy = -sin * dx + cos * dy + cy - 0.5;
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                out_mask.set(y, x, mask.get(ny as usize, nx as usize) == 1);
            }
            out_img.set_pixel(y, x, bilinear(image, sy, sx));
        }
    }
    (out_img, out_mask)
}

fn bilinear(image: &Patch, y: f64, x: f64) -> [f32; 3] {
    let (h, w) = (image.height() as isize, image.width() as isize);
    let (x0, y0) = (x.floor() as isize, y.floor() as isize);
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let fetch = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            [0.0; 3]
        } else {
            image.pixel(yy as usize, xx as usize)
        }
    };
    let (a, b, c, d) = (fetch(y0, x0), fetch(y0, x0 + 1), fetch(y0 + 1, x0), fetch(y0 + 1, x0 + 1));
    let mut out = [0.0f32; 3];
    for i in 0..3 {
        let top = a[i] * (1.0 - fx) + b[i] * fx;
        let bot = c[i] * (1.0 - fx) + d[i] * fx;
        out[i] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Source, Split};
    use rand::SeedableRng;

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (12, 10);
        let image = Patch::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mask = Mask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        Sample::new(image, mask, 2, 1, Source::Synthetic, Split::Train).unwrap()
    }

    #[test]
    fn probability_zero_is_identity() {
        let s = sample(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &mut rng, 0.0, &AugmentRanges::default()), s);
        assert_eq!(AugmentPlan::identity().apply(&s), s);
    }

    #[test]
    fn flips_move_mask_and_image_together_and_are_involutions() {
        let s = sample(2);
        let plan = AugmentPlan::new(vec![AugOp::HorizontalFlip]);
        let once = plan.apply(&s);
        assert_ne!(once.image, s.image);
        assert_eq!(once.image.pixel(3, 0), s.image.pixel(3, 9));
        assert_eq!(once.mask.get(3, 0), s.mask.get(3, 9));
        assert_eq!(plan.apply(&once), s);
        let v = AugmentPlan::new(vec![AugOp::VerticalFlip]);
        assert_eq!(v.apply(&v.apply(&s)), s);
    }

    #[test]
    fn photometric_ops_leave_mask_alone() {
        let s = sample(3);
        for op in [
            AugOp::GaussianNoise { sigma: 0.01, seed: 5 },
            AugOp::Brightness(0.08),
            AugOp::Contrast(1.15),
            AugOp::GaussianBlur(1.0),
            AugOp::CoarseDropout(vec![(1, 1, 3, 3)]),
        ] {
            let out = AugmentPlan::new(vec![op.clone()]).apply(&s);
            assert_eq!(out.mask, s.mask, "{op:?}");
            assert_ne!(out.image, s.image, "{op:?}");
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_affine_preserves_sample() {
        let s = sample(4);
        let out = AugmentPlan::new(vec![AugOp::Affine {
            angle_deg: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
        }])
        .apply(&s);
        assert_eq!(out.mask, s.mask);
        for (a, b) in out.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn random_plans_keep_dims_and_binary_mask() {
        let s = sample(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment(&s, &mut rng, 0.5, &AugmentRanges::default());
            assert_eq!((out.height(), out.width()), (12, 10));
            assert!(out.mask.data().iter().all(|&v| v <= 1));
            assert_eq!((out.task_id, out.scale_id), (2, 1));
        }
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let r = AugmentRanges::default();
        let a = AugmentPlan::sample(&mut ChaCha8Rng::seed_from_u64(7), 0.5, &r, 64, 64);
        let b = AugmentPlan::sample(&mut ChaCha8Rng::seed_from_u64(7), 0.5, &r, 64, 64);
        assert_eq!(a, b);
    }
}
