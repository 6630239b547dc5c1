//! Four-patch stitching and the inverse quadrant crop. Quadrant order is
//! top-left, top-right, bottom-left, bottom-right.

use crate::datamodel::{Mask, Patch};
use crate::error::{Error, Result};

pub const STITCH_PATCH_SIDE: usize = 256;

fn check_quartet(dims: &[(usize, usize)]) -> Result<()> {
    if dims.len() != 4 {
        return Err(Error::shape(format!("stitching needs exactly 4 patches, got {}", dims.len())));
    }
    for (i, &(h, w)) in dims.iter().enumerate() {
        if (h, w) != (STITCH_PATCH_SIDE, STITCH_PATCH_SIDE) {
            return Err(Error::shape(format!(
                "patch {i} is {h}x{w}, expected {STITCH_PATCH_SIDE}x{STITCH_PATCH_SIDE}"
            )));
        }
    }
    Ok(())
}

fn join<T: Copy + Default>(parts: [&[T]; 4], side: usize, ch: usize) -> Vec<T> {
    let width = 2 * side;
    let mut out = vec![T::default(); width * width * ch];
    for (q, src) in parts.iter().enumerate() {
        let (oy, ox) = ((q / 2) * side, (q % 2) * side);
        for y in 0..side {
            let d = ((oy + y) * width + ox) * ch;
            out[d..d + side * ch].copy_from_slice(&src[y * side * ch..(y + 1) * side * ch]);
        }
    }
    out
}

fn split<T: Copy>(src: &[T], height: usize, width: usize, ch: usize) -> [Vec<T>; 4] {
    let (hh, hw) = (height / 2, width / 2);
    [0, 1, 2, 3].map(|q| {
        let (oy, ox) = ((q / 2) * hh, (q % 2) * hw);
        let mut out = Vec::with_capacity(hh * hw * ch);
        for y in 0..hh {
            let s = ((oy + y) * width + ox) * ch;
            out.extend_from_slice(&src[s..s + hw * ch]);
        }
        out
    })
}

pub fn stitch4(patches: &[Patch]) -> Result<Patch> {
    check_quartet(&patches.iter().map(|p| (p.height(), p.width())).collect::<Vec<_>>())?;
    let parts = [0, 1, 2, 3].map(|i| patches[i].data());
    let side = STITCH_PATCH_SIDE;
    Patch::new(2 * side, 2 * side, join(parts, side, Patch::CHANNELS))
}

pub fn stitch4_masks(masks: &[Mask]) -> Result<Mask> {
    check_quartet(&masks.iter().map(|m| (m.height(), m.width())).collect::<Vec<_>>())?;
    let parts = [0, 1, 2, 3].map(|i| masks[i].data());
    let side = STITCH_PATCH_SIDE;
    Mask::new(2 * side, 2 * side, join(parts, side, 1))
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot crop a {h}x{w} image into quadrants")));
    }
    Ok(())
}

pub fn crop_quadrants(patch: &Patch) -> Result<[Patch; 4]> {
    let (h, w) = (patch.height(), patch.width());
    check_even(h, w)?;
    let parts = split(patch.data(), h, w, Patch::CHANNELS);
    let [a, b, c, d] = parts.map(|data| Patch::new(h / 2, w / 2, data).expect("quadrant of a valid patch"));
    Ok([a, b, c, d])
}

pub fn crop_mask_quadrants(mask: &Mask) -> Result<[Mask; 4]> {
    let (h, w) = (mask.height(), mask.width());
    check_even(h, w)?;
    Ok(split(mask.data(), h, w, 1).map(|data| Mask::new(h / 2, w / 2, data).expect("quadrant of a valid mask")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: usize = STITCH_PATCH_SIDE;

    #[test]
    fn constant_quadrants_land_in_order() {
        let patches: Vec<Patch> = (0..4).map(|v| Patch::filled(S, S, [v as f32 / 3.0; 3])).collect();
        let out = stitch4(&patches).unwrap();
        assert_eq!(out.pixel(0, 0)[0], 0.0);
        assert_eq!(out.pixel(0, S)[0], 1.0 / 3.0);
        assert_eq!(out.pixel(S, 0)[0], 2.0 / 3.0);
        assert_eq!(out.pixel(2 * S - 1, 2 * S - 1)[0], 1.0);
    }

    #[test]
    fn masks_round_trip_and_conserve_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let masks: Vec<Mask> = (0..4)
            .map(|_| Mask::new(S, S, (0..S * S).map(|_| rng.gen_range(0..2)).collect()).unwrap())
            .collect();
        let joined = stitch4_masks(&masks).unwrap();
        assert_eq!(joined.count(), masks.iter().map(Mask::count).sum::<usize>());
        assert_eq!(crop_mask_quadrants(&joined).unwrap().to_vec(), masks);
    }

    #[test]
    fn shape_errors() {
        let p = Patch::filled(S, S, [0.0; 3]);
        assert!(matches!(stitch4(&[p.clone(), p.clone(), p.clone()]), Err(Error::Shape(_))));
        let small = Patch::filled(8, 8, [0.0; 3]);
        assert!(matches!(stitch4(&[p.clone(), p.clone(), p, small]), Err(Error::Shape(_))));
        assert!(crop_quadrants(&Patch::filled(3, 4, [0.0; 3])).is_err());
    }
}
