use serde::{Deserialize, Serialize};

use crate::datamodel::Mask;
use crate::error::{Error, Result};

/// Score assigned when both prediction and ground truth are empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyPolicy {
    /// Both-empty pairs score 1 (perfect agreement).
    #[default]
    One,
    /// Both-empty pairs score 0.
    Zero,
}

impl EmptyPolicy {
    fn value(self) -> f64 {
        match self {
            EmptyPolicy::One => 1.0,
            EmptyPolicy::Zero => 0.0,
        }
    }
}

/// `(|A∩B|, |A|, |B|)`.
fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p & g);
        a += usize::from(p);
        b += usize::from(g);
    }
    Ok((inter, a, b))
}

pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    dsc_with(pred, gt, EmptyPolicy::One)
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    iou_with(pred, gt, EmptyPolicy::One)
}

pub fn dsc_with(pred: &Mask, gt: &Mask, empty: EmptyPolicy) -> Result<f64> {
    let (inter, a, b) = overlap_counts(pred, gt)?;
    if a + b == 0 {
        return Ok(empty.value());
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn iou_with(pred: &Mask, gt: &Mask, empty: EmptyPolicy) -> Result<f64> {
    let (inter, a, b) = overlap_counts(pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(empty.value());
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8], w: usize) -> Mask {
        Mask::new(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        let a = mask(&[1, 1, 0, 0], 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 1], 2);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let empty = Mask::zeros(2, 2);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou_with(&empty, &empty, EmptyPolicy::Zero).unwrap(), 0.0);
        assert!(dsc(&a, &Mask::zeros(1, 4)).is_err());
    }

    fn masks() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..2, h * w),
                proptest::collection::vec(0u8..2, h * w),
            )
                .prop_map(move |(a, b)| {
                    (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn symmetric_ordered_and_linked((a, b) in masks()) {
            let d = dsc(&a, &b).unwrap();
            let j = iou(&a, &b).unwrap();
            prop_assert_eq!(d, dsc(&b, &a).unwrap());
            prop_assert_eq!(j, iou(&b, &a).unwrap());
            prop_assert!(0.0 <= j && j <= d && d <= 1.0);
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-9);
        }

        #[test]
        fn invariant_under_joint_pixel_permutation((a, b) in masks(), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..a.data().len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pa: Vec<u8> = order.iter().map(|&i| a.data()[i]).collect();
            let pb: Vec<u8> = order.iter().map(|&i| b.data()[i]).collect();
            let (pa, pb) = (mask(&pa, a.width()), mask(&pb, b.width()));
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&pa, &pb).unwrap());
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&pa, &pb).unwrap());
        }
    }
}
