use crate::datamodel::Mask;
use crate::dynamic_head::softmax2;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const DEFAULT_BOUNDARY_WEIGHT: f64 = 1.2;
pub const DICE_EPS: f64 = 1e-5;

/// Per-pixel cross-entropy weights: the boundary weight on the inner rim of
/// the ground truth, 1.0 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

/// Inner one-pixel rim of the mask: foreground pixels removed by erosion with
/// a 3×3 cross, pixels outside the image counting as background.
pub fn boundary_mask(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut rim = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let interior = y > 0
                && x > 0
                && y + 1 < h
                && x + 1 < w
                && mask.get(y - 1, x) == 1
                && mask.get(y + 1, x) == 1
                && mask.get(y, x - 1) == 1
                && mask.get(y, x + 1) == 1;
            if !interior {
                rim.set(y, x, true);
            }
        }
    }
    rim
}

pub fn boundary_weight_map(mask: &Mask) -> WeightMap {
    boundary_weight_map_with(mask, DEFAULT_BOUNDARY_WEIGHT)
}

pub fn boundary_weight_map_with(mask: &Mask, boundary_weight: f64) -> WeightMap {
    let rim = boundary_mask(mask);
    WeightMap {
        height: mask.height(),
        width: mask.width(),
        weights: rim
            .data()
            .iter()
            .map(|&b| if b == 1 { boundary_weight } else { 1.0 })
            .collect(),
    }
}

fn check_len(what: &str, got: usize, mask: &Mask) -> Result<()> {
    let want = mask.height() * mask.width();
    if got != want {
        return Err(Error::shape(format!(
            "{what} has {got} pixels, mask has {want}"
        )));
    }
    Ok(())
}

/// Soft binary dice loss `1 − (2Σpy + ε)/(Σp + Σy + ε)`.
pub fn dice_loss(prob_fg: &[f64], mask: &Mask, eps: f64) -> Result<f64> {
    check_len("probability map", prob_fg.len(), mask)?;
    let (inter, sum_p, sum_y) = dice_terms(prob_fg, mask);
    Ok(1.0 - (2.0 * inter + eps) / (sum_p + sum_y + eps))
}

fn dice_terms(prob_fg: &[f64], mask: &Mask) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (&p, &y) in prob_fg.iter().zip(mask.data()) {
        let y = f64::from(y);
        inter += p * y;
        sum_p += p;
        sum_y += y;
    }
    (inter, sum_p, sum_y)
}

fn check_logits(logits: &FeatureMap, mask: &Mask) -> Result<()> {
    if logits.channels != 2 || logits.height != mask.height() || logits.width != mask.width() {
        return Err(Error::shape(format!(
            "logits {}x{}x{} do not align with a {}x{} mask",
            logits.channels,
            logits.height,
            logits.width,
            mask.height(),
            mask.width()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("logits contain non-finite values"));
    }
    Ok(())
}

/// Boundary-weighted cross-entropy averaged over pixels.
pub fn weighted_ce_loss(logits: &FeatureMap, mask: &Mask, weights: &WeightMap) -> Result<f64> {
    check_logits(logits, mask)?;
    check_len("weight map", weights.weights.len(), mask)?;
    let n = mask.data().len() as f64;
    let sum: f64 = logits
        .plane(0)
        .iter()
        .zip(logits.plane(1))
        .zip(mask.data())
        .zip(&weights.weights)
        .map(|(((&l0, &l1), &y), &w)| w * neg_log_softmax(l0, l1, y))
        .sum();
    Ok(sum / n)
}

/// `−log softmax(l)[y]`, computed stably.
fn neg_log_softmax(l0: f64, l1: f64, y: u8) -> f64 {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    lse - if y == 1 { l1 } else { l0 }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub dice: f64,
    pub ce: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

/// Dice on the soft foreground probability plus weighted cross-entropy.
pub fn total_loss(logits: &FeatureMap, mask: &Mask, weights: &WeightMap) -> Result<LossParts> {
    let ce = weighted_ce_loss(logits, mask, weights)?;
    let prob = crate::dynamic_head::foreground_probability(logits);
    let dice = dice_loss(&prob, mask, DICE_EPS)?;
    Ok(LossParts { dice, ce })
}

/// Loss value and its gradient with respect to the logits.
pub fn total_loss_and_grad(
    logits: &FeatureMap,
    mask: &Mask,
    weights: &WeightMap,
) -> Result<(LossParts, FeatureMap)> {
    let parts = total_loss(logits, mask, weights)?;
    let n = mask.data().len();
    let probs: Vec<(f64, f64)> = logits
        .plane(0)
        .iter()
        .zip(logits.plane(1))
        .map(|(&a, &b)| softmax2(a, b))
        .collect();
    let fg: Vec<f64> = probs.iter().map(|p| p.1).collect();
    let (inter, sum_p, sum_y) = dice_terms(&fg, mask);
    let denom = sum_p + sum_y + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;

    let mut grad = FeatureMap::zeros(2, logits.height, logits.width);
    let inv_n = 1.0 / n as f64;
    for (i, &(p0, p1)) in probs.iter().enumerate() {
        let y = mask.data()[i];
        let w = weights.weights[i];
        // cross-entropy: w (p_c − [c = y]) / N
        let g1_ce = w * (p1 - f64::from(y)) * inv_n;
        // dice: ∂L/∂p1 then through p1 = σ(l1 − l0)
        let dl_dp = -(2.0 * f64::from(y) * denom - numer) / (denom * denom);
        let dp = p0 * p1;
        let g1 = g1_ce + dl_dp * dp;
        // both classes share the same magnitude with opposite sign
        grad.data[n + i] = g1;
        grad.data[i] = -g1;
    }
    Ok((parts, grad))
}
