use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamSet};

/// Plain SGD update `p ← p − lr·g`; no momentum or weight decay.
///
/// All gradients are checked before any parameter is touched, so a
/// non-finite gradient leaves the parameters unchanged.
pub fn sgd_step(params: &mut ParamSet, grads: &Grads, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradient arrays for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads.arrays()) {
        if p.data.len() != g.len() {
            return Err(Error::shape(format!("gradient shape mismatch for `{}`", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let ids: Vec<_> = params.iter().map(|p| params.id_of(&p.name).expect("own name")).collect();
    for id in ids {
        let g = grads.get(id);
        for (w, d) in params.get_mut(id).iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Per-epoch multiplicative decay: `lr(e) = base · decay^e` after `e`
/// completed epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl LrSchedule {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(base: f64, decay: f64) -> Result<Self> {
        if !(base > 0.0) || !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!(
                "need lr > 0 and 0 < decay <= 1, got lr {base} decay {decay}"
            )));
        }
        Ok(Self { base, decay })
    }

    pub fn lr_at(&self, completed_epochs: usize) -> f64 {
        self.base * self.decay.powi(completed_epochs as i32)
    }
}
