//! Minimal reverse-mode building blocks: every layer exposes `forward` and a
//! matching `backward` that accumulates parameter gradients into [`Grads`].

mod conv;
mod norm;
pub mod ops;
mod params;

pub use conv::Conv2d;
pub use norm::{GroupNorm, GroupNormCache, GROUP_NORM_EPS};
pub use params::{Grads, Param, ParamId, ParamSet};
