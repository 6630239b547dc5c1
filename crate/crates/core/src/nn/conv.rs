//! 2D convolution with square 1×1 or 3×3 kernels, zero padding `k/2`, and
//! stride 1 or 2.
//!
//! A 3×3 convolution is evaluated as nine matrix products, one per kernel
//! tap: the input is gathered into a `C_in × (H_out·W_out)` matrix shifted by
//! that tap and multiplied by the tap's `C_out × C_in` weight slice. This
//! keeps scratch memory at one input-sized buffer.

use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{gemm, FeatureMap, MatRef};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (`out×in×k×k`, He-uniform) and `{name}.bias`
    /// (zeros).
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = in_channels * kernel * kernel;
        let weight = params.he_uniform(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = params.zeros(format!("{name}.bias"), vec![out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.stride) || !width.is_multiple_of(self.stride) {
            return Err(Error::shape(format!(
                "{height}x{width} input is not divisible by stride {}",
                self.stride
            )));
        }
        Ok((height / self.stride, width / self.stride))
    }

    fn check_input(&self, x: &FeatureMap) -> Result<(usize, usize)> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        self.output_dims(x.height, x.width)
    }

    pub fn forward(&self, params: &ParamSet, x: &FeatureMap) -> Result<FeatureMap> {
        let (ho, wo) = self.check_input(x)?;
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        let cin = self.in_channels;
        let cout = self.out_channels;
        let taps = self.kernel * self.kernel;
        let plane = ho * wo;
        let mut y = FeatureMap::zeros(cout, ho, wo);
        for (co, &bias) in b.iter().enumerate() {
            y.plane_mut(co).fill(bias);
        }
        let mut scratch = Vec::new();
        for tap in 0..taps {
            let cols = self.tap_matrix(x, tap, ho, wo, &mut scratch);
            let wt = MatRef {
                data: w,
                offset: tap,
                row_stride: cin * taps,
                col_stride: taps,
            };
            gemm(
                cout,
                cin,
                plane,
                1.0,
                wt,
                MatRef::row_major(cols, plane),
                1.0,
                &mut y.data,
                0,
                plane,
                1,
            );
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients into `grads` and returns the
    /// input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: &FeatureMap,
        dy: &FeatureMap,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (ho, wo) = self
            .check_input(x)
            .expect("backward called with an input forward rejected");
        debug_assert_eq!((dy.channels, dy.height, dy.width), (self.out_channels, ho, wo));
        let cin = self.in_channels;
        let cout = self.out_channels;
        let taps = self.kernel * self.kernel;
        let plane = ho * wo;

        {
            let db = grads.get_mut(self.bias);
            for (co, g) in db.iter_mut().enumerate() {
                *g += dy.plane(co).iter().sum::<f64>();
            }
        }

        let w = params.get(self.weight);
        let mut dx = need_input_grad.then(|| FeatureMap::zeros(cin, x.height, x.width));
        let mut scratch = Vec::new();
        let mut dcols = vec![0.0; if need_input_grad { cin * plane } else { 0 }];
        for tap in 0..taps {
            let cols = self.tap_matrix(x, tap, ho, wo, &mut scratch);
            // dW[:, :, tap] += dY · colsᵀ
            gemm(
                cout,
                plane,
                cin,
                1.0,
                MatRef::row_major(&dy.data, plane),
                MatRef::transposed(cols, plane),
                1.0,
                grads.get_mut(self.weight),
                tap,
                cin * taps,
                taps,
            );
            if let Some(dx) = dx.as_mut() {
                // dcols = W[:, :, tap]ᵀ · dY
                let wt_t = MatRef {
                    data: w,
                    offset: tap,
                    row_stride: taps,
                    col_stride: cin * taps,
                };
                gemm(
                    cin,
                    cout,
                    plane,
                    1.0,
                    wt_t,
                    MatRef::row_major(&dy.data, plane),
                    0.0,
                    &mut dcols,
                    0,
                    plane,
                    1,
                );
                self.scatter_tap(&dcols, tap, ho, wo, dx);
            }
        }
        dx
    }

    /// Returns the `C_in × (H_out·W_out)` input matrix seen by kernel tap
    /// `tap`. 1×1 stride-1 convolutions borrow the input directly.
    fn tap_matrix<'a>(
        &self,
        x: &'a FeatureMap,
        tap: usize,
        ho: usize,
        wo: usize,
        scratch: &'a mut Vec<f64>,
    ) -> &'a [f64] {
        if self.kernel == 1 && self.stride == 1 {
            return &x.data;
        }
        let pad = (self.kernel / 2) as isize;
        let (ky, kx) = ((tap / self.kernel) as isize, (tap % self.kernel) as isize);
        let s = self.stride as isize;
        let (h, w) = (x.height as isize, x.width as isize);
        scratch.clear();
        scratch.resize(x.channels * ho * wo, 0.0);
        let (lo, hi) = valid_range(wo, s, kx - pad, w);
        for c in 0..x.channels {
            let src = x.plane(c);
            let dst = &mut scratch[c * ho * wo..(c + 1) * ho * wo];
            for oy in 0..ho {
                let iy = oy as isize * s + ky - pad;
                if iy < 0 || iy >= h {
                    continue;
                }
                let row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                let out = &mut dst[oy * wo..(oy + 1) * wo];
                if s == 1 {
                    let shift = kx - pad;
                    let start = (lo as isize + shift) as usize;
                    out[lo..hi].copy_from_slice(&row[start..start + (hi - lo)]);
                } else {
                    for ox in lo..hi {
                        out[ox] = row[(ox as isize * s + kx - pad) as usize];
                    }
                }
            }
        }
        scratch
    }

    fn scatter_tap(&self, dcols: &[f64], tap: usize, ho: usize, wo: usize, dx: &mut FeatureMap) {
        if self.kernel == 1 && self.stride == 1 {
            for (a, b) in dx.data.iter_mut().zip(dcols) {
                *a += b;
            }
            return;
        }
        let pad = (self.kernel / 2) as isize;
        let (ky, kx) = ((tap / self.kernel) as isize, (tap % self.kernel) as isize);
        let s = self.stride as isize;
        let (h, w) = (dx.height as isize, dx.width as isize);
        let width = dx.width;
        let (lo, hi) = valid_range(wo, s, kx - pad, w);
        for c in 0..dx.channels {
            let src = &dcols[c * ho * wo..(c + 1) * ho * wo];
            let dst = dx.plane_mut(c);
            for oy in 0..ho {
                let iy = oy as isize * s + ky - pad;
                if iy < 0 || iy >= h {
                    continue;
                }
                let row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                let g = &src[oy * wo..(oy + 1) * wo];
                for ox in lo..hi {
                    row[(ox as isize * s + kx - pad) as usize] += g[ox];
                }
            }
        }
    }
}

/// Output columns `ox` in `[lo, hi)` whose source column `ox·s + shift`
/// lies inside `[0, w)`.
fn valid_range(wo: usize, s: isize, shift: isize, w: isize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < wo && (lo as isize) * s + shift < 0 {
        lo += 1;
    }
    let mut hi = wo;
    while hi > lo && ((hi - 1) as isize) * s + shift >= w {
        hi -= 1;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_conv(conv: &Conv2d, params: &ParamSet, x: &FeatureMap) -> FeatureMap {
        let (ho, wo) = conv.output_dims(x.height, x.width).unwrap();
        let w = params.get(conv.weight);
        let b = params.get(conv.bias);
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut y = FeatureMap::zeros(conv.out_channels, ho, wo);
        for (co, &bias) in b.iter().enumerate().take(conv.out_channels) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ci in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky - pad;
                                let ix = (ox * conv.stride) as isize + kx - pad;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wi = ((co * conv.in_channels + ci) as isize * k + ky) * k + kx;
                                acc += w[wi as usize] * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    fn setup(kernel: usize, stride: usize) -> (Conv2d, ParamSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, &mut rng, "c", 3, 5, kernel, stride);
        for v in params.get_mut(conv.bias) {
            *v = rng.gen_range(-1.0..1.0);
        }
        (conv, params, rng)
    }

    #[test]
    fn forward_matches_direct_summation() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let (conv, params, mut rng) = setup(k, s);
            let x = random_map(&mut rng, 3, 6, 8);
            let fast = conv.forward(&params, &x).unwrap();
            let slow = naive_conv(&conv, &params, &x);
            assert!(fast.same_shape(&slow));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let (conv, mut params, mut rng) = setup(k, s);
            let x = random_map(&mut rng, 3, 4, 6);
            let y = conv.forward(&params, &x).unwrap();
            let r = random_map(&mut rng, y.channels, y.height, y.width);
            let loss = |p: &ParamSet, x: &FeatureMap| -> f64 {
                let y = conv.forward(p, x).unwrap();
                y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
            };
            let mut grads = Grads::zeros_like(&params);
            let dx = conv.backward(&params, &x, &r, &mut grads, true).unwrap();
            let h = 1e-6;
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let num = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
                assert!((num - dx.data[i]).abs() < 1e-6, "dx[{i}] {num} vs {}", dx.data[i]);
            }
            for id in [conv.weight, conv.bias] {
                for i in 0..params.get(id).len() {
                    let orig = params.get(id)[i];
                    params.get_mut(id)[i] = orig + h;
                    let lp = loss(&params, &x);
                    params.get_mut(id)[i] = orig - h;
                    let lm = loss(&params, &x);
                    params.get_mut(id)[i] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    assert!((num - grads.get(id)[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let (conv, params, mut rng) = setup(3, 2);
        assert!(conv.forward(&params, &random_map(&mut rng, 3, 5, 4)).is_err());
        assert!(conv.forward(&params, &random_map(&mut rng, 2, 4, 4)).is_err());
    }
}
