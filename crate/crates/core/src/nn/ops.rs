//! Parameter-free operations and their adjoints.

use crate::tensor::FeatureMap;

pub fn relu_in_place(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output `y`.
pub fn relu_backward(y: &FeatureMap, dy: &mut FeatureMap) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height, x.width);
    let mut y = FeatureMap::zeros(x.channels, 2 * h, 2 * w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = y.plane_mut(c);
        for iy in 0..h {
            let row = &src[iy * w..(iy + 1) * w];
            for dy in 0..2 {
                let out = &mut dst[(2 * iy + dy) * 2 * w..(2 * iy + dy + 1) * 2 * w];
                for (ix, &v) in row.iter().enumerate() {
                    out[2 * ix] = v;
                    out[2 * ix + 1] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &FeatureMap) -> FeatureMap {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = dy.plane(c);
        let dst = dx.plane_mut(c);
        for oy in 0..dy.height {
            for ox in 0..dy.width {
                dst[(oy / 2) * w + ox / 2] += src[oy * dy.width + ox];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Splits a concatenated gradient back into its first `first` channels and
/// the rest.
pub fn split_channels(d: &FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let cut = first * d.plane_len();
    let a = FeatureMap {
        channels: first,
        height: d.height,
        width: d.width,
        data: d.data[..cut].to_vec(),
    };
    let b = FeatureMap {
        channels: d.channels - first,
        height: d.height,
        width: d.width,
        data: d.data[cut..].to_vec(),
    };
    (a, b)
}

/// Adjoint of global average pooling: spreads `d_gap[c] / (H·W)` over
/// channel `c`, adding into `dx`.
pub fn gap_backward_into(d_gap: &[f64], dx: &mut FeatureMap) {
    let n = dx.plane_len() as f64;
    for (c, &g) in d_gap.iter().enumerate() {
        let share = g / n;
        for v in dx.plane_mut(c) {
            *v += share;
        }
    }
}
