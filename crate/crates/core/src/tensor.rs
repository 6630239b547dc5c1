//! Single-sample channels-first feature maps and the dense matrix product
//! every convolution reduces to.

use crate::error::{Error, Result};

/// A `C×H×W` map of one sample, row-major within each channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel spatial mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / n)
            .collect()
    }
}

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows×cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `out (m×n) = alpha · a (m×k) · b (k×n) + beta · out`, with `out` given by
/// its base offset and strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    out: &mut [f64],
    out_offset: usize,
    out_row_stride: usize,
    out_col_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        out_offset + (m - 1) * out_row_stride + (n - 1) * out_col_stride < out.len(),
        "gemm output out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = &mut out[out_offset + i * out_row_stride + j * out_col_stride];
                *o *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above; the
    // output slice is borrowed mutably so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr().add(out_offset),
            out_row_stride as isize,
            out_col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transpose() {
        // a: 2x3, b^T given as row-major 4x3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [
            1.0, 0.0, 2.0, //
            -1.0, 3.0, 1.0, //
            0.5, 0.5, 0.5, //
            2.0, -2.0, 0.0,
        ];
        let mut out = vec![1.0; 8];
        gemm(
            2,
            3,
            4,
            1.0,
            MatRef::row_major(&a, 3),
            MatRef::transposed(&bt, 3),
            1.0,
            &mut out,
            0,
            4,
            1,
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * bt[j * 3 + p]).sum::<f64>() + 1.0;
                assert_eq!(out[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn channel_means_are_plane_averages() {
        let fm = FeatureMap::from_vec(2, 1, 2, vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        assert_eq!(fm.channel_means(), vec![2.0, 0.0]);
        assert!(FeatureMap::from_vec(2, 2, 2, vec![0.0; 3]).is_err());
    }
}
