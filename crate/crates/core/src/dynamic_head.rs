//! Class- and scale-aware controller and the dynamic segmentation head.
//!
//! The controller is a single 1×1 convolution over the 1×1 spatial vector
//! `GAP(F) ‖ T ‖ S` (256 + 7 + 4 = 267 channels by default), i.e. an affine
//! map to the 162 values that parameterize the head. The head filters the
//! decoder map `M` with three per-sample 1×1 convolutions 8→8→8→2, with ReLU
//! after the first two.
//!
//! Layout of one controller row (`ω`), in order:
//!
//! | slice | entries | shape            | indices   |
//! |-------|---------|------------------|-----------|
//! | w1    | 64      | 8×8 (out, in)    | 0..64     |
//! | b1    | 8       | 8                | 64..72    |
//! | w2    | 64      | 8×8              | 72..136   |
//! | b2    | 8       | 8                | 136..144  |
//! | w3    | 16      | 2×8              | 144..160  |
//! | b3    | 2       | 2                | 160..162  |

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Mask, ScaleCode, TaskCode};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamSet};
use crate::tensor::{gemm, FeatureMap, MatRef};

/// Channel plan of the dynamic head. Kernels are 1×1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub layer_channels: [(usize, usize); 3],
}

pub const HEAD_SPEC: HeadSpec = HeadSpec {
    layer_channels: [(8, 8), (8, 8), (8, 2)],
};

/// Scale applied to the He-uniform controller weight at construction.
pub const CONTROLLER_INIT_GAIN: f64 = 0.1;

/// Number of controller outputs the head consumes.
pub const HEAD_PARAM_COUNT: usize = HEAD_SPEC.total_params();

impl HeadSpec {
    pub const fn layer_param_counts(&self) -> [usize; 3] {
        let [a, b, c] = self.layer_channels;
        [a.0 * a.1 + a.1, b.0 * b.1 + b.1, c.0 * c.1 + c.1]
    }

    pub const fn total_params(&self) -> usize {
        let [a, b, c] = self.layer_param_counts();
        a + b + c
    }

    pub const fn in_channels(&self) -> usize {
        self.layer_channels[0].0
    }

    pub const fn out_channels(&self) -> usize {
        self.layer_channels[2].1
    }
}

impl Default for HeadSpec {
    fn default() -> Self {
        HEAD_SPEC
    }
}

/// One 1×1 layer of the head: `weight` is row-major `(out, in)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadLayer<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub in_channels: usize,
    pub out_channels: usize,
}

/// The three layers sliced out of one controller row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadParams<'a> {
    pub layers: [HeadLayer<'a>; 3],
}

/// Partitions a 162-value controller row into `(ω1, ω2, ω3)` following the
/// layout table in the module docs.
pub fn slice_params(omega_row: &[f64]) -> Result<HeadParams<'_>> {
    if omega_row.len() != HEAD_PARAM_COUNT {
        return Err(Error::shape(format!(
            "dynamic head needs {HEAD_PARAM_COUNT} parameters, got {}",
            omega_row.len()
        )));
    }
    let mut rest = omega_row;
    let layers = HEAD_SPEC.layer_channels.map(|(cin, cout)| {
        let (weight, tail) = rest.split_at(cin * cout);
        let (bias, tail) = tail.split_at(cout);
        rest = tail;
        HeadLayer {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
        }
    });
    assert!(rest.is_empty(), "head layout must consume every controller output");
    Ok(HeadParams { layers })
}

/// Per-sample controller outputs `ω`, one row of [`HEAD_PARAM_COUNT`] values
/// per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerOutput {
    pub omega: Vec<Vec<f64>>,
}

impl ControllerOutput {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn slices(&self, i: usize) -> Result<HeadParams<'_>> {
        slice_params(&self.omega[i])
    }
}

/// The fusion controller `φ`: `ω = W · (gap ‖ T ‖ S) + b`.
#[derive(Clone, Debug)]
pub struct Controller {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gap_len: usize,
    pub tasks: usize,
    pub scales: usize,
}

impl Controller {
    /// Registers `controller.weight` (`162 × in`) and `controller.bias`.
    ///
    /// The bias starts as a He-initialized head and the weight as a He
    /// initialization scaled by [`CONTROLLER_INIT_GAIN`], so every sample
    /// begins near one shared, well-conditioned head.
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        gap_len: usize,
        tasks: usize,
        scales: usize,
    ) -> Self {
        let in_features = gap_len + tasks + scales;
        let weight = params.he_uniform(
            "controller.weight",
            vec![HEAD_PARAM_COUNT, in_features],
            in_features,
            rng,
        );
        for v in params.get_mut(weight) {
            *v *= CONTROLLER_INIT_GAIN;
        }
        let mut base = Vec::with_capacity(HEAD_PARAM_COUNT);
        for (cin, cout) in HEAD_SPEC.layer_channels {
            let bound = (6.0 / cin as f64).sqrt();
            base.extend((0..cin * cout).map(|_| rng.gen_range(-bound..bound)));
            base.extend(std::iter::repeat_n(0.0, cout));
        }
        let bias = params.add("controller.bias", vec![HEAD_PARAM_COUNT], base);
        Self {
            weight,
            bias,
            gap_len,
            tasks,
            scales,
        }
    }

    pub fn in_features(&self) -> usize {
        self.gap_len + self.tasks + self.scales
    }

    /// `gap ‖ T ‖ S`, in that order.
    pub fn fused_input(&self, gap: &[f64], task: &TaskCode, scale: &ScaleCode) -> Result<Vec<f64>> {
        let got = gap.len() + task.len() + scale.len();
        if gap.len() != self.gap_len || task.len() != self.tasks || scale.len() != self.scales {
            return Err(Error::shape(format!(
                "controller expects {} fused inputs ({} + {} + {}), got {got} ({} + {} + {})",
                self.in_features(),
                self.gap_len,
                self.tasks,
                self.scales,
                gap.len(),
                task.len(),
                scale.len()
            )));
        }
        if gap.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("GAP feature contains non-finite values"));
        }
        let mut input = Vec::with_capacity(got);
        input.extend_from_slice(gap);
        input.extend_from_slice(task.as_slice());
        input.extend_from_slice(scale.as_slice());
        Ok(input)
    }

    /// Affine map of an already fused input row.
    pub fn forward_fused(&self, params: &ParamSet, input: &[f64]) -> Vec<f64> {
        let mut omega = params.get(self.bias).to_vec();
        gemm(
            HEAD_PARAM_COUNT,
            input.len(),
            1,
            1.0,
            MatRef::row_major(params.get(self.weight), input.len()),
            MatRef::row_major(input, 1),
            1.0,
            &mut omega,
            0,
            1,
            1,
        );
        omega
    }

    pub fn forward_row(
        &self,
        params: &ParamSet,
        gap: &[f64],
        task: &TaskCode,
        scale: &ScaleCode,
    ) -> Result<Vec<f64>> {
        let input = self.fused_input(gap, task, scale)?;
        Ok(self.forward_fused(params, &input))
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        gap: &[Vec<f64>],
        tasks: &[TaskCode],
        scales: &[ScaleCode],
    ) -> Result<ControllerOutput> {
        if gap.len() != tasks.len() || gap.len() != scales.len() {
            return Err(Error::shape(format!(
                "batch of {} GAP rows with {} task and {} scale codes",
                gap.len(),
                tasks.len(),
                scales.len()
            )));
        }
        let omega = gap
            .iter()
            .zip(tasks)
            .zip(scales)
            .map(|((g, t), s)| self.forward_row(params, g, t, s))
            .collect::<Result<_>>()?;
        Ok(ControllerOutput { omega })
    }

    /// Accumulates `∂ω/∂Θ` contributions and returns the gradient with
    /// respect to the GAP part of the fused input.
    pub fn backward_row(
        &self,
        params: &ParamSet,
        input: &[f64],
        d_omega: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let k = input.len();
        gemm(
            HEAD_PARAM_COUNT,
            1,
            k,
            1.0,
            MatRef::row_major(d_omega, 1),
            MatRef::row_major(input, k),
            1.0,
            grads.get_mut(self.weight),
            0,
            k,
            1,
        );
        for (g, d) in grads.get_mut(self.bias).iter_mut().zip(d_omega) {
            *g += d;
        }
        let mut d_input = vec![0.0; k];
        gemm(
            k,
            HEAD_PARAM_COUNT,
            1,
            1.0,
            MatRef::transposed(params.get(self.weight), k),
            MatRef::row_major(d_omega, 1),
            0.0,
            &mut d_input,
            0,
            1,
            1,
        );
        d_input.truncate(self.gap_len);
        d_input
    }
}

/// Hidden activations of one head evaluation.
#[derive(Clone, Debug)]
pub struct HeadCache {
    hidden: [FeatureMap; 2],
}

fn pointwise_layer(layer: &HeadLayer<'_>, x: &FeatureMap) -> FeatureMap {
    let plane = x.plane_len();
    let mut y = FeatureMap::zeros(layer.out_channels, x.height, x.width);
    for (o, &b) in layer.bias.iter().enumerate() {
        y.plane_mut(o).fill(b);
    }
    gemm(
        layer.out_channels,
        layer.in_channels,
        plane,
        1.0,
        MatRef::row_major(layer.weight, layer.in_channels),
        MatRef::row_major(&x.data, plane),
        1.0,
        &mut y.data,
        0,
        plane,
        1,
    );
    y
}

/// Writes `[dW | db]` of one layer into `d_out` and returns `dX`.
fn pointwise_layer_backward(
    layer: &HeadLayer<'_>,
    x: &FeatureMap,
    dy: &FeatureMap,
    d_out: &mut [f64],
) -> FeatureMap {
    let plane = x.plane_len();
    let (dw, db) = d_out.split_at_mut(layer.in_channels * layer.out_channels);
    gemm(
        layer.out_channels,
        plane,
        layer.in_channels,
        1.0,
        MatRef::row_major(&dy.data, plane),
        MatRef::transposed(&x.data, plane),
        0.0,
        dw,
        0,
        layer.in_channels,
        1,
    );
    for (o, g) in db.iter_mut().enumerate() {
        *g = dy.plane(o).iter().sum();
    }
    let mut dx = FeatureMap::zeros(layer.in_channels, x.height, x.width);
    gemm(
        layer.in_channels,
        layer.out_channels,
        plane,
        1.0,
        MatRef::transposed(layer.weight, layer.in_channels),
        MatRef::row_major(&dy.data, plane),
        0.0,
        &mut dx.data,
        0,
        plane,
        1,
    );
    dx
}

fn relu(mut x: FeatureMap) -> FeatureMap {
    crate::nn::ops::relu_in_place(&mut x);
    x
}

/// Filters one decoder map with its own head parameters: three 1×1
/// convolutions, ReLU after the first two. Returns 2-channel logits.
pub fn head_forward_sample(m: &FeatureMap, omega_row: &[f64]) -> Result<(FeatureMap, HeadCache)> {
    if m.channels != HEAD_SPEC.in_channels() {
        return Err(Error::shape(format!(
            "dynamic head expects {} channels, got {}",
            HEAD_SPEC.in_channels(),
            m.channels
        )));
    }
    let head = slice_params(omega_row)?;
    let [l1, l2, l3] = &head.layers;
    let h1 = relu(pointwise_layer(l1, m));
    let h2 = relu(pointwise_layer(l2, &h1));
    let logits = pointwise_layer(l3, &h2);
    Ok((logits, HeadCache { hidden: [h1, h2] }))
}

/// Returns `(∂L/∂M, ∂L/∂ω)` for one sample.
pub fn head_backward_sample(
    m: &FeatureMap,
    omega_row: &[f64],
    cache: &HeadCache,
    d_logits: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>)> {
    let head = slice_params(omega_row)?;
    let [l1, l2, l3] = &head.layers;
    let [h1, h2] = &cache.hidden;
    let counts = HEAD_SPEC.layer_param_counts();
    let mut d_omega = vec![0.0; HEAD_PARAM_COUNT];
    let (d1, rest) = d_omega.split_at_mut(counts[0]);
    let (d2, d3) = rest.split_at_mut(counts[1]);

    let mut dh2 = pointwise_layer_backward(l3, h2, d_logits, d3);
    crate::nn::ops::relu_backward(h2, &mut dh2);
    let mut dh1 = pointwise_layer_backward(l2, h1, &dh2, d2);
    crate::nn::ops::relu_backward(h1, &mut dh1);
    let dm = pointwise_layer_backward(l1, m, &dh1, d1);
    Ok((dm, d_omega))
}

/// Batched head output: per-sample logits `P` with derived probabilities and
/// masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<FeatureMap>,
}

/// `head_forward` over a batch: sample `i` is filtered by `ω_i`.
pub fn head_forward(m: &[FeatureMap], omega: &ControllerOutput) -> Result<Prediction> {
    if m.len() != omega.len() {
        return Err(Error::shape(format!(
            "{} decoder maps but {} controller rows",
            m.len(),
            omega.len()
        )));
    }
    let logits = m
        .iter()
        .zip(&omega.omega)
        .map(|(m, w)| head_forward_sample(m, w).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(Prediction { logits })
}

/// Two-class softmax of a logit pair, returned as `(p_background, p_foreground)`.
pub fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Per-pixel foreground probability of a 2-channel logit map.
pub fn foreground_probability(logits: &FeatureMap) -> Vec<f64> {
    logits
        .plane(0)
        .iter()
        .zip(logits.plane(1))
        .map(|(&a, &b)| softmax2(a, b).1)
        .collect()
}

/// Argmax mask; ties resolve to background.
pub fn argmax_mask(logits: &FeatureMap) -> Mask {
    let data = logits
        .plane(0)
        .iter()
        .zip(logits.plane(1))
        .map(|(&a, &b)| u8::from(b > a))
        .collect();
    Mask::new(logits.height, logits.width, data).expect("argmax mask is binary and sized")
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Channel-wise softmax of sample `i`.
    pub fn probabilities(&self, i: usize) -> FeatureMap {
        let l = &self.logits[i];
        let fg = foreground_probability(l);
        let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(&fg);
        FeatureMap::from_vec(2, l.height, l.width, data).expect("two planes")
    }

    pub fn mask(&self, i: usize) -> Mask {
        argmax_mask(&self.logits[i])
    }
}
