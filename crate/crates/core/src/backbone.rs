//! 2D residual U-Net producing the 8-channel decoder map fed to the dynamic
//! head and the 256-wide pooled bottleneck feature fed to the controller.
//!
//! Layout for `levels = L`, with `c_l = base_channels · 2^l`:
//!
//! ```text
//! stem        conv3x3(in → c_0)
//! encoder.l   residual block (c_l → c_l), kept as skip_l,
//!             then stride-2 conv3x3 (c_l → c_{l+1})
//! fusion      conv3x3(c_L → bottleneck)          GAP taken here
//! decoder.l   ×2 nearest upsample, conv3x3(→ c_l), concat skip_l,
//!             residual block (2·c_l → c_l, 1×1 projection shortcut)
//! output      conv1x1(c_0 → decoder_out_channels)
//! ```
//!
//! Every conv block is conv → ReLU → group norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{
    concat_channels, gap_backward_into, relu_backward, relu_in_place, split_channels, upsample2x,
    upsample2x_backward,
};
use crate::nn::{Conv2d, Grads, GroupNorm, GroupNormCache, ParamSet};
use crate::parallel;
use crate::tensor::FeatureMap;

/// Width of the pooled bottleneck feature consumed by the controller.
pub const GAP_FEATURE_LEN: usize = 256;
/// Channel count of the decoder map consumed by the dynamic head.
pub const DECODER_OUT_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub bottleneck_channels: usize,
    pub decoder_out_channels: usize,
    pub groupnorm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 32,
            levels: 4,
            bottleneck_channels: GAP_FEATURE_LEN,
            decoder_out_channels: DECODER_OUT_CHANNELS,
            groupnorm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.levels == 0 {
            return Err(Error::invalid(
                "in_channels, base_channels and levels must be positive",
            ));
        }
        if self.decoder_out_channels != DECODER_OUT_CHANNELS {
            return Err(Error::invalid(format!(
                "decoder_out_channels must be {DECODER_OUT_CHANNELS}, got {}",
                self.decoder_out_channels
            )));
        }
        if self.bottleneck_channels != GAP_FEATURE_LEN {
            return Err(Error::invalid(format!(
                "bottleneck_channels must be {GAP_FEATURE_LEN}, got {}",
                self.bottleneck_channels
            )));
        }
        let g = self.groupnorm_groups;
        let normalized = (0..=self.levels)
            .map(|l| self.level_channels(l))
            .chain(std::iter::once(self.bottleneck_channels));
        for c in normalized {
            if g == 0 || c % g != 0 {
                return Err(Error::invalid(format!(
                    "groupnorm_groups {g} does not divide {c} channels"
                )));
            }
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

#[derive(Clone, Debug)]
struct ConvBlockTape {
    input: FeatureMap,
    act: FeatureMap,
    norm: GroupNormCache,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(params, rng, &format!("{name}.conv"), cin, cout, 3, stride);
        let norm = GroupNorm::new(params, &format!("{name}.norm"), cout, groups)?;
        Ok(Self { conv, norm })
    }

    fn forward(&self, params: &ParamSet, input: FeatureMap) -> Result<(FeatureMap, ConvBlockTape)> {
        let mut act = self.conv.forward(params, &input)?;
        relu_in_place(&mut act);
        let (y, norm) = self.norm.forward(params, &act);
        Ok((y, ConvBlockTape { input, act, norm }))
    }

    fn backward(
        &self,
        params: &ParamSet,
        tape: &ConvBlockTape,
        dy: &FeatureMap,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let mut d_act = self.norm.backward(params, &tape.norm, dy, grads);
        relu_backward(&tape.act, &mut d_act);
        self.conv
            .backward(params, &tape.input, &d_act, grads, need_input_grad)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: ConvBlock,
    second: ConvBlock,
    shortcut: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct ResTape {
    first: ConvBlockTape,
    second: ConvBlockTape,
}

impl ResBlock {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
    ) -> Result<Self> {
        let first = ConvBlock::new(params, rng, &format!("{name}.res1"), cin, cout, 1, groups)?;
        let second = ConvBlock::new(params, rng, &format!("{name}.res2"), cout, cout, 1, groups)?;
        let shortcut = (cin != cout)
            .then(|| Conv2d::new(params, rng, &format!("{name}.shortcut"), cin, cout, 1, 1));
        Ok(Self {
            first,
            second,
            shortcut,
        })
    }

    fn forward(&self, params: &ParamSet, input: FeatureMap) -> Result<(FeatureMap, ResTape)> {
        let mut skip = match &self.shortcut {
            Some(conv) => conv.forward(params, &input)?,
            None => input.clone(),
        };
        let (h, first) = self.first.forward(params, input)?;
        let (y, second) = self.second.forward(params, h)?;
        skip.add_assign(&y);
        Ok((skip, ResTape { first, second }))
    }

    fn backward(
        &self,
        params: &ParamSet,
        tape: &ResTape,
        dy: &FeatureMap,
        grads: &mut Grads,
    ) -> FeatureMap {
        let dh = self
            .second
            .backward(params, &tape.second, dy, grads, true)
            .expect("input grad requested");
        let mut dx = self
            .first
            .backward(params, &tape.first, &dh, grads, true)
            .expect("input grad requested");
        match &self.shortcut {
            Some(conv) => {
                let ds = conv
                    .backward(params, &tape.first.input, dy, grads, true)
                    .expect("input grad requested");
                dx.add_assign(&ds);
            }
            None => dx.add_assign(dy),
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    res: ResBlock,
    down: ConvBlock,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    level: usize,
    up: ConvBlock,
    res: ResBlock,
}

/// Network layout; the weights live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBlock,
    encoder: Vec<EncoderStage>,
    fusion: ConvBlock,
    /// Execution order: deepest level first.
    decoder: Vec<DecoderStage>,
    output: Conv2d,
}

/// Decoder map `M` and pooled bottleneck feature for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures {
    pub decoder_map: Vec<FeatureMap>,
    pub gap_feature: Vec<Vec<f64>>,
}

/// Intermediate activations of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct BackboneTape {
    stem: ConvBlockTape,
    encoder: Vec<(ResTape, ConvBlockTape)>,
    fusion: ConvBlockTape,
    bottleneck: FeatureMap,
    decoder: Vec<(ConvBlockTape, ResTape)>,
    output_input: FeatureMap,
}

impl BackboneTape {
    /// The fused bottleneck map whose spatial mean is the GAP feature.
    pub fn bottleneck(&self) -> &FeatureMap {
        &self.bottleneck
    }
}

/// Builds a backbone with its own parameter set, initialized from `seed`.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamSet)> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::new(config, &mut params, &mut rng)?;
    Ok((backbone, params))
}

impl Backbone {
    pub fn new(config: &BackboneConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let g = config.groupnorm_groups;
        let c = |l| config.level_channels(l);
        let stem = ConvBlock::new(params, rng, "stem", config.in_channels, c(0), 1, g)?;
        let mut encoder = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let res = ResBlock::new(params, rng, &format!("encoder.{l}"), c(l), c(l), g)?;
            let down = ConvBlock::new(params, rng, &format!("encoder.{l}.down"), c(l), c(l + 1), 2, g)?;
            encoder.push(EncoderStage { res, down });
        }
        let fusion = ConvBlock::new(
            params,
            rng,
            "fusion",
            c(config.levels),
            config.bottleneck_channels,
            1,
            g,
        )?;
        let mut decoder = Vec::with_capacity(config.levels);
        let mut current = config.bottleneck_channels;
        for l in (0..config.levels).rev() {
            let up = ConvBlock::new(params, rng, &format!("decoder.{l}.up"), current, c(l), 1, g)?;
            let res = ResBlock::new(params, rng, &format!("decoder.{l}"), 2 * c(l), c(l), g)?;
            decoder.push(DecoderStage { level: l, up, res });
            current = c(l);
        }
        let output = Conv2d::new(params, rng, "output", c(0), config.decoder_out_channels, 1, 1);
        Ok(Self {
            config: config.clone(),
            stem,
            encoder,
            fusion,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// The final projection producing `M`.
    pub fn output_projection(&self) -> &Conv2d {
        &self.output
    }

    pub fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.config.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {} input channels, got {}",
                self.config.in_channels, x.channels
            )));
        }
        let m = self.config.spatial_multiple();
        if x.height == 0 || x.width == 0 || !x.height.is_multiple_of(m) || !x.width.is_multiple_of(m) {
            return Err(Error::shape(format!(
                "input {}x{} is not divisible by 2^levels = {m}",
                x.height, x.width
            )));
        }
        if !x.is_finite() {
            return Err(Error::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Forward pass of one sample, returning `M`, the GAP feature and the tape
    /// needed by [`Backbone::backward`].
    pub fn forward_sample(
        &self,
        params: &ParamSet,
        x: FeatureMap,
    ) -> Result<(FeatureMap, Vec<f64>, BackboneTape)> {
        self.check_input(&x)?;
        let (mut h, stem) = self.stem.forward(params, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let (skip, res) = stage.res.forward(params, h)?;
            let (down, down_tape) = stage.down.forward(params, skip.clone())?;
            skips.push(skip);
            encoder.push((res, down_tape));
            h = down;
        }
        let (bottleneck, fusion) = self.fusion.forward(params, h)?;
        let gap = bottleneck.channel_means();
        let mut h = bottleneck.clone();
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for stage in &self.decoder {
            let (up, up_tape) = stage.up.forward(params, upsample2x(&h))?;
            let merged = concat_channels(&up, &skips[stage.level]);
            let (out, res) = stage.res.forward(params, merged)?;
            decoder.push((up_tape, res));
            h = out;
        }
        let m = self.output.forward(params, &h)?;
        let tape = BackboneTape {
            stem,
            encoder,
            fusion,
            bottleneck,
            decoder,
            output_input: h,
        };
        Ok((m, gap, tape))
    }

    /// Batched inference; samples are independent so the batch is mapped in
    /// parallel.
    pub fn forward(&self, params: &ParamSet, images: &[FeatureMap]) -> Result<BackboneFeatures> {
        let outs = parallel::try_map(images, |_, x| {
            self.forward_sample(params, x.clone()).map(|(m, gap, _)| (m, gap))
        })?;
        let (decoder_map, gap_feature) = outs.into_iter().unzip();
        Ok(BackboneFeatures {
            decoder_map,
            gap_feature,
        })
    }

    /// Backpropagates gradients of `M` and of the GAP feature through the
    /// network, accumulating parameter gradients. Returns the input gradient
    /// when requested.
    pub fn backward(
        &self,
        params: &ParamSet,
        tape: &BackboneTape,
        d_decoder_map: &FeatureMap,
        d_gap: &[f64],
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let mut d = self
            .output
            .backward(params, &tape.output_input, d_decoder_map, grads, true)
            .expect("input grad requested");
        let mut d_skips: Vec<Option<FeatureMap>> = vec![None; self.encoder.len()];
        for (stage, (up_tape, res_tape)) in self.decoder.iter().zip(&tape.decoder).rev() {
            let d_merged = stage.res.backward(params, res_tape, &d, grads);
            let c = self.config.level_channels(stage.level);
            let (d_up, d_skip) = split_channels(&d_merged, c);
            d_skips[stage.level] = Some(d_skip);
            let d_upsampled = stage
                .up
                .backward(params, up_tape, &d_up, grads, true)
                .expect("input grad requested");
            d = upsample2x_backward(&d_upsampled);
        }
        gap_backward_into(d_gap, &mut d);
        d = self
            .fusion
            .backward(params, &tape.fusion, &d, grads, true)
            .expect("input grad requested");
        for (l, (stage, (res_tape, down_tape))) in
            self.encoder.iter().zip(&tape.encoder).enumerate().rev()
        {
            let mut d_skip = stage
                .down
                .backward(params, down_tape, &d, grads, true)
                .expect("input grad requested");
            d_skip.add_assign(d_skips[l].as_ref().expect("decoder visited every level"));
            d = stage.res.backward(params, res_tape, &d_skip, grads);
        }
        self.stem
            .backward(params, &tape.stem, &d, grads, need_input_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config(levels: usize) -> BackboneConfig {
        BackboneConfig {
            base_channels: 8,
            levels,
            groupnorm_groups: 4,
            ..BackboneConfig::default()
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        FeatureMap::from_vec(3, h, w, data).unwrap()
    }

    #[test]
    fn output_shapes_follow_input() {
        let (net, params) = build_backbone(&small_config(2), 1).unwrap();
        for (h, w) in [(16, 16), (8, 24)] {
            let (m, gap, tape) = net.forward_sample(&params, random_image(0, h, w)).unwrap();
            assert_eq!((m.channels, m.height, m.width), (8, h, w));
            assert_eq!(gap.len(), 256);
            assert_eq!(tape.bottleneck().height, h / 4);
        }
    }

    #[test]
    fn default_config_gap_width_and_divisibility() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.spatial_multiple(), 16);
        assert_eq!(48 % cfg.spatial_multiple(), 0);
        let (net, _) = build_backbone(&small_config(4), 0).unwrap();
        let err = net.check_input(&random_image(0, 50, 50)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        net.check_input(&random_image(0, 48, 48)).unwrap();
    }

    #[test]
    fn rejects_non_finite_input() {
        let (net, params) = build_backbone(&small_config(2), 1).unwrap();
        let mut x = random_image(0, 8, 8);
        x.data[5] = f64::NAN;
        assert!(matches!(net.forward_sample(&params, x), Err(Error::Validation(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config(2);
        cfg.decoder_out_channels = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(2);
        cfg.groupnorm_groups = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_output_projection_gives_zero_map() {
        let (net, mut params) = build_backbone(&small_config(2), 5).unwrap();
        params.get_mut(net.output.weight).fill(0.0);
        params.get_mut(net.output.bias).fill(0.0);
        let (m, _, _) = net.forward_sample(&params, random_image(9, 8, 8)).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_match_single_forwards() {
        let (net, params) = build_backbone(&small_config(2), 2).unwrap();
        let a = random_image(1, 8, 8);
        let b = random_image(2, 8, 8);
        let feats = net.forward(&params, &[a.clone(), a.clone(), b.clone()]).unwrap();
        assert_eq!(feats.decoder_map[0], feats.decoder_map[1]);
        assert_eq!(feats.gap_feature[0], feats.gap_feature[1]);
        let (mb, gb, _) = net.forward_sample(&params, b).unwrap();
        assert_eq!(feats.decoder_map[2], mb);
        assert_eq!(feats.gap_feature[2], gb);
    }

    #[test]
    fn gap_is_spatial_mean_of_bottleneck() {
        let (net, params) = build_backbone(&small_config(2), 3).unwrap();
        let (_, gap, tape) = net.forward_sample(&params, random_image(4, 16, 16)).unwrap();
        let b = tape.bottleneck();
        for (c, &g) in gap.iter().enumerate() {
            let mut sum = 0.0;
            for y in 0..b.height {
                for x in 0..b.width {
                    sum += b.at(c, y, x);
                }
            }
            let mean = sum / (b.height * b.width) as f64;
            assert!((mean - g).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (net, params) = build_backbone(&small_config(2), 7).unwrap();
        let x = random_image(8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gap_w: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = sum(M) + <gap_w, gap>
        let loss = |x: FeatureMap| {
            let (m, gap, _) = net.forward_sample(&params, x).unwrap();
            m.data.iter().sum::<f64>() + gap.iter().zip(&gap_w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (m, _, tape) = net.forward_sample(&params, x.clone()).unwrap();
        let dm = FeatureMap::from_vec(8, 8, 8, vec![1.0; m.data.len()]).unwrap();
        let mut grads = Grads::zeros_like(&params);
        let dx = net.backward(&params, &tape, &dm, &gap_w, &mut grads, true).unwrap();
        let h = 1e-6;
        let (mut num_sq, mut diff_sq, mut ana_sq) = (0.0, 0.0, 0.0);
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (loss(xp) - loss(xm)) / (2.0 * h);
            num_sq += num * num;
            ana_sq += dx.data[i] * dx.data[i];
            diff_sq += (num - dx.data[i]).powi(2);
        }
        let rel = diff_sq.sqrt() / num_sq.sqrt().max(ana_sq.sqrt());
        assert!(rel < 1e-3, "relative error {rel}");
    }
}
