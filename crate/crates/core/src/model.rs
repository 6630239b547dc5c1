//! The full network: backbone → controller → dynamic head, sharing one
//! parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::datamodel::{Mask, Registries, Sample};
use crate::dynamic_head::{
    argmax_mask, head_backward_sample, head_forward_sample, Controller, HEAD_PARAM_COUNT,
};
use crate::error::{Error, Result};
use crate::losses_metrics::{boundary_weight_map_with, total_loss_and_grad, LossParts, WeightMap};
use crate::nn::{Grads, ParamSet};
use crate::parallel;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Side length of the square patches the model is trained and run on.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            input_size: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.backbone.spatial_multiple()) {
            return Err(Error::invalid(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.backbone.spatial_multiple()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OmniSeg {
    config: ModelConfig,
    registries: Registries,
    backbone: Backbone,
    controller: Controller,
    params: ParamSet,
}

/// Loss and parameter gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub loss: LossParts,
    pub grads: Grads,
    pub input_grad: Option<FeatureMap>,
}

impl OmniSeg {
    pub fn new(config: ModelConfig, registries: Registries, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&config.backbone, &mut params, &mut rng)?;
        let controller = Controller::new(
            &mut params,
            &mut rng,
            config.backbone.bottleneck_channels,
            registries.classes.len(),
            registries.scales.len(),
        );
        Ok(Self {
            config,
            registries,
            backbone,
            controller,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registries(&self) -> &Registries {
        &self.registries
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Logits of one channels-first image for the given task and scale.
    pub fn logits(&self, image: FeatureMap, task_id: usize, scale_id: usize) -> Result<FeatureMap> {
        let task = self.registries.classes.encode(task_id)?;
        let scale = self.registries.scales.encode(scale_id)?;
        let (m, gap, _) = self.backbone.forward_sample(&self.params, image)?;
        let omega = self.controller.forward_row(&self.params, &gap, &task, &scale)?;
        assert_eq!(omega.len(), HEAD_PARAM_COUNT);
        head_forward_sample(&m, &omega).map(|(l, _)| l)
    }

    pub fn predict_mask(&self, sample: &Sample) -> Result<Mask> {
        let image = sample_tensor(sample)?;
        let logits = self.logits(image, sample.task_id, sample.scale_id)?;
        Ok(argmax_mask(&logits))
    }

    /// Masks for many samples, evaluated independently.
    pub fn predict_masks(&self, samples: &[Sample]) -> Result<Vec<Mask>> {
        parallel::try_map(samples, |_, s| self.predict_mask(s))
    }

    /// Forward and backward pass of one example.
    #[allow(clippy::too_many_arguments)]
    pub fn gradient(
        &self,
        image: FeatureMap,
        mask: &Mask,
        weights: &WeightMap,
        task_id: usize,
        scale_id: usize,
        need_input_grad: bool,
    ) -> Result<SampleGradient> {
        let task = self.registries.classes.encode(task_id)?;
        let scale = self.registries.scales.encode(scale_id)?;
        let (m, gap, tape) = self.backbone.forward_sample(&self.params, image)?;
        let fused = self.controller.fused_input(&gap, &task, &scale)?;
        let omega = self.controller.forward_fused(&self.params, &fused);
        let (logits, head_cache) = head_forward_sample(&m, &omega)?;
        let (loss, d_logits) = total_loss_and_grad(&logits, mask, weights)?;

        let mut grads = Grads::zeros_like(&self.params);
        let (d_m, d_omega) = head_backward_sample(&m, &omega, &head_cache, &d_logits)?;
        let d_gap = self
            .controller
            .backward_row(&self.params, &fused, &d_omega, &mut grads);
        let input_grad =
            self.backbone
                .backward(&self.params, &tape, &d_m, &d_gap, &mut grads, need_input_grad);
        Ok(SampleGradient {
            loss,
            grads,
            input_grad,
        })
    }

    /// Mean loss and mean gradient over a batch. Samples are processed in
    /// parallel and summed in batch order.
    pub fn batch_gradient(&self, batch: &[Sample], boundary_weight: f64) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let per_sample = parallel::try_map(batch, |_, s| {
            let weights = boundary_weight_map_with(&s.mask, boundary_weight);
            self.gradient(sample_tensor(s)?, &s.mask, &weights, s.task_id, s.scale_id, false)
        })?;
        let mut iter = per_sample.into_iter();
        let first = iter.next().expect("non-empty batch");
        let mut loss = first.loss.total();
        let mut grads = first.grads;
        for g in iter {
            loss += g.loss.total();
            grads.add_assign(&g.grads);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }
}

/// Channels-first network input for a sample.
pub fn sample_tensor(sample: &Sample) -> Result<FeatureMap> {
    FeatureMap::from_vec(3, sample.height(), sample.width(), sample.image.to_chw())
}
