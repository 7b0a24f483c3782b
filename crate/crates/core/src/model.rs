//! The full class-conditioned network: backbone, controller and dynamic head.

use ndarray::{Array1, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::dynamic_mapping::{
    head_backward, head_forward, partition_head_params, Controller, ControllerConfig, DynamicHeadParams, HeadCache,
    Prediction, HEAD_PARAM_COUNT,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, LossConfig};
use crate::nn::{spatial_mean, Gradients, ParamSet, Scalar};
use crate::registry::{encode_class, ClassVector};

/// Number of scalar values a component carries.
pub trait ParameterCount {
    fn parameter_count(&self) -> usize;
}

impl<T: Scalar> ParameterCount for ParamSet<T> {
    fn parameter_count(&self) -> usize {
        self.count()
    }
}

impl<T: Scalar> ParameterCount for DynamicHeadParams<T> {
    fn parameter_count(&self) -> usize {
        self.scalar_count()
    }
}

impl ParameterCount for ControllerConfig {
    fn parameter_count(&self) -> usize {
        ControllerConfig::parameter_count(self)
    }
}

pub fn count_parameters(item: &impl ParameterCount) -> usize {
    item.parameter_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    pub backbone: usize,
    pub controller: usize,
    pub dynamic_head: usize,
    pub total: usize,
    /// One backbone per class, the layout of a multi-network baseline.
    pub multi_network_equivalent: usize,
}

#[derive(Debug, Clone)]
pub struct OmniSeg<T> {
    backbone: Backbone,
    controller: Controller,
    params: ParamSet<T>,
    num_classes: usize,
}

struct SampleCache<T> {
    backbone: BackboneCache<T>,
    decoder_output: Array3<T>,
    bottleneck_area: usize,
    bottleneck_dim: (usize, usize, usize),
    fused: Array1<T>,
    head: DynamicHeadParams<T>,
    head_cache: HeadCache<T>,
}

/// Result of a single-sample forward pass.
pub struct SampleOutput<T> {
    pub logits: Array3<T>,
    pub omega: Array1<T>,
}

impl<T: Scalar> OmniSeg<T> {
    pub fn new(config: &BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(config, &mut params, &mut rng)?;
        let controller = Controller::new(
            ControllerConfig::new(config.bottleneck_channels(), num_classes),
            &mut params,
            &mut rng,
        );
        Ok(OmniSeg {
            backbone,
            controller,
            params,
            num_classes,
        })
    }

    /// Builds the layout for `config` and installs `params`, which must match
    /// it name-for-name and shape-for-shape.
    pub fn with_params(config: &BackboneConfig, num_classes: usize, params: ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config, num_classes, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, expected), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || expected.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {got_name} {:?}",
                    expected.shape(),
                    got.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_breakdown(&self) -> ParameterBreakdown {
        let backbone = self.params.count_prefix("backbone.");
        let controller = self.params.count_prefix("controller.");
        ParameterBreakdown {
            backbone,
            controller,
            dynamic_head: HEAD_PARAM_COUNT,
            total: self.params.count(),
            multi_network_equivalent: self.num_classes * backbone,
        }
    }

    fn class_vector(&self, class_id: usize) -> Result<ClassVector> {
        encode_class(class_id, self.num_classes)
    }

    fn forward_cached(&self, image: ArrayView3<T>, class_vec: &ClassVector) -> (SampleOutput<T>, SampleCache<T>) {
        let (features, backbone) = self.backbone.forward_sample(&self.params, image);
        let pooled = spatial_mean(features.bottleneck.view());
        let (fused, omega) = self.controller.forward_sample(&self.params, pooled.view(), class_vec);
        let head = partition_head_params(omega.as_slice().expect("contiguous")).expect("162 outputs");
        let (logits, head_cache) = head_forward(features.decoder_output.view(), &head);
        let (_, bh, bw) = features.bottleneck.dim();
        let cache = SampleCache {
            backbone,
            bottleneck_dim: features.bottleneck.dim(),
            bottleneck_area: bh * bw,
            decoder_output: features.decoder_output,
            fused,
            head,
            head_cache,
        };
        (SampleOutput { logits, omega }, cache)
    }

    fn backward_cached(&self, cache: &SampleCache<T>, dlogits: ArrayView3<T>) -> Gradients<T> {
        let mut grads = self.params.zero_grads();
        let (d_decoder, d_head) = head_backward(cache.decoder_output.view(), &cache.head, &cache.head_cache, dlogits);
        let d_omega = Array1::from(d_head.flatten());
        let d_fused = self
            .controller
            .backward_sample(&self.params, &cache.fused, &d_omega, &mut grads);
        let area = T::of(cache.bottleneck_area as f64);
        let (c, h, w) = cache.bottleneck_dim;
        let d_bottleneck = Array3::from_shape_fn((c, h, w), |(ch, _, _)| d_fused[ch] / area);
        self.backbone
            .backward_sample(&self.params, &cache.backbone, &d_decoder, &d_bottleneck, &mut grads);
        grads
    }

    /// Single-sample forward pass returning logits and the controller output.
    pub fn forward_sample(&self, image: ArrayView3<T>, class_id: usize) -> Result<SampleOutput<T>> {
        let (c, h, w) = image.dim();
        self.backbone_config().check_input(c, h, w)?;
        let cv = self.class_vector(class_id)?;
        Ok(self.forward_cached(image, &cv).0)
    }

    fn check_batch(&self, images: &ArrayView4<T>, class_ids: &[usize]) -> Result<Vec<ClassVector>> {
        let (n, c, h, w) = images.dim();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if class_ids.len() != n {
            return Err(Error::Shape(format!("{} class ids for a batch of {n}", class_ids.len())));
        }
        self.backbone_config().check_input(c, h, w)?;
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input".into()));
        }
        class_ids.iter().map(|&id| self.class_vector(id)).collect()
    }

    /// Class-conditioned prediction with one class id per sample.
    pub fn predict(&self, images: ArrayView4<T>, class_ids: &[usize]) -> Result<Prediction<T>> {
        let cvs = self.check_batch(&images, class_ids)?;
        let logits: Vec<Array3<T>> = images
            .outer_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .zip(cvs.par_iter())
            .map(|(img, cv)| self.forward_cached(img, cv).0.logits)
            .collect();
        let views: Vec<_> = logits.iter().map(|l| l.view()).collect();
        Ok(Prediction::from_logits(ndarray::stack(Axis(0), &views).expect("uniform shapes")))
    }

    /// Loss of a batch and its gradient with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        images: ArrayView4<T>,
        masks: ArrayView3<u8>,
        class_ids: &[usize],
        loss: &LossConfig,
    ) -> Result<(f64, Gradients<T>)> {
        let cvs = self.check_batch(&images, class_ids)?;
        let outs: Vec<(SampleOutput<T>, SampleCache<T>)> = images
            .outer_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .zip(cvs.par_iter())
            .map(|(img, cv)| self.forward_cached(img, cv))
            .collect();
        let views: Vec<_> = outs.iter().map(|(o, _)| o.logits.view()).collect();
        let logits: Array4<T> = ndarray::stack(Axis(0), &views).expect("uniform shapes");
        let (value, dlogits) = total_loss_with_grad(logits.view(), masks, loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let per_sample: Vec<Gradients<T>> = outs
            .par_iter()
            .enumerate()
            .map(|(i, (_, cache))| self.backward_cached(cache, dlogits.index_axis(Axis(0), i)))
            .collect();
        let mut iter = per_sample.into_iter();
        let mut grads = iter.next().expect("nonempty batch");
        for g in iter {
            grads.add_assign(&g);
        }
        Ok((value, grads))
    }

    pub fn cast<U: Scalar>(&self) -> OmniSeg<U> {
        OmniSeg {
            backbone: self.backbone.clone(),
            controller: self.controller.clone(),
            params: self.params.cast(),
            num_classes: self.num_classes,
        }
    }
}
