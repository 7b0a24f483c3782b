//! Residual U-Net backbone: 3x3 pre-activation residual blocks with group
//! normalization, stride-2 downsampling, nearest-neighbour upsampling and summed
//! skip connections. Produces the bottleneck feature map (after its own group
//! normalization and ReLU) and the 8-channel decoder output consumed by the
//! dynamic head.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, upsample_nearest2, upsample_nearest2_backward, Conv2d, Gradients, GroupNorm,
    GroupNormCache, ParamSet, Scalar,
};

/// Channel count of the decoder output. Fixed by the 162-value dynamic head.
pub const DECODER_OUT_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channel_ladder: Vec<usize>,
    pub groupnorm_groups: usize,
    pub decoder_out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            channel_ladder: vec![32, 64, 128, 256],
            groupnorm_groups: 8,
            decoder_out_channels: DECODER_OUT_CHANNELS,
        }
    }
}

impl BackboneConfig {
    pub fn tiny(ladder: &[usize], groups: usize) -> Self {
        BackboneConfig {
            channel_ladder: ladder.to_vec(),
            groupnorm_groups: groups,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("backbone.in_channels must be positive".into()));
        }
        if self.channel_ladder.is_empty() || self.channel_ladder.contains(&0) {
            return Err(Error::Config(
                "backbone.channel_ladder must be a nonempty list of positive widths".into(),
            ));
        }
        if self.groupnorm_groups == 0 {
            return Err(Error::Config("backbone.groupnorm_groups must be positive".into()));
        }
        if let Some(w) = self
            .channel_ladder
            .iter()
            .find(|&&w| w % self.groupnorm_groups != 0)
        {
            return Err(Error::Config(format!(
                "backbone width {w} is not divisible by {} groups",
                self.groupnorm_groups
            )));
        }
        if self.decoder_out_channels != DECODER_OUT_CHANNELS {
            return Err(Error::Config(format!(
                "backbone.decoder_out_channels must be {DECODER_OUT_CHANNELS}"
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_ladder.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channel_ladder.last().expect("validated ladder")
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {m} for a {}-level ladder",
                self.levels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
}

struct ResBlockCache<T> {
    gn1: GroupNormCache<T>,
    r1: Array3<T>,
    gn2: GroupNormCache<T>,
    r2: Array3<T>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(params, &format!("{name}.gn1"), channels, groups),
            conv1: Conv2d::new(params, &format!("{name}.conv1"), channels, channels, 3, 1, rng),
            gn2: GroupNorm::new(params, &format!("{name}.gn2"), channels, groups),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), channels, channels, 3, 1, rng),
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: ArrayView3<T>) -> (Array3<T>, ResBlockCache<T>) {
        let (a1, gn1) = self.gn1.forward(p, x);
        let r1 = relu(&a1);
        let h1 = self.conv1.forward(p, r1.view());
        let (a2, gn2) = self.gn2.forward(p, h1.view());
        let r2 = relu(&a2);
        let out = self.conv2.forward(p, r2.view()) + x;
        (out, ResBlockCache { gn1, r1, gn2, r2 })
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        cache: &ResBlockCache<T>,
        dout: &Array3<T>,
        grads: &mut Gradients<T>,
    ) -> Array3<T> {
        let dr2 = self
            .conv2
            .backward(p, cache.r2.view(), dout.view(), grads, true)
            .expect("input grad requested");
        let dh1 = self
            .gn2
            .backward(p, &cache.gn2, relu_backward(&cache.r2, &dr2).view(), grads);
        let dr1 = self
            .conv1
            .backward(p, cache.r1.view(), dh1.view(), grads, true)
            .expect("input grad requested");
        let dx = self
            .gn1
            .backward(p, &cache.gn1, relu_backward(&cache.r1, &dr1).view(), grads);
        dx + dout
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up_conv: Conv2d,
    block: ResBlock,
}

/// Layer layout of the backbone; weights live in the model's [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    encoder: Vec<ResBlock>,
    down: Vec<Conv2d>,
    decoder: Vec<DecoderStage>,
    out_norm: GroupNorm,
    fusion: Conv2d,
    bottleneck_norm: GroupNorm,
}

/// Intermediate activations of one sample, kept for the backward pass.
pub struct BackboneCache<T> {
    input: Array3<T>,
    enc_out: Vec<Array3<T>>,
    enc_cache: Vec<ResBlockCache<T>>,
    up: Vec<Array3<T>>,
    dec_cache: Vec<ResBlockCache<T>>,
    out_norm: GroupNormCache<T>,
    out_act: Array3<T>,
    bottleneck_norm: GroupNormCache<T>,
    bottleneck: Array3<T>,
}

/// Per-sample backbone outputs.
pub struct SampleFeatures<T> {
    pub bottleneck: Array3<T>,
    pub decoder_output: Array3<T>,
}

/// Batched backbone outputs: `bottleneck` is `N x C_b x h x w` (pre-pooling),
/// `decoder_output` is `N x 8 x H x W`.
#[derive(Debug, Clone)]
pub struct BackboneFeatures<T> {
    pub bottleneck: Array4<T>,
    pub decoder_output: Array4<T>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &BackboneConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let ladder = &config.channel_ladder;
        let g = config.groupnorm_groups;
        let stem = Conv2d::new(params, "backbone.stem", config.in_channels, ladder[0], 3, 1, rng);
        let mut encoder = vec![ResBlock::new(params, "backbone.enc.0", ladder[0], g, rng)];
        let mut down = Vec::new();
        for l in 1..ladder.len() {
            down.push(Conv2d::new(
                params,
                &format!("backbone.down.{}", l - 1),
                ladder[l - 1],
                ladder[l],
                3,
                2,
                rng,
            ));
            encoder.push(ResBlock::new(params, &format!("backbone.enc.{l}"), ladder[l], g, rng));
        }
        // Decoder stages run from the deepest level upward; stage index i
        // produces level `L - 2 - i`.
        let mut decoder = Vec::new();
        for l in (1..ladder.len()).rev() {
            let level = l - 1;
            decoder.push(DecoderStage {
                up_conv: Conv2d::new(params, &format!("backbone.up.{level}"), ladder[l], ladder[level], 3, 1, rng),
                block: ResBlock::new(params, &format!("backbone.dec.{level}"), ladder[level], g, rng),
            });
        }
        let out_norm = GroupNorm::new(params, "backbone.out_norm", ladder[0], g);
        let fusion = Conv2d::new(
            params,
            "backbone.fusion",
            ladder[0],
            config.decoder_out_channels,
            3,
            1,
            rng,
        );
        let bottleneck_norm = GroupNorm::new(params, "backbone.bottleneck_norm", config.bottleneck_channels(), g);
        Ok(Backbone {
            config: config.clone(),
            stem,
            encoder,
            down,
            decoder,
            out_norm,
            fusion,
            bottleneck_norm,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward_sample<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        image: ArrayView3<T>,
    ) -> (SampleFeatures<T>, BackboneCache<T>) {
        let mut stem_out = Some(self.stem.forward(p, image));
        let mut enc_out: Vec<Array3<T>> = Vec::with_capacity(self.encoder.len());
        let mut enc_cache = Vec::with_capacity(self.encoder.len());
        for (l, block) in self.encoder.iter().enumerate() {
            let x = if l == 0 {
                stem_out.take().expect("first level")
            } else {
                self.down[l - 1].forward(p, enc_out[l - 1].view())
            };
            let (y, c) = block.forward(p, x.view());
            enc_out.push(y);
            enc_cache.push(c);
        }
        let levels = self.encoder.len();
        let mut y = enc_out[levels - 1].clone();
        let mut up = Vec::with_capacity(self.decoder.len());
        let mut dec_cache = Vec::with_capacity(self.decoder.len());
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = levels - 2 - i;
            let u = upsample_nearest2(y.view());
            let summed = stage.up_conv.forward(p, u.view()) + &enc_out[level];
            let (out, c) = stage.block.forward(p, summed.view());
            up.push(u);
            dec_cache.push(c);
            y = out;
        }
        let (a, out_norm) = self.out_norm.forward(p, y.view());
        let out_act = relu(&a);
        let decoder_output = self.fusion.forward(p, out_act.view());
        let (b, bottleneck_norm) = self.bottleneck_norm.forward(p, enc_out[levels - 1].view());
        let bottleneck = relu(&b);
        let features = SampleFeatures {
            bottleneck: bottleneck.clone(),
            decoder_output,
        };
        let cache = BackboneCache {
            input: image.to_owned(),
            enc_out,
            enc_cache,
            up,
            dec_cache,
            out_norm,
            out_act,
            bottleneck_norm,
            bottleneck,
        };
        (features, cache)
    }

    /// Backpropagates gradients arriving at the decoder output and at the
    /// bottleneck (through the pooled controller input).
    pub fn backward_sample<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        cache: &BackboneCache<T>,
        d_decoder_output: &Array3<T>,
        d_bottleneck: &Array3<T>,
        grads: &mut Gradients<T>,
    ) {
        let levels = self.encoder.len();
        let d_act = self
            .fusion
            .backward(p, cache.out_act.view(), d_decoder_output.view(), grads, true)
            .expect("input grad requested");
        let mut dy = self.out_norm.backward(
            p,
            &cache.out_norm,
            relu_backward(&cache.out_act, &d_act).view(),
            grads,
        );
        let mut d_enc: Vec<Option<Array3<T>>> = (0..levels).map(|_| None).collect();
        for (i, stage) in self.decoder.iter().enumerate().rev() {
            let level = levels - 2 - i;
            let d_sum = stage.block.backward(p, &cache.dec_cache[i], &dy, grads);
            let du = stage
                .up_conv
                .backward(p, cache.up[i].view(), d_sum.view(), grads, true)
                .expect("input grad requested");
            d_enc[level] = Some(d_sum);
            dy = upsample_nearest2_backward(du.view());
        }
        // `dy` now holds the decoder-path gradient of the deepest encoder output.
        let d_deep = self.bottleneck_norm.backward(
            p,
            &cache.bottleneck_norm,
            relu_backward(&cache.bottleneck, d_bottleneck).view(),
            grads,
        );
        let mut carry = dy + d_deep;
        for l in (0..levels).rev() {
            let d_out = match d_enc[l].take() {
                Some(skip) if l != levels - 1 => carry + &skip,
                _ => carry,
            };
            let d_in = self.encoder[l].backward(p, &cache.enc_cache[l], &d_out, grads);
            if l == 0 {
                self.stem.backward(p, cache.input.view(), d_in.view(), grads, false);
                break;
            }
            carry = self.down[l - 1]
                .backward(p, cache.enc_out[l - 1].view(), d_in.view(), grads, true)
                .expect("input grad requested");
        }
    }
}

/// Batched forward pass over `N x C x H x W` images.
pub fn backbone_forward<T: Scalar>(
    backbone: &Backbone,
    params: &ParamSet<T>,
    images: ArrayView4<T>,
) -> Result<BackboneFeatures<T>> {
    let (n, c, h, w) = images.dim();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    backbone.config().check_input(c, h, w)?;
    if images.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in backbone input".into()));
    }
    let outs: Vec<SampleFeatures<T>> = images
        .outer_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|img| backbone.forward_sample(params, img).0)
        .collect();
    let bottleneck = ndarray::stack(
        Axis(0),
        &outs.iter().map(|o| o.bottleneck.view()).collect::<Vec<_>>(),
    )
    .expect("uniform shapes");
    let decoder_output = ndarray::stack(
        Axis(0),
        &outs.iter().map(|o| o.decoder_output.view()).collect::<Vec<_>>(),
    )
    .expect("uniform shapes");
    Ok(BackboneFeatures {
        bottleneck,
        decoder_output,
    })
}
