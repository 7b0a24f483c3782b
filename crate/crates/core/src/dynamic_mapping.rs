//! Class-aware controller and the per-sample dynamic head.
//!
//! The pooled bottleneck feature is concatenated with the one-hot class vector
//! and mapped by a single 1x1 convolution (an affine map) to 162 values. Those
//! values are the weights and biases of a three-layer 1x1 convolutional head
//! (8 -> 8 -> 8 -> 2) applied to the decoder output of the same sample.
//!
//! Flat layout of the 162 values: `[w1 (8x8), b1 (8), w2 (8x8), b2 (8), w3 (2x8), b3 (2)]`,
//! weights row-major as `out x in`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DECODER_OUT_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, Gradients, ParamId, ParamSet, Scalar};
use crate::registry::ClassVector;

pub const HEAD_HIDDEN: usize = 8;
pub const HEAD_OUT: usize = 2;
/// Scalar count of the dynamic head: (8*8+8) + (8*8+8) + (2*8+2).
pub const HEAD_PARAM_COUNT: usize = 162;

/// Scale of the controller weights relative to fan-in initialization.
pub const CONTROLLER_WEIGHT_GAIN: f64 = 0.1;

const W1: usize = HEAD_HIDDEN * DECODER_OUT_CHANNELS;
const W2: usize = HEAD_HIDDEN * HEAD_HIDDEN;
const W3: usize = HEAD_OUT * HEAD_HIDDEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub bottleneck_channels: usize,
    pub num_classes: usize,
    pub out_dim: usize,
}

impl ControllerConfig {
    pub fn new(bottleneck_channels: usize, num_classes: usize) -> Self {
        ControllerConfig {
            bottleneck_channels,
            num_classes,
            out_dim: HEAD_PARAM_COUNT,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.bottleneck_channels + self.num_classes
    }

    /// Weight plus bias scalars of the controller layer.
    pub fn parameter_count(&self) -> usize {
        self.input_dim() * self.out_dim + self.out_dim
    }
}

/// Weights of the three dynamic 1x1 convolutions, stored as `out x in` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicHeadParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub w3: Array2<T>,
    pub b3: Array1<T>,
}

impl<T: Scalar> DynamicHeadParams<T> {
    pub fn zeros() -> Self {
        DynamicHeadParams {
            w1: Array2::zeros((HEAD_HIDDEN, DECODER_OUT_CHANNELS)),
            b1: Array1::zeros(HEAD_HIDDEN),
            w2: Array2::zeros((HEAD_HIDDEN, HEAD_HIDDEN)),
            b2: Array1::zeros(HEAD_HIDDEN),
            w3: Array2::zeros((HEAD_OUT, HEAD_HIDDEN)),
            b3: Array1::zeros(HEAD_OUT),
        }
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn kaiming<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let w = |o: usize, i: usize, rng: &mut R| {
            kaiming_normal::<T, R>(&[o, i], i, rng)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d")
        };
        DynamicHeadParams {
            w1: w(HEAD_HIDDEN, DECODER_OUT_CHANNELS, rng),
            b1: Array1::zeros(HEAD_HIDDEN),
            w2: w(HEAD_HIDDEN, HEAD_HIDDEN, rng),
            b2: Array1::zeros(HEAD_HIDDEN),
            w3: w(HEAD_OUT, HEAD_HIDDEN, rng),
            b3: Array1::zeros(HEAD_OUT),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    /// Inverse of [`partition_head_params`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(HEAD_PARAM_COUNT);
        for part in [&self.w1.view().into_dyn(), &self.b1.view().into_dyn(), &self.w2.view().into_dyn(),
            &self.b2.view().into_dyn(), &self.w3.view().into_dyn(), &self.b3.view().into_dyn()]
        {
            out.extend(part.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

pub fn partition_head_params<T: Scalar>(omega: &[T]) -> Result<DynamicHeadParams<T>> {
    if omega.len() != HEAD_PARAM_COUNT {
        return Err(Error::Shape(format!(
            "dynamic head needs {HEAD_PARAM_COUNT} values, got {}",
            omega.len()
        )));
    }
    let mut offset = 0;
    let mut take = |n: usize| {
        let part = &omega[offset..offset + n];
        offset += n;
        part.to_vec()
    };
    let w1 = Array2::from_shape_vec((HEAD_HIDDEN, DECODER_OUT_CHANNELS), take(W1)).expect("sized");
    let b1 = Array1::from(take(HEAD_HIDDEN));
    let w2 = Array2::from_shape_vec((HEAD_HIDDEN, HEAD_HIDDEN), take(W2)).expect("sized");
    let b2 = Array1::from(take(HEAD_HIDDEN));
    let w3 = Array2::from_shape_vec((HEAD_OUT, HEAD_HIDDEN), take(W3)).expect("sized");
    let b3 = Array1::from(take(HEAD_OUT));
    Ok(DynamicHeadParams { w1, b1, w2, b2, w3, b3 })
}

/// Two-channel head output. Channel 0 is background, channel 1 foreground.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub logits: Array4<T>,
    pub probabilities: Array4<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn from_logits(logits: Array4<T>) -> Self {
        let probabilities = softmax2(logits.view());
        Prediction {
            logits,
            probabilities,
        }
    }

    /// Foreground probability, `N x H x W`.
    pub fn foreground(&self) -> Array3<T> {
        self.probabilities.index_axis(Axis(1), 1).to_owned()
    }
}

/// Softmax over axis 1 of an `N x 2 x H x W` tensor.
pub fn softmax2<T: Scalar>(logits: ArrayView4<T>) -> Array4<T> {
    let mut out = Array4::zeros(logits.raw_dim());
    let (n, _, h, w) = logits.dim();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (p0, p1) = softmax_pair(logits[[b, 0, y, x]], logits[[b, 1, y, x]]);
                out[[b, 0, y, x]] = p0;
                out[[b, 1, y, x]] = p1;
            }
        }
    }
    out
}

#[inline]
pub fn softmax_pair<T: Scalar>(z0: T, z1: T) -> (T, T) {
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

pub fn global_average_pool<T: Scalar>(features: ArrayView4<T>) -> Result<Array2<T>> {
    let (n, c, h, w) = features.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("global average pooling over an empty grid".into()));
    }
    let area = T::of((h * w) as f64);
    Ok(Array2::from_shape_fn((n, c), |(b, ch)| {
        features.slice(s![b, ch, .., ..]).sum() / area
    }))
}

/// Concatenates each pooled feature with the class vector and applies the
/// controller. `weight` is `162 x (C_b + m) x 1 x 1`, `bias` has 162 entries.
pub fn fuse_and_control<T: Scalar>(
    pooled: ArrayView2<T>,
    class_vec: &ClassVector,
    weight: ArrayView4<T>,
    bias: ArrayView1<T>,
) -> Result<Array2<T>> {
    let (n, cb) = pooled.dim();
    let (out, inp, kh, kw) = weight.dim();
    if kh != 1 || kw != 1 || inp != cb + class_vec.len() || bias.len() != out {
        return Err(Error::Shape(format!(
            "controller weight {out}x{inp}x{kh}x{kw} / bias {} incompatible with {cb} pooled channels and {} classes",
            bias.len(),
            class_vec.len()
        )));
    }
    let w2 = weight.into_shape_with_order((out, inp)).map_err(|e| Error::Shape(e.to_string()))?;
    let mut omega = Array2::zeros((n, out));
    for (b, mut row) in omega.outer_iter_mut().enumerate() {
        let fused = fuse(pooled.row(b), class_vec);
        row.assign(&(w2.dot(&fused) + bias));
    }
    Ok(omega)
}

fn fuse<T: Scalar>(pooled: ArrayView1<T>, class_vec: &ClassVector) -> Array1<T> {
    pooled
        .iter()
        .copied()
        .chain(class_vec.values.iter().map(|&v| T::of(v)))
        .collect()
}

/// Intermediate activations of the head for one sample.
pub struct HeadCache<T> {
    x1: Array2<T>,
    x2: Array2<T>,
}

/// Applies the head to one `8 x H x W` decoder map; returns `2 x H x W` logits.
pub fn head_forward<T: Scalar>(m: ArrayView3<T>, p: &DynamicHeadParams<T>) -> (Array3<T>, HeadCache<T>) {
    let (c, h, w) = m.dim();
    let m = m.as_standard_layout();
    let m2 = m.view().into_shape_with_order((c, h * w)).expect("contiguous");
    let x1 = affine_relu(&p.w1, &p.b1, m2);
    let x2 = affine_relu(&p.w2, &p.b2, x1.view());
    let mut logits = p.w3.dot(&x2);
    for (mut row, &b) in logits.outer_iter_mut().zip(p.b3.iter()) {
        row += b;
    }
    let logits = logits.into_shape_with_order((HEAD_OUT, h, w)).expect("contiguous");
    (logits, HeadCache { x1, x2 })
}

fn affine_relu<T: Scalar>(w: &Array2<T>, b: &Array1<T>, x: ArrayView2<T>) -> Array2<T> {
    let mut y = w.dot(&x);
    for (mut row, &bv) in y.outer_iter_mut().zip(b.iter()) {
        row.mapv_inplace(|v| {
            let z = v + bv;
            if z > T::zero() {
                z
            } else {
                T::zero()
            }
        });
    }
    y
}

/// Returns the gradient with respect to the decoder map and to the head parameters.
pub fn head_backward<T: Scalar>(
    m: ArrayView3<T>,
    p: &DynamicHeadParams<T>,
    cache: &HeadCache<T>,
    dlogits: ArrayView3<T>,
) -> (Array3<T>, DynamicHeadParams<T>) {
    let (c, h, w) = m.dim();
    let m = m.as_standard_layout();
    let m2 = m.view().into_shape_with_order((c, h * w)).expect("contiguous");
    let dl = dlogits.as_standard_layout();
    let dz3 = dl.view().into_shape_with_order((HEAD_OUT, h * w)).expect("contiguous");

    let dw3 = dz3.dot(&cache.x2.t());
    let db3 = dz3.sum_axis(Axis(1));
    let mut dz2 = p.w3.t().dot(&dz3);
    relu_mask(&mut dz2, &cache.x2);
    let dw2 = dz2.dot(&cache.x1.t());
    let db2 = dz2.sum_axis(Axis(1));
    let mut dz1 = p.w2.t().dot(&dz2);
    relu_mask(&mut dz1, &cache.x1);
    let dw1 = dz1.dot(&m2.t());
    let db1 = dz1.sum_axis(Axis(1));
    let dm = p.w1.t().dot(&dz1).into_shape_with_order((c, h, w)).expect("contiguous");
    (
        dm,
        DynamicHeadParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            w3: dw3,
            b3: db3,
        },
    )
}

fn relu_mask<T: Scalar>(d: &mut Array2<T>, out: &Array2<T>) {
    ndarray::Zip::from(d).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Batched head application with one parameter set per sample.
pub fn apply_dynamic_head<T: Scalar>(m: ArrayView4<T>, params: &[DynamicHeadParams<T>]) -> Result<Prediction<T>> {
    let (n, c, h, w) = m.dim();
    if params.len() != n {
        return Err(Error::Shape(format!(
            "{} head parameter sets for a batch of {n}",
            params.len()
        )));
    }
    if c != DECODER_OUT_CHANNELS {
        return Err(Error::Shape(format!(
            "dynamic head expects {DECODER_OUT_CHANNELS} input channels, got {c}"
        )));
    }
    let mut logits = Array4::zeros((n, HEAD_OUT, h, w));
    for (b, p) in params.iter().enumerate() {
        let (l, _) = head_forward(m.index_axis(Axis(0), b), p);
        logits.index_axis_mut(Axis(0), b).assign(&l);
    }
    Ok(Prediction::from_logits(logits))
}

/// The controller layer: registered parameters plus its shape.
#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Controller {
    /// The bias starts as a Kaiming-initialized flat head so the initial head is
    /// well scaled whatever the pooled feature magnitude; the weights start at
    /// `CONTROLLER_WEIGHT_GAIN` times the fan-in scale and carry the image and
    /// class dependence.
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: ControllerConfig, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let inp = config.input_dim();
        let gain = T::of(CONTROLLER_WEIGHT_GAIN);
        let weight = params.add(
            "controller.weight",
            kaiming_normal::<T, R>(&[config.out_dim, inp, 1, 1], inp, rng).mapv(|v| v * gain),
        );
        let head = DynamicHeadParams::<T>::kaiming(rng);
        let bias = params.add(
            "controller.bias",
            ArrayD::from_shape_vec(IxDyn(&[config.out_dim]), head.flatten()).expect("162 values"),
        );
        Controller { config, weight, bias }
    }

    fn matrix<'a, T: Scalar>(&self, params: &'a ParamSet<T>) -> ArrayView2<'a, T> {
        params
            .get(self.weight)
            .view()
            .into_shape_with_order((self.config.out_dim, self.config.input_dim()))
            .expect("contiguous")
    }

    /// Returns `(fused input, omega)` for one sample.
    pub fn forward_sample<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        pooled: ArrayView1<T>,
        class_vec: &ClassVector,
    ) -> (Array1<T>, Array1<T>) {
        let fused = fuse(pooled, class_vec);
        let bias = params.get(self.bias);
        let omega = self.matrix(params).dot(&fused)
            + bias.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        (fused, omega)
    }

    /// Accumulates controller gradients and returns the gradient of the fused input.
    pub fn backward_sample<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        fused: &Array1<T>,
        d_omega: &Array1<T>,
        grads: &mut Gradients<T>,
    ) -> Array1<T> {
        {
            let dw = grads.get_mut(self.weight);
            let mut dw2 = dw
                .view_mut()
                .into_shape_with_order((self.config.out_dim, self.config.input_dim()))
                .expect("contiguous");
            for (mut row, &g) in dw2.outer_iter_mut().zip(d_omega.iter()) {
                row.scaled_add(g, fused);
            }
        }
        {
            let db = grads.get_mut(self.bias);
            for (b, &g) in db.iter_mut().zip(d_omega.iter()) {
                *b += g;
            }
        }
        self.matrix(params).t().dot(d_omega)
    }
}
