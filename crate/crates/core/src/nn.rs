//! Per-sample CPU layer kernels with explicit backward passes.
//!
//! Every layer here works on a single `C x H x W` feature map. Batching is done
//! by the callers, which map samples over a thread pool and reduce the
//! per-sample gradients in sample order so results do not depend on scheduling.

use std::fmt::{Debug, Display};

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut2, ArrayViewMut4, Axis, IxDyn,
    LinalgScalar, ScalarOperand, ShapeBuilder,
};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Floating point element type the network can run in. Training uses `f32`;
/// gradient checks run in `f64`.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered store of every learnable tensor, keyed by hierarchical name.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar learnable values.
    pub fn count(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients(
            self.values
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(x.f64())))
                .collect(),
        }
    }

    /// Plain gradient descent step: `w -= lr * g`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T) {
        for (value, grad) in self.values.iter_mut().zip(&grads.0) {
            value.scaled_add(-lr, grad);
        }
    }
}

/// Gradient buffers aligned index-for-index with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Gradients<T>(pub Vec<ArrayD<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(normal.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-initialized weights, zero bias. `padding` is `kernel / 2`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = params.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Stride-1 kernels with padding run as shifted matrix products over a
    /// padded copy of the input instead of going through im2col.
    fn is_shifted(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && 2 * self.padding + 1 == self.kernel
    }

    /// Weights as `k x k x out x in`, one contiguous matrix per tap.
    fn weight_taps<T: Scalar>(&self, params: &ParamSet<T>) -> Array4<T> {
        let w4: ArrayView4<T> = params
            .get(self.weight)
            .view()
            .into_dimensionality()
            .expect("conv weight is 4-d");
        w4.permuted_axes([2, 3, 0, 1]).as_standard_layout().into_owned()
    }

    fn backward_shifted<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: ArrayView3<T>,
        dy: ArrayView3<T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Option<Array3<T>> {
        let (c, h, w) = x.dim();
        let padded = Padded::new(x, self.padding);
        let (pitch, n) = (padded.pitch, padded.span(h));
        // Output gradient in the padded row pitch; the pad columns stay zero.
        let mut dyp = Array2::<T>::zeros((self.out_channels, n));
        for (mut row, plane) in dyp.outer_iter_mut().zip(dy.outer_iter()) {
            for (y, line) in plane.outer_iter().enumerate() {
                row.slice_mut(s![y * pitch..y * pitch + w]).assign(&line);
            }
        }
        {
            let mut dw4: ArrayViewMut4<T> = grads
                .get_mut(self.weight)
                .view_mut()
                .into_dimensionality()
                .expect("conv weight is 4-d");
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let tap = padded.tap(ky, kx, n);
                    general_mat_mul(T::one(), &dyp, &tap.t(), T::one(), &mut dw4.slice_mut(s![.., .., ky, kx]));
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let taps = self.weight_taps(params);
        let mut dpad = Padded::zeros(c, h, w, self.padding);
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                let mut tap = dpad.tap_mut(ky, kx, n);
                general_mat_mul(T::one(), &taps.slice(s![ky, kx, .., ..]).t(), &dyp, T::one(), &mut tap);
            }
        }
        Some(dpad.interior(c, h, w))
    }

    fn weight_matrix<'a, T: Scalar>(&self, params: &'a ParamSet<T>) -> ArrayView2<'a, T> {
        params
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.output_size(h, w);
        let bias = params.get(self.bias);
        if self.is_shifted() {
            let padded = Padded::new(x, self.padding);
            let n = padded.span(h);
            let mut acc = Array2::<T>::zeros((self.out_channels, n));
            let taps = self.weight_taps(params);
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let tap = padded.tap(ky, kx, n);
                    general_mat_mul(T::one(), &taps.slice(s![ky, kx, .., ..]), &tap, T::one(), &mut acc);
                }
            }
            let mut out = Array3::<T>::zeros((self.out_channels, oh, ow));
            for ((mut plane, row), &b) in out.outer_iter_mut().zip(acc.outer_iter()).zip(bias.iter()) {
                let row = row.as_slice().expect("contiguous");
                for (y, mut line) in plane.outer_iter_mut().enumerate() {
                    let src = &row[y * padded.pitch..y * padded.pitch + ow];
                    line.iter_mut().zip(src).for_each(|(d, &v)| *d = v + b);
                }
            }
            return out;
        }
        let wm = self.weight_matrix(params);
        let mut out = Array2::<T>::zeros((self.out_channels, oh * ow));
        for (mut row, &b) in out.outer_iter_mut().zip(bias.iter()) {
            row.fill(b);
        }
        if self.is_pointwise() {
            let x = x.as_standard_layout();
            let cols = x.view().into_shape_with_order((c, h * w)).expect("contiguous");
            general_mat_mul(T::one(), &wm, &cols, T::one(), &mut out);
        } else {
            let cols = im2col(x, self.kernel, self.stride, self.padding, oh, ow);
            general_mat_mul(T::one(), &wm, &cols, T::one(), &mut out);
        }
        out.into_shape_with_order((self.out_channels, oh, ow))
            .expect("contiguous")
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: ArrayView3<T>,
        dy: ArrayView3<T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Option<Array3<T>> {
        let (c, h, w) = x.dim();
        let (oc, oh, ow) = dy.dim();
        let dy = dy.as_standard_layout();
        let dy2 = dy.view().into_shape_with_order((oc, oh * ow)).expect("contiguous");

        {
            let db = grads.get_mut(self.bias);
            for (g, row) in db.iter_mut().zip(dy2.outer_iter()) {
                *g += row.sum();
            }
        }

        if self.is_shifted() {
            return self.backward_shifted(params, x, dy.view(), grads, need_input_grad);
        }

        let x_std = x.as_standard_layout();
        let owned_cols;
        let cols = if self.is_pointwise() {
            x_std.view().into_shape_with_order((c, h * w)).expect("contiguous")
        } else {
            owned_cols = im2col(x, self.kernel, self.stride, self.padding, oh, ow);
            owned_cols.view()
        };

        {
            let dw = grads.get_mut(self.weight);
            let mut dw2 = dw
                .view_mut()
                .into_shape_with_order((oc, c * self.kernel * self.kernel))
                .expect("contiguous");
            general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut dw2);
        }

        if !need_input_grad {
            return None;
        }
        let wm = self.weight_matrix(params);
        let mut dcols = Array2::<T>::zeros((c * self.kernel * self.kernel, oh * ow));
        general_mat_mul(T::one(), &wm.t(), &dy2, T::zero(), &mut dcols);
        if self.is_pointwise() {
            Some(dcols.into_shape_with_order((c, h, w)).expect("contiguous"))
        } else {
            Some(col2im(dcols.view(), c, h, w, self.kernel, self.stride, self.padding, oh, ow))
        }
    }
}

/// Zero-padded copy of a feature map in which every kernel tap of a stride-1
/// convolution is a fixed offset. A short tail keeps the last shifted view in
/// bounds.
struct Padded<T> {
    data: Vec<T>,
    pad: usize,
    pitch: usize,
    plane: usize,
    channels: usize,
}

impl<T: Scalar> Padded<T> {
    fn zeros(c: usize, h: usize, w: usize, pad: usize) -> Self {
        let pitch = w + 2 * pad;
        let plane = (h + 2 * pad) * pitch;
        Padded {
            data: vec![T::zero(); c * plane + 2 * pad],
            pad,
            pitch,
            plane,
            channels: c,
        }
    }

    fn new(x: ArrayView3<T>, pad: usize) -> Self {
        let (c, h, w) = x.dim();
        let mut p = Self::zeros(c, h, w, pad);
        for (ci, plane) in x.outer_iter().enumerate() {
            for (y, row) in plane.outer_iter().enumerate() {
                let start = ci * p.plane + (y + pad) * p.pitch + pad;
                let dst = &mut p.data[start..start + w];
                match row.as_slice() {
                    Some(src) => dst.copy_from_slice(src),
                    None => dst.iter_mut().zip(row.iter()).for_each(|(d, &v)| *d = v),
                }
            }
        }
        p
    }

    /// Number of output positions in the padded pitch for `h` output rows.
    fn span(&self, h: usize) -> usize {
        h * self.pitch
    }

    fn tap(&self, ky: usize, kx: usize, n: usize) -> ArrayView2<'_, T> {
        let off = ky * self.pitch + kx;
        ArrayView2::from_shape((self.channels, n).strides((self.plane, 1)), &self.data[off..]).expect("tap fits")
    }

    fn tap_mut(&mut self, ky: usize, kx: usize, n: usize) -> ArrayViewMut2<'_, T> {
        let off = ky * self.pitch + kx;
        ArrayViewMut2::from_shape((self.channels, n).strides((self.plane, 1)), &mut self.data[off..])
            .expect("tap fits")
    }

    fn interior(&self, c: usize, h: usize, w: usize) -> Array3<T> {
        let (pad, pitch, plane) = (self.pad, self.pitch, self.plane);
        let mut out = Array3::<T>::zeros((c, h, w));
        for (ci, mut p) in out.outer_iter_mut().enumerate() {
            for (y, mut line) in p.outer_iter_mut().enumerate() {
                let start = ci * plane + (y + pad) * pitch + pad;
                line.iter_mut().zip(&self.data[start..start + w]).for_each(|(d, &v)| *d = v);
            }
        }
        out
    }
}

fn im2col<T: Scalar>(x: ArrayView3<T>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().expect("standard layout");
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cs[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let (lo, hi) = valid_span(kx, pad, w, ow);
                        dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                        continue;
                    }
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `lo..hi` whose stride-1 input column `ox + kx - pad` is
/// inside the image.
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: ArrayView2<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<T> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::<T>::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("standard layout");
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let (lo, hi) = valid_span(kx, pad, w, ow);
                        for (d, &v) in dst_row[lo + kx - pad..hi + kx - pad].iter_mut().zip(&src_row[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Group normalization with per-channel affine parameters. Statistics are
/// computed per sample, so samples never interact.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    x_hat: Array3<T>,
    rstd: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        let gamma = params.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        GroupNorm {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: ArrayView3<T>) -> (Array3<T>, GroupNormCache<T>) {
        let (c, h, w) = x.dim();
        let per_group = c / self.groups;
        let n = T::of((per_group * h * w) as f64);
        let eps = T::of(GROUP_NORM_EPS);
        let mut x_hat = x.to_owned();
        let mut rstd = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let mut block = x_hat.slice_mut(s![g * per_group..(g + 1) * per_group, .., ..]);
            let mean = block.sum() / n;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            block.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mut y = x_hat.clone();
        for ((mut plane, &gm), &bt) in y.outer_iter_mut().zip(gamma.iter()).zip(beta.iter()) {
            plane.mapv_inplace(|v| v * gm + bt);
        }
        (y, GroupNormCache { x_hat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &GroupNormCache<T>,
        dy: ArrayView3<T>,
        grads: &mut Gradients<T>,
    ) -> Array3<T> {
        let (c, h, w) = dy.dim();
        let per_group = c / self.groups;
        let n = T::of((per_group * h * w) as f64);
        {
            let dgamma = grads.get_mut(self.gamma);
            for (ch, g) in dgamma.iter_mut().enumerate() {
                *g += (&dy.index_axis(Axis(0), ch) * &cache.x_hat.index_axis(Axis(0), ch)).sum();
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for (ch, g) in dbeta.iter_mut().enumerate() {
                *g += dy.index_axis(Axis(0), ch).sum();
            }
        }
        let gamma = params.get(self.gamma);
        let mut dx_hat = dy.to_owned();
        for (mut plane, &gm) in dx_hat.outer_iter_mut().zip(gamma.iter()) {
            plane *= gm;
        }
        let mut dx = Array3::<T>::zeros((c, h, w));
        for g in 0..self.groups {
            let range = g * per_group..(g + 1) * per_group;
            let dxh = dx_hat.slice(s![range.clone(), .., ..]);
            let xh = cache.x_hat.slice(s![range.clone(), .., ..]);
            let sum_dxh = dxh.sum();
            let sum_dxh_xh = (&dxh * &xh).sum();
            let scale = cache.rstd[g] / n;
            let mut out = dx.slice_mut(s![range, .., ..]);
            ndarray::Zip::from(&mut out)
                .and(&dxh)
                .and(&xh)
                .for_each(|o, &d, &xv| *o = scale * (n * d - sum_dxh - xv * sum_dxh_xh));
        }
        dx
    }
}

pub fn relu<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU, using its output to recover the active mask.
pub fn relu_backward<T: Scalar>(out: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(out)
        .for_each(|d, &o| {
            if o <= T::zero() {
                *d = T::zero();
            }
        });
    dx
}

pub fn upsample_nearest2<T: Scalar>(x: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: ArrayView3<T>) -> Array3<T> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        dy[[ci, 2 * y, 2 * x]]
            + dy[[ci, 2 * y, 2 * x + 1]]
            + dy[[ci, 2 * y + 1, 2 * x]]
            + dy[[ci, 2 * y + 1, 2 * x + 1]]
    })
}

/// Channel means over the spatial grid.
pub fn spatial_mean<T: Scalar>(x: ArrayView3<T>) -> Array1<T> {
    let (_, h, w) = x.dim();
    let n = T::of((h * w) as f64);
    x.outer_iter().map(|plane| plane.sum() / n).collect()
}
