//! Compound training loss: batch-joint binary Dice on the foreground
//! probability plus cross-entropy weighted up on ground-truth boundaries.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::dynamic_mapping::{softmax_pair, Prediction};
use crate::error::{Error, Result};
use crate::nn::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub boundary_weight: f64,
    pub dice_epsilon: f64,
    /// Coefficients of the (Dice, cross-entropy) terms.
    pub dice_ce_mix: (f64, f64),
    /// Also apply the boundary weights inside the Dice sums.
    pub weight_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            boundary_weight: 1.2,
            dice_epsilon: 1e-5,
            dice_ce_mix: (1.0, 1.0),
            weight_dice: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.boundary_weight >= 1.0) {
            return Err(Error::Config("loss.boundary_weight must be >= 1".into()));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("loss.dice_epsilon must be > 0".into()));
        }
        if !self.dice_ce_mix.0.is_finite() || !self.dice_ce_mix.1.is_finite() {
            return Err(Error::Config("loss.dice_ce_mix must be finite".into()));
        }
        Ok(())
    }
}

/// Per-pixel loss weights, `N x H x W`; each entry is 1.0 or the boundary weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub weights: Array3<f64>,
}

pub(crate) fn check_binary(mask: ArrayView3<u8>) -> Result<()> {
    match mask.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::InvalidMask(format!("mask value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Boundary pixels are those where the 3x3 dilation and 3x3 erosion of the
/// mask differ, with zeros assumed outside the image.
pub fn boundary_weight_map(mask: ArrayView3<u8>, config: &LossConfig) -> Result<WeightMap> {
    check_binary(mask)?;
    let (n, h, w) = mask.dim();
    let mut weights = Array3::from_elem((n, h, w), 1.0);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                let mut all = true;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        let v = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            0
                        } else {
                            mask[[b, yy as usize, xx as usize]]
                        };
                        any |= v == 1;
                        all &= v == 1;
                    }
                }
                if any != all {
                    weights[[b, y, x]] = config.boundary_weight;
                }
            }
        }
    }
    Ok(WeightMap { weights })
}

fn check_shapes<T>(t: &ArrayView4<T>, mask: &ArrayView3<u8>) -> Result<()> {
    let (n, c, h, w) = t.dim();
    if c != 2 || (n, h, w) != mask.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match mask {:?}",
            t.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

fn dice_sums<T: Scalar>(p_fg: impl Iterator<Item = (T, u8, f64)>) -> (f64, f64, f64) {
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for (p, y, w) in p_fg {
        let p = p.f64();
        let y = y as f64;
        inter += w * p * y;
        psum += w * p;
        ysum += w * y;
    }
    (inter, psum, ysum)
}

/// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` over every pixel of the batch.
pub fn dice_loss<T: Scalar>(probabilities: ArrayView4<T>, mask: ArrayView3<u8>, config: &LossConfig) -> Result<f64> {
    check_shapes(&probabilities, &mask)?;
    let fg = probabilities.index_axis(ndarray::Axis(1), 1);
    let (i, p, y) = dice_sums(fg.iter().zip(mask.iter()).map(|(&p, &y)| (p, y, 1.0)));
    let eps = config.dice_epsilon;
    Ok(1.0 - (2.0 * i + eps) / (p + y + eps))
}

/// Mean over pixels of `weight * -log softmax(logits)[class]`.
pub fn weighted_cross_entropy<T: Scalar>(logits: ArrayView4<T>, mask: ArrayView3<u8>, weights: &WeightMap) -> Result<f64> {
    check_shapes(&logits, &mask)?;
    if weights.weights.dim() != mask.dim() {
        return Err(Error::Shape("weight map does not match mask".into()));
    }
    let (n, _, h, w) = logits.dim();
    let mut total = 0.0;
    for b in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let z0 = logits[[b, 0, yy, xx]].f64();
                let z1 = logits[[b, 1, yy, xx]].f64();
                let zc = if mask[[b, yy, xx]] == 1 { z1 } else { z0 };
                total += weights.weights[[b, yy, xx]] * (log_sum_exp(z0, z1) - zc);
            }
        }
    }
    Ok(total / (n * h * w) as f64)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn total_loss<T: Scalar>(prediction: &Prediction<T>, mask: ArrayView3<u8>, config: &LossConfig) -> Result<f64> {
    Ok(total_loss_with_grad(prediction.logits.view(), mask, config)?.0)
}

/// Loss value and its gradient with respect to the logits.
pub fn total_loss_with_grad<T: Scalar>(
    logits: ArrayView4<T>,
    mask: ArrayView3<u8>,
    config: &LossConfig,
) -> Result<(f64, Array4<T>)> {
    check_shapes(&logits, &mask)?;
    let weight_map = boundary_weight_map(mask, config)?;
    let wts = &weight_map.weights;
    let (n, _, h, w) = logits.dim();
    let count = (n * h * w) as f64;
    let (mix_dice, mix_ce) = config.dice_ce_mix;
    let eps = config.dice_epsilon;

    let mut p_fg = Array3::<f64>::zeros((n, h, w));
    let mut ce = 0.0;
    for b in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let z0 = logits[[b, 0, yy, xx]].f64();
                let z1 = logits[[b, 1, yy, xx]].f64();
                p_fg[[b, yy, xx]] = softmax_pair(z0, z1).1;
                let zc = if mask[[b, yy, xx]] == 1 { z1 } else { z0 };
                ce += wts[[b, yy, xx]] * (log_sum_exp(z0, z1) - zc);
            }
        }
    }
    ce /= count;

    let dice_w = |b: usize, y: usize, x: usize| if config.weight_dice { wts[[b, y, x]] } else { 1.0 };
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for ((b, yy, xx), &p) in p_fg.indexed_iter() {
        let wt = dice_w(b, yy, xx);
        let y = mask[[b, yy, xx]] as f64;
        inter += wt * p * y;
        psum += wt * p;
        ysum += wt * y;
    }
    let denom = psum + ysum + eps;
    let dice = 1.0 - (2.0 * inter + eps) / denom;

    let mut grad = Array4::<T>::zeros(logits.raw_dim());
    for ((b, yy, xx), &p) in p_fg.indexed_iter() {
        let wt = dice_w(b, yy, xx);
        let y = mask[[b, yy, xx]] as f64;
        let d_dice_dp = -wt * (2.0 * y * denom - (2.0 * inter + eps)) / (denom * denom);
        // d p_fg / d z1 = p(1-p) = -d p_fg / d z0
        let d_dice_dz1 = d_dice_dp * p * (1.0 - p);
        let cw = wts[[b, yy, xx]] / count;
        let d_ce_dz1 = cw * (p - y);
        let dz1 = mix_dice * d_dice_dz1 + mix_ce * d_ce_dz1;
        grad[[b, 1, yy, xx]] = T::of(dz1);
        grad[[b, 0, yy, xx]] = T::of(-dz1);
    }
    Ok((mix_dice * dice + mix_ce * ce, grad))
}
