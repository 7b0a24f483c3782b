//! Test-time aggregation: class-conditioned sliding-window inference at each
//! class's scale, then a rule-based merge of the per-class maps into one
//! label image.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, stack, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::data::{downsample_area, tile_origins, to_u8};
use crate::error::{Error, Result};
use crate::metrics::Segmenter;
use crate::registry::{Registry, TissueClass};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ALPHA: f32 = 0.5;

/// Foreground probability of one class at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityMap {
    pub class_id: usize,
    pub probabilities: Array2<f32>,
}

/// One label per pixel: 0 is background, otherwise a class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompleteLabelMap {
    pub labels: Array2<u8>,
}

/// Tiles the class-scale image with `patch_size` windows at `stride`,
/// averages overlapping foreground probabilities and maps the result back to
/// the native grid.
pub fn segment_class(
    image: ArrayView3<f32>,
    tissue: &TissueClass,
    model: &impl Segmenter,
    patch_size: usize,
    stride: usize,
    batch_size: usize,
) -> Result<ClassProbabilityMap> {
    let (c, h0, w0) = image.dim();
    let f = tissue.downsample_factor;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    if stride == 0 || patch_size == 0 {
        return Err(Error::Shape("tile size and stride must be positive".into()));
    }
    if h0 < patch_size * f || w0 < patch_size * f {
        return Err(Error::Shape(format!(
            "{h0}x{w0} image is smaller than one {patch_size}-pixel tile at downsample factor {f}"
        )));
    }
    let scaled = downsample_area(image, f);
    let (_, h, w) = scaled.dim();
    let mut origins = Vec::new();
    for &y in &tile_origins(h, patch_size, stride) {
        for &x in &tile_origins(w, patch_size, stride) {
            origins.push((y, x));
        }
    }
    let mut sum = Array2::<f32>::zeros((h, w));
    let mut count = Array2::<f32>::zeros((h, w));
    for chunk in origins.chunks(batch_size.max(1)) {
        let tiles: Vec<_> = chunk
            .iter()
            .map(|&(y, x)| scaled.slice(s![.., y..y + patch_size, x..x + patch_size]))
            .collect();
        let batch = stack(Axis(0), &tiles).expect("equal tile shapes");
        let fg = model.foreground(batch.view(), &vec![tissue.id; chunk.len()])?;
        for (&(y, x), p) in chunk.iter().zip(fg.outer_iter()) {
            let mut acc = sum.slice_mut(s![y..y + patch_size, x..x + patch_size]);
            acc += &p;
            count.slice_mut(s![y..y + patch_size, x..x + patch_size]).mapv_inplace(|v| v + 1.0);
        }
    }
    let mean = sum / count;
    let probabilities = if f == 1 {
        mean
    } else {
        upsample_bilinear(mean.view(), h0, w0, f)
    };
    Ok(ClassProbabilityMap {
        class_id: tissue.id,
        probabilities,
    })
}

/// Bilinear resampling of a map downsampled by `factor` onto an `h0 x w0`
/// grid, with pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(map: ArrayView2<f32>, h0: usize, w0: usize, factor: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    let f = factor as f64;
    Array2::from_shape_fn((h0, w0), |(y, x)| {
        let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        (1.0 - fy) * ((1.0 - fx) * map[[y0, x0]] + fx * map[[y0, x1]])
            + fy * ((1.0 - fx) * map[[y1, x0]] + fx * map[[y1, x1]])
    })
}

/// Label for the set of classes whose probability reaches the threshold.
/// Empty set is background, a single class wins outright, exactly
/// `{TUFT, CAP}` shows as TUFT, and every other overlap is background.
pub fn merge_rule(set: &BTreeSet<usize>, tuft_cap: Option<(usize, usize)>) -> usize {
    match set.len() {
        0 => 0,
        1 => *set.iter().next().expect("one element"),
        2 => match tuft_cap {
            Some((tuft, cap)) if set.contains(&tuft) && set.contains(&cap) => tuft,
            _ => 0,
        },
        _ => 0,
    }
}

/// Registry ids of the TUFT and CAP classes, when both are registered.
pub fn tuft_cap_ids(registry: &Registry) -> Option<(usize, usize)> {
    Some((registry.lookup("TUFT").ok()?.id, registry.lookup("CAP").ok()?.id))
}

pub fn merge_labels(maps: &[ClassProbabilityMap], threshold: f64, registry: &Registry) -> Result<CompleteLabelMap> {
    let mut seen = BTreeSet::new();
    for m in maps {
        registry.get(m.class_id)?;
        if !seen.insert(m.class_id) {
            return Err(Error::InvalidInput(format!("class {} appears twice", m.class_id)));
        }
    }
    if seen.len() != registry.num_classes() {
        return Err(Error::InvalidInput(format!(
            "expected one map per class ({}), got {}",
            registry.num_classes(),
            seen.len()
        )));
    }
    if registry.num_classes() > u8::MAX as usize {
        return Err(Error::InvalidInput("label maps hold at most 255 classes".into()));
    }
    let shape = maps[0].probabilities.dim();
    if let Some(m) = maps.iter().find(|m| m.probabilities.dim() != shape) {
        return Err(Error::Shape(format!(
            "map for class {} is {:?}, expected {shape:?}",
            m.class_id,
            m.probabilities.dim()
        )));
    }
    let pair = tuft_cap_ids(registry);
    let t = threshold as f32;
    let labels = Array2::from_shape_fn(shape, |idx| {
        let set: BTreeSet<usize> = maps
            .iter()
            .filter(|m| m.probabilities[idx] >= t)
            .map(|m| m.class_id)
            .collect();
        merge_rule(&set, pair) as u8
    });
    Ok(CompleteLabelMap { labels })
}

/// Fixed class colors; ids beyond the table get deterministic hues.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f32; 3]>,
}

impl Palette {
    pub fn for_classes(m: usize) -> Self {
        const BASE: [[f32; 3]; 6] = [
            [0.12, 0.47, 0.71],
            [1.00, 0.50, 0.05],
            [0.17, 0.63, 0.17],
            [0.84, 0.15, 0.16],
            [0.58, 0.40, 0.74],
            [0.89, 0.47, 0.76],
        ];
        let colors = (0..m)
            .map(|i| {
                BASE.get(i).copied().unwrap_or_else(|| {
                    let hue = (i as f32 * 0.618_034).fract();
                    hsv_to_rgb(hue, 0.65, 0.9)
                })
            })
            .collect();
        Palette { colors }
    }

    pub fn color(&self, class_id: usize) -> Option<[f32; 3]> {
        class_id.checked_sub(1).and_then(|i| self.colors.get(i)).copied()
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn render_overlay(
    image: ArrayView3<f32>,
    labels: &CompleteLabelMap,
    palette: &Palette,
    alpha: f32,
) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if c != 3 || labels.labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "image {:?} and label map {:?} disagree",
            image.dim(),
            labels.labels.dim()
        )));
    }
    let mut out = image.to_owned();
    for ((y, x), &l) in labels.labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let color = palette.color(l as usize).ok_or(Error::InvalidLabel(l))?;
        for ch in 0..3 {
            out[[ch, y, x]] = (1.0 - alpha) * image[[ch, y, x]] + alpha * color[ch];
        }
    }
    Ok(out)
}

pub fn save_labels(path: &Path, labels: &CompleteLabelMap) -> Result<()> {
    let (h, w) = labels.labels.dim();
    let raw = labels.labels.as_standard_layout().iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

/// 16-bit grayscale PNG, probability scaled to 0..=65535.
pub fn save_probability_map(path: &Path, map: &ClassProbabilityMap) -> Result<()> {
    let (h, w) = map.probabilities.dim();
    let raw: Vec<u16> = map
        .probabilities
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn overlay_to_rgb8(overlay: ArrayView3<f32>) -> image::RgbImage {
    let (_, h, w) = overlay.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(overlay[[c, y as usize, x as usize]])))
    })
}

/// Foreground label that covers the most pixels, if any.
pub fn majority_label(labels: ArrayView2<u8>) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &l in labels {
        counts[l as usize] += 1;
    }
    (1..256).filter(|&l| counts[l] > 0).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).map(|l| l as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, ArrayView4};

    struct Constant(f32);

    impl Segmenter for Constant {
        fn foreground(&self, images: ArrayView4<f32>, _: &[usize]) -> Result<Array3<f32>> {
            let (n, _, h, w) = images.dim();
            Ok(Array3::from_elem((n, h, w), self.0))
        }
    }

    /// Foreground = red channel, so tiling must reproduce the input.
    struct Red;

    impl Segmenter for Red {
        fn foreground(&self, images: ArrayView4<f32>, _: &[usize]) -> Result<Array3<f32>> {
            Ok(images.index_axis(Axis(1), 0).to_owned())
        }
    }

    fn tissue(f: usize) -> TissueClass {
        TissueClass {
            id: 2,
            name: "PT".into(),
            downsample_factor: f,
            microns_per_pixel: 0.25 * f as f64,
        }
    }

    #[test]
    fn tiling_reconstructs_input() {
        let img = Array3::from_shape_fn((3, 512, 512), |(_, y, x)| ((y * 7 + x * 3) % 97) as f32 / 97.0);
        for stride in [256, 128, 100] {
            let m = segment_class(img.view(), &tissue(1), &Red, 256, stride, 4).unwrap();
            assert_eq!(m.probabilities.dim(), (512, 512));
            let err = m
                .probabilities
                .iter()
                .zip(img.index_axis(Axis(0), 0))
                .fold(0.0f32, |a, (p, q)| a.max((p - q).abs()));
            assert!(err < 1e-6, "stride {stride}: {err}");
        }
    }

    #[test]
    fn constant_half_model() {
        let img = Array3::<f32>::zeros((3, 300, 260));
        let m = segment_class(img.view(), &tissue(1), &Constant(0.5), 256, 128, 3).unwrap();
        assert!(m.probabilities.iter().all(|&p| p == 0.5));
        let m = segment_class(Array3::<f32>::zeros((3, 600, 520)).view(), &tissue(2), &Constant(0.5), 256, 256, 3).unwrap();
        assert_eq!(m.probabilities.dim(), (600, 520));
    }

    #[test]
    fn zero_logit_model_gives_half() {
        let model = crate::OmniSeg::<f32>::new(&crate::BackboneConfig::tiny(&[4, 8], 2), 6, 0).unwrap();
        let mut zeroed = model.clone();
        for (name, t) in zeroed.params_mut().iter_mut() {
            if name.starts_with("controller") {
                t.fill(0.0);
            }
        }
        let img = Array3::from_elem((3, 16, 16), 0.3);
        let m = segment_class(img.view(), &tissue(1), &zeroed, 8, 8, 4).unwrap();
        assert!(m.probabilities.iter().all(|&p| (p - 0.5).abs() < 1e-6));
    }

    #[test]
    fn too_small_image() {
        let img = Array3::<f32>::zeros((3, 200, 200));
        assert!(matches!(
            segment_class(img.view(), &tissue(1), &Constant(0.1), 256, 256, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn all_subsets_follow_rule_table() {
        let reg = Registry::renal_default();
        let (tuft, cap) = tuft_cap_ids(&reg).unwrap();
        for bits in 0u32..64 {
            let set: BTreeSet<usize> = (1..=6).filter(|c| bits & (1 << (c - 1)) != 0).collect();
            let maps: Vec<_> = (1..=6)
                .map(|c| ClassProbabilityMap {
                    class_id: c,
                    probabilities: Array2::from_elem((1, 1), if set.contains(&c) { 0.9 } else { 0.1 }),
                })
                .collect();
            let expected = match set.len() {
                0 => 0,
                1 => *set.first().unwrap(),
                2 if set.contains(&tuft) && set.contains(&cap) => tuft,
                _ => 0,
            };
            assert_eq!(merge_labels(&maps, 0.5, &reg).unwrap().labels[[0, 0]] as usize, expected, "{set:?}");
        }
    }

    #[test]
    fn merge_rejects_duplicates_and_mismatch() {
        let reg = Registry::renal_default();
        let mut maps: Vec<_> = (1..=6)
            .map(|c| ClassProbabilityMap {
                class_id: c,
                probabilities: Array2::zeros((2, 2)),
            })
            .collect();
        maps[5].class_id = 5;
        assert!(matches!(merge_labels(&maps, 0.5, &reg), Err(Error::InvalidInput(_))));
        maps[5].class_id = 6;
        maps[5].probabilities = Array2::zeros((3, 2));
        assert!(matches!(merge_labels(&maps, 0.5, &reg), Err(Error::Shape(_))));
    }

    #[test]
    fn overlay_blending() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y + x) as f32 / 12.0);
        let pal = Palette::for_classes(6);
        let bg = CompleteLabelMap {
            labels: Array2::zeros((4, 4)),
        };
        assert_eq!(render_overlay(img.view(), &bg, &pal, 0.5).unwrap(), img);
        let full = CompleteLabelMap {
            labels: Array2::from_elem((4, 4), 3),
        };
        let solid = render_overlay(img.view(), &full, &pal, 1.0).unwrap();
        let color = pal.color(3).unwrap();
        assert!(solid.indexed_iter().all(|((c, _, _), &v)| v == color[c]));
        let bad = CompleteLabelMap {
            labels: Array2::from_elem((4, 4), 9),
        };
        assert!(matches!(render_overlay(img.view(), &bad, &pal, 0.5), Err(Error::InvalidLabel(9))));
        assert_eq!(Palette::for_classes(6), Palette::for_classes(6));
        assert_eq!(Palette::for_classes(9).color(3), pal.color(3));
    }

    #[test]
    fn majority() {
        let l = ndarray::arr2(&[[0u8, 2, 2], [3, 0, 0]]);
        assert_eq!(majority_label(l.view()), Some(2));
        assert_eq!(majority_label(Array2::<u8>::zeros((2, 2)).view()), None);
    }
}
