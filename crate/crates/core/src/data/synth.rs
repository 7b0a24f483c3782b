//! Procedural stand-in corpus: each class has its own shape family and color,
//! only the labeled class is masked, other classes appear as distractors.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, no_duplicates, save_mask, save_rgb, CorpusManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::registry::Registry;

const STAIN_TAGS: [(&str, f64); 4] = [("HE", 0.0), ("PAS", 10.0), ("SIL", -10.0), ("TRI", 18.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    FilledEllipse,
    EllipseRing,
    TexturedBlob,
    HollowBlob,
    SmallDots,
    CurvedBand,
}

/// Appearance of one class. `size_range` is in native pixels: the semi-axis
/// for ellipses and blobs, the dot radius, or the band length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub family: ShapeFamily,
    pub color: [f32; 3],
    pub size_range: (f64, f64),
    pub count_range: (usize, usize),
    pub texture: f32,
}

impl StructureSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad size range {:?}", self.size_range)));
        }
        if self.count_range.0 == 0 || self.count_range.0 > self.count_range.1 {
            return Err(Error::Config(format!("bad count range {:?}", self.count_range)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) || !(0.0..=1.0).contains(&self.texture) {
            return Err(Error::Config("color and texture must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn default_structures() -> Vec<StructureSpec> {
    let spec = |family, color, size_range, count_range, texture| StructureSpec {
        family,
        color,
        size_range,
        count_range,
        texture,
    };
    vec![
        spec(ShapeFamily::FilledEllipse, [0.42, 0.18, 0.55], (11.0, 18.0), (2, 4), 0.05),
        spec(ShapeFamily::EllipseRing, [0.80, 0.28, 0.40], (15.0, 23.0), (2, 4), 0.05),
        spec(ShapeFamily::TexturedBlob, [0.88, 0.78, 0.55], (22.0, 30.0), (1, 2), 0.35),
        spec(ShapeFamily::HollowBlob, [0.20, 0.30, 0.70], (18.0, 26.0), (1, 2), 0.05),
        spec(ShapeFamily::CurvedBand, [0.95, 0.50, 0.10], (80.0, 140.0), (1, 2), 0.05),
        spec(ShapeFamily::SmallDots, [0.35, 0.05, 0.08], (2.5, 4.0), (12, 24), 0.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images_per_class: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub num_patients: usize,
    pub seed: u64,
    /// Background texture amplitude.
    pub background_texture: f32,
    /// Maximum per-image hue rotation in degrees on top of the stain offset.
    pub hue_jitter_degrees: f64,
    /// Structures for class `i + 1`; cycled when the registry is larger.
    pub structures: Vec<StructureSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images_per_class: 60,
            image_size: 512,
            patch_size: 256,
            num_patients: 20,
            seed: 0,
            background_texture: 0.05,
            hue_jitter_degrees: 6.0,
            structures: default_structures(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images_per_class == 0 {
            return Err(Error::Config("num_images_per_class must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return Err(Error::Config(format!(
                "patch_size {} must be in 1..=image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.num_patients < 3 {
            return Err(Error::Config("num_patients must be at least 3".into()));
        }
        if self.structures.is_empty() {
            return Err(Error::Config("at least one structure spec is required".into()));
        }
        self.structures.iter().try_for_each(StructureSpec::validate)
    }

    pub fn structure_for(&self, class_id: usize) -> &StructureSpec {
        &self.structures[(class_id - 1) % self.structures.len()]
    }

    pub fn patient_id(&self, k: usize) -> String {
        format!("P{:03}", k % self.num_patients)
    }
}

/// Per-image generator stream, independent of thread scheduling.
pub(crate) fn image_rng(seed: u64, class_id: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class_id as u64) << 32) | k as u64);
    rng
}

/// Textured background in `[0, 1]`.
pub fn render_background<R: Rng + ?Sized>(size: usize, amplitude: f32, rng: &mut R) -> Array3<f32> {
    let base = [0.93f32, 0.84, 0.88];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.05),
                rng.random_range(0.01..0.05),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let low: f64 = waves
                .iter()
                .map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let grain: f32 = rng.random_range(-1.0..1.0);
            let v = amplitude * (low as f32 + 0.4 * grain);
            for c in 0..3 {
                img[[c, y, x]] = (base[c] + v).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Paints one random instance of the structure onto `image` and returns its
/// footprint.
pub fn render_structure<R: Rng + ?Sized>(
    spec: &StructureSpec,
    image: &mut Array3<f32>,
    rng: &mut R,
) -> Array2<bool> {
    let (_, h, w) = image.dim();
    let size = rng.random_range(spec.size_range.0..=spec.size_range.1);
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let theta = rng.random_range(0.0..PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let mut foot = Array2::from_elem((h, w), false);

    // Local elliptical coordinates: r = 1 on the outline.
    let aspect = rng.random_range(0.55..0.9);
    let ell = |y: f64, x: f64, a: f64, b: f64| {
        let (dy, dx) = (y - cy, x - cx);
        let u = dx * cos_t + dy * sin_t;
        let v = -dx * sin_t + dy * cos_t;
        ((u / a).powi(2) + (v / b).powi(2)).sqrt()
    };
    let lobes = rng.random_range(3..6) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let wobble = |y: f64, x: f64| 1.0 + 0.15 * (lobes * (y - cy).atan2(x - cx) + phase).sin();

    match spec.family {
        ShapeFamily::FilledEllipse => {
            fill(&mut foot, cy, cx, size, |y, x| ell(y, x, size, size * aspect) <= 1.0);
        }
        ShapeFamily::EllipseRing => {
            let t = (size * 0.3).max(3.0);
            fill(&mut foot, cy, cx, size, |y, x| {
                let r = ell(y, x, size, size * aspect);
                r <= 1.0 && r >= 1.0 - t / (size * aspect)
            });
        }
        ShapeFamily::TexturedBlob => {
            fill(&mut foot, cy, cx, size * 1.2, |y, x| {
                ((y - cy).hypot(x - cx) / size) <= wobble(y, x)
            });
        }
        ShapeFamily::HollowBlob => {
            let t = (size * 0.3).max(4.0);
            fill(&mut foot, cy, cx, size * 1.2, |y, x| {
                let d = (y - cy).hypot(x - cx);
                let r = size * wobble(y, x);
                d <= r && d >= r - t
            });
        }
        ShapeFamily::SmallDots => {
            fill(&mut foot, cy, cx, size, |y, x| (y - cy).hypot(x - cx) <= size);
        }
        ShapeFamily::CurvedBand => {
            let half = size / 2.0;
            let (p0, p2) = ((cy - half * sin_t, cx - half * cos_t), (cy + half * sin_t, cx + half * cos_t));
            let bend = rng.random_range(-0.5..0.5) * size;
            let p1 = (cy + bend * cos_t, cx - bend * sin_t);
            let width = rng.random_range(3.0..5.0);
            let steps = (size * 2.0) as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let by = (1.0 - t).powi(2) * p0.0 + 2.0 * (1.0 - t) * t * p1.0 + t * t * p2.0;
                let bx = (1.0 - t).powi(2) * p0.1 + 2.0 * (1.0 - t) * t * p1.1 + t * t * p2.1;
                fill(&mut foot, by, bx, width, |y, x| (y - by).hypot(x - bx) <= width);
            }
        }
    }

    for ((y, x), &on) in foot.indexed_iter() {
        if on {
            let n: f32 = if spec.texture > 0.0 {
                spec.texture * rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
            for c in 0..3 {
                image[[c, y, x]] = (spec.color[c] * (1.0 + n)).clamp(0.0, 1.0);
            }
        }
    }
    foot
}

fn fill(foot: &mut Array2<bool>, cy: f64, cx: f64, radius: f64, inside: impl Fn(f64, f64) -> bool) {
    let (h, w) = foot.dim();
    let y0 = (cy - radius - 1.0).floor().max(0.0) as usize;
    let x0 = (cx - radius - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + radius + 1.0).ceil().max(0.0) as usize).min(h);
    let x1 = ((cx + radius + 1.0).ceil().max(0.0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                foot[[y, x]] = true;
            }
        }
    }
}

/// Rotates hue about the gray axis and scales saturation, in place.
pub fn shift_hue(image: &mut Array3<f32>, degrees: f64, saturation: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let v = [image[[0, y, x]] as f64, image[[1, y, x]] as f64, image[[2, y, x]] as f64];
            let dot = k * (v[0] + v[1] + v[2]);
            let cross = [k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])];
            let gray = (v[0] + v[1] + v[2]) / 3.0;
            for i in 0..3 {
                let r = v[i] * c + cross[i] * s + k * dot * (1.0 - c);
                image[[i, y, x]] = (gray + saturation * (r - gray)).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// One synthetic image of `class_id` and its mask.
pub fn synth_image(config: &SynthConfig, num_classes: usize, class_id: usize, k: usize) -> (Array3<f32>, Array2<u8>, &'static str) {
    let mut rng = image_rng(config.seed, class_id, k);
    let size = config.image_size;
    let mut img = render_background(size, config.background_texture, &mut rng);

    // Unlabeled structures of up to two other classes go underneath. They use
    // the same count distribution as the labeled class, so the image as a
    // whole does not reveal which class is annotated.
    let others: Vec<usize> = (1..=num_classes).filter(|&c| c != class_id).collect();
    if !others.is_empty() {
        let n = others.len().min(2);
        for i in sample(&mut rng, others.len(), n) {
            let spec = config.structure_for(others[i]);
            for _ in 0..rng.random_range(spec.count_range.0..=spec.count_range.1) {
                render_structure(spec, &mut img, &mut rng);
            }
        }
    }

    let spec = config.structure_for(class_id);
    let mut mask = Array2::<u8>::zeros((size, size));
    let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
    for _ in 0..count {
        let foot = render_structure(spec, &mut img, &mut rng);
        mask.zip_mut_with(&foot, |m, &f| *m |= f as u8);
    }

    let (tag, offset) = STAIN_TAGS[rng.random_range(0..STAIN_TAGS.len())];
    let jitter = config.hue_jitter_degrees;
    let hue = offset + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
    shift_hue(&mut img, hue, rng.random_range(0.9..1.1));
    (img, mask, tag)
}

/// Composite test image with structures of several classes and the matching
/// label map (0 background, otherwise the class id of the topmost structure).
pub fn synth_composite(config: &SynthConfig, class_ids: &[usize], size: usize, seed: u64) -> (Array3<f32>, Array2<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = render_background(size, config.background_texture, &mut rng);
    let mut labels = Array2::<u8>::zeros((size, size));
    for &c in class_ids {
        let spec = config.structure_for(c);
        let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
        for _ in 0..count {
            let foot = render_structure(spec, &mut img, &mut rng);
            labels.zip_mut_with(&foot, |l, &f| {
                if f {
                    *l = c as u8;
                }
            });
        }
    }
    (img, labels)
}

/// Writes the corpus under `root` and returns its manifest (also written as
/// `manifest.csv`).
pub fn generate_synthetic(config: &SynthConfig, registry: &Registry, root: &Path) -> Result<CorpusManifest> {
    config.validate()?;
    if !no_duplicates(registry.classes().iter().map(|c| c.name.as_str())) {
        return Err(Error::Config("duplicate class names".into()));
    }
    for class in registry.classes() {
        ensure_dir(&root.join(&class.name).join("img"))?;
        ensure_dir(&root.join(&class.name).join("mask"))?;
    }
    let m = registry.num_classes();
    let jobs: Vec<(usize, usize)> = registry
        .classes()
        .iter()
        .flat_map(|c| (0..config.num_images_per_class).map(move |k| (c.id, k)))
        .collect();
    let entries = jobs
        .into_par_iter()
        .map(|(class_id, k)| {
            let class = registry.get(class_id)?;
            let (img, mask, tag) = synth_image(config, m, class_id, k);
            let patient = config.patient_id(k);
            let file = format!("{patient}_{k}.png");
            let image_path = format!("{}/img/{file}", class.name);
            let mask_path = format!("{}/mask/{file}", class.name);
            save_rgb(&root.join(&image_path), img.view())?;
            save_mask(&root.join(&mask_path), mask.view())?;
            Ok(ManifestEntry {
                image_path,
                mask_path,
                class_id,
                patient_id: patient,
                stain_tag: tag.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        root: root.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}
