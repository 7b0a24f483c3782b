//! Dice, symmetric Hausdorff and mean surface distance, and per-class
//! evaluation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{stack, Array2, Array3, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::model::OmniSeg;
use crate::registry::Registry;

pub const FOREGROUND_THRESHOLD: f32 = 0.5;

/// Published average row of the single-network model (Dice %, HD and MSD in
/// microns). Kept for side-by-side reporting.
pub const REFERENCE_AVERAGE: (f64, f64, f64) = (87.70, 58.24, 12.45);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub class_id: usize,
    pub dice_pct: f64,
    pub hd_microns: f64,
    pub msd_microns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricContext {
    pub microns_per_pixel: f64,
    pub image_diagonal_microns: f64,
}

impl MetricContext {
    pub fn new(microns_per_pixel: f64, image_diagonal_microns: f64) -> Result<Self> {
        if !(microns_per_pixel > 0.0 && microns_per_pixel.is_finite()) || !(image_diagonal_microns > 0.0) {
            return Err(Error::Numeric(format!(
                "invalid metric scale {microns_per_pixel} / {image_diagonal_microns}"
            )));
        }
        Ok(MetricContext {
            microns_per_pixel,
            image_diagonal_microns,
        })
    }

    /// Context for an `h x w` image at the given scale.
    pub fn for_image(h: usize, w: usize, microns_per_pixel: f64) -> Result<Self> {
        Self::new(microns_per_pixel, (h as f64).hypot(w as f64) * microns_per_pixel)
    }
}

fn check_pair(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    Ok(())
}

pub fn dice_pct(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    ndarray::Zip::from(&pred).and(&gt).for_each(|&a, &b| {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    });
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// Foreground pixels with a background 4-neighbour; outside counts as background.
pub fn surface_pixels(mask: ArrayView2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest seed pixel (separable
/// lower-envelope transform). Infinite when there are no seeds.
fn squared_distance_to(seeds: &[(usize, usize)], h: usize, w: usize) -> Array2<f64> {
    let mut f = Array2::from_elem((h, w), f64::INFINITY);
    for &(y, x) in seeds {
        f[[y, x]] = 0.0;
    }
    if seeds.is_empty() {
        return f;
    }
    let mut buf = Vec::new();
    for mut col in f.columns_mut() {
        buf.clear();
        buf.extend(col.iter().copied());
        let d = edt_1d(&buf);
        col.iter_mut().zip(d).for_each(|(c, v)| *c = v);
    }
    for mut row in f.rows_mut() {
        buf.clear();
        buf.extend(row.iter().copied());
        let d = edt_1d(&buf);
        row.iter_mut().zip(d).for_each(|(c, v)| *c = v);
    }
    f
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return out;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            if inter(q, p) <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(inter(q, *v.last().expect("nonempty")));
        }
        v.push(q);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    out
}

/// Distances in pixels from each surface pixel of one mask to the other
/// surface, in both directions.
struct SurfaceDistances {
    a_to_b: Vec<f64>,
    b_to_a: Vec<f64>,
}

fn surface_distances(a: ArrayView2<u8>, b: ArrayView2<u8>) -> SurfaceDistances {
    let (h, w) = a.dim();
    let sa = surface_pixels(a);
    let sb = surface_pixels(b);
    let db = squared_distance_to(&sb, h, w);
    let da = squared_distance_to(&sa, h, w);
    SurfaceDistances {
        a_to_b: sa.iter().map(|&p| db[p].sqrt()).collect(),
        b_to_a: sb.iter().map(|&p| da[p].sqrt()).collect(),
    }
}

enum Emptiness {
    Both,
    One,
    Neither,
}

fn emptiness(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Emptiness {
    match (pred.iter().any(|&v| v != 0), gt.iter().any(|&v| v != 0)) {
        (false, false) => Emptiness::Both,
        (true, true) => Emptiness::Neither,
        _ => Emptiness::One,
    }
}

pub fn hausdorff_microns(pred: ArrayView2<u8>, gt: ArrayView2<u8>, ctx: &MetricContext) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(match emptiness(pred, gt) {
        Emptiness::Both => 0.0,
        Emptiness::One => ctx.image_diagonal_microns,
        Emptiness::Neither => {
            let d = surface_distances(pred, gt);
            d.a_to_b.iter().chain(&d.b_to_a).fold(0.0f64, |m, &v| m.max(v)) * ctx.microns_per_pixel
        }
    })
}

pub fn msd_microns(pred: ArrayView2<u8>, gt: ArrayView2<u8>, ctx: &MetricContext) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(match emptiness(pred, gt) {
        Emptiness::Both => 0.0,
        Emptiness::One => ctx.image_diagonal_microns,
        Emptiness::Neither => {
            let d = surface_distances(pred, gt);
            let n = d.a_to_b.len() + d.b_to_a.len();
            d.a_to_b.iter().chain(&d.b_to_a).sum::<f64>() / n as f64 * ctx.microns_per_pixel
        }
    })
}

pub fn score_pair(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class_id: usize, ctx: &MetricContext) -> Result<SegScores> {
    Ok(SegScores {
        class_id,
        dice_pct: dice_pct(pred, gt)?,
        hd_microns: hausdorff_microns(pred, gt, ctx)?,
        msd_microns: msd_microns(pred, gt, ctx)?,
    })
}

pub fn binarize(foreground: ArrayView2<f32>) -> Array2<u8> {
    foreground.mapv(|p| (p >= FOREGROUND_THRESHOLD) as u8)
}

/// Anything that returns class-conditioned foreground probabilities for a batch.
pub trait Segmenter: Sync {
    fn foreground(&self, images: ArrayView4<f32>, class_ids: &[usize]) -> Result<Array3<f32>>;
}

impl Segmenter for OmniSeg<f32> {
    fn foreground(&self, images: ArrayView4<f32>, class_ids: &[usize]) -> Result<Array3<f32>> {
        Ok(self.predict(images, class_ids)?.foreground())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class_id: usize,
    pub name: String,
    pub samples: usize,
    pub dice_pct: f64,
    pub hd_microns: f64,
    pub msd_microns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<ClassScores>,
    pub mean_dice_pct: f64,
    pub mean_hd_microns: f64,
    pub mean_msd_microns: f64,
}

impl EvaluationReport {
    pub fn dice_of(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).map(|c| c.dice_pct)
    }
}

/// Class-conditioned inference on every sample, per-sample scores, per-class
/// means and their average.
pub fn evaluate_model(
    model: &impl Segmenter,
    samples: &BTreeMap<usize, Vec<PatchSample>>,
    registry: &Registry,
    batch_size: usize,
) -> Result<EvaluationReport> {
    let batch_size = batch_size.max(1);
    let mut classes = Vec::new();
    for tissue in registry.classes() {
        let group = samples
            .get(&tissue.id)
            .filter(|g| !g.is_empty())
            .ok_or_else(|| Error::IncompleteEvaluation(format!("no samples for class {}", tissue.name)))?;
        let mut scores = Vec::with_capacity(group.len());
        for chunk in group.chunks(batch_size) {
            let views: Vec<_> = chunk.iter().map(|s| s.image.view()).collect();
            let images = stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let ids = vec![tissue.id; chunk.len()];
            let fg = model.foreground(images.view(), &ids)?;
            let chunk_scores = chunk
                .par_iter()
                .zip(fg.outer_iter().collect::<Vec<_>>())
                .map(|(s, p)| {
                    let (h, w) = s.mask.dim();
                    let ctx = MetricContext::for_image(h, w, tissue.microns_per_pixel)?;
                    score_pair(binarize(p).view(), s.mask.view(), tissue.id, &ctx)
                })
                .collect::<Result<Vec<_>>>()?;
            scores.extend(chunk_scores);
        }
        let n = scores.len() as f64;
        classes.push(ClassScores {
            class_id: tissue.id,
            name: tissue.name.clone(),
            samples: scores.len(),
            dice_pct: scores.iter().map(|s| s.dice_pct).sum::<f64>() / n,
            hd_microns: scores.iter().map(|s| s.hd_microns).sum::<f64>() / n,
            msd_microns: scores.iter().map(|s| s.msd_microns).sum::<f64>() / n,
        });
    }
    let m = classes.len() as f64;
    Ok(EvaluationReport {
        mean_dice_pct: classes.iter().map(|c| c.dice_pct).sum::<f64>() / m,
        mean_hd_microns: classes.iter().map(|c| c.hd_microns).sum::<f64>() / m,
        mean_msd_microns: classes.iter().map(|c| c.msd_microns).sum::<f64>() / m,
        classes,
    })
}

/// CSV with one row per method: class column groups, then the average.
pub fn table_csv(rows: &[(&str, &EvaluationReport)]) -> String {
    let mut out = String::from("method");
    if let Some((_, first)) = rows.first() {
        for c in &first.classes {
            write!(out, ",{0}_dice,{0}_hd,{0}_msd", c.name).expect("string write");
        }
    }
    out.push_str(",avg_dice,avg_hd,avg_msd\n");
    for (label, r) in rows {
        out.push_str(label);
        for c in &r.classes {
            write!(out, ",{:.2},{:.2},{:.2}", c.dice_pct, c.hd_microns, c.msd_microns).expect("string write");
        }
        writeln!(out, ",{:.2},{:.2},{:.2}", r.mean_dice_pct, r.mean_hd_microns, r.mean_msd_microns)
            .expect("string write");
    }
    out
}

/// Fixed-width text rendering of the same table.
pub fn table_text(rows: &[(&str, &EvaluationReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    write!(out, "{:label_w$}", "method").expect("string write");
    for name in first.classes.iter().map(|c| c.name.as_str()).chain(["Average"]) {
        write!(out, " | {name:^23}").expect("string write");
    }
    out.push('\n');
    write!(out, "{:label_w$}", "").expect("string write");
    for _ in 0..=first.classes.len() {
        write!(out, " | {:>7}{:>8}{:>8}", "Dice", "HD", "MSD").expect("string write");
    }
    out.push('\n');
    for (label, r) in rows {
        write!(out, "{label:label_w$}").expect("string write");
        let cells = r
            .classes
            .iter()
            .map(|c| (c.dice_pct, c.hd_microns, c.msd_microns))
            .chain([(r.mean_dice_pct, r.mean_hd_microns, r.mean_msd_microns)]);
        for (d, h, m) in cells {
            write!(out, " | {d:>7.2}{h:>8.2}{m:>8.2}").expect("string write");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, on: &[(usize, usize)]) -> Array2<u8> {
        let mut m = Array2::zeros((h, w));
        for &p in on {
            m[p] = 1;
        }
        m
    }

    fn ctx() -> MetricContext {
        MetricContext::new(0.25, 90.5).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = grid(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = grid(4, 4, &[(0, 0), (0, 1), (3, 2), (3, 3)]);
        assert_eq!(dice_pct(a.view(), a.view()).unwrap(), 100.0);
        assert_eq!(dice_pct(a.view(), grid(4, 4, &[(3, 3)]).view()).unwrap(), 0.0);
        assert_eq!(dice_pct(a.view(), b.view()).unwrap(), 50.0);
        let z = Array2::<u8>::zeros((4, 4));
        assert_eq!(dice_pct(z.view(), z.view()).unwrap(), 100.0);
        assert!(matches!(dice_pct(a.view(), Array2::zeros((3, 4)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn surface_examples() {
        assert_eq!(surface_pixels(grid(3, 3, &[(1, 1)]).view()), vec![(1, 1)]);
        let mut block = Array2::<u8>::zeros((5, 5));
        block.slice_mut(ndarray::s![1..4, 1..4]).fill(1);
        let s = surface_pixels(block.view());
        assert_eq!(s.len(), 8);
        assert!(!s.contains(&(2, 2)));
        assert!(surface_pixels(Array2::<u8>::zeros((4, 4)).view()).is_empty());
    }

    #[test]
    fn distance_examples() {
        let a = grid(5, 5, &[(0, 0)]);
        let b = grid(5, 5, &[(0, 4)]);
        assert_eq!(hausdorff_microns(a.view(), b.view(), &ctx()).unwrap(), 1.0);
        assert_eq!(msd_microns(a.view(), b.view(), &ctx()).unwrap(), 1.0);
        assert_eq!(hausdorff_microns(a.view(), a.view(), &ctx()).unwrap(), 0.0);
        assert_eq!(msd_microns(a.view(), a.view(), &ctx()).unwrap(), 0.0);
        let z = Array2::<u8>::zeros((5, 5));
        assert_eq!(hausdorff_microns(z.view(), b.view(), &ctx()).unwrap(), 90.5);
        assert_eq!(msd_microns(z.view(), z.view(), &ctx()).unwrap(), 0.0);
        assert_eq!(hausdorff_microns(z.view(), z.view(), &ctx()).unwrap(), 0.0);
    }

    fn brute_surface(m: &Array2<u8>) -> Vec<(usize, usize)> {
        let (h, w) = m.dim();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if m[[y, x]] == 0 {
                    continue;
                }
                let nb = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)];
                let edge = nb.iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || m[[ny as usize, nx as usize]] == 0
                });
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn brute_directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
        a.iter()
            .map(|&(ay, ax)| {
                b.iter()
                    .map(|&(by, bx)| ((ay as f64 - by as f64).powi(2) + (ax as f64 - bx as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let c = ctx();
        for _ in 0..200 {
            let density = rng.random_range(0.0..0.6);
            let a = Array2::from_shape_simple_fn((16, 16), || rng.random_bool(density) as u8);
            let density = rng.random_range(0.0..0.6);
            let b = Array2::from_shape_simple_fn((16, 16), || rng.random_bool(density) as u8);

            let inter = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count();
            let (na, nb) = (a.sum() as usize, b.sum() as usize);
            let dice = if na + nb == 0 { 100.0 } else { 100.0 * 2.0 * inter as f64 / (na + nb) as f64 };
            assert_eq!(dice_pct(a.view(), b.view()).unwrap(), dice);

            let (sa, sb) = (brute_surface(&a), brute_surface(&b));
            assert_eq!(surface_pixels(a.view()), sa);
            let (hd, msd) = match (sa.is_empty(), sb.is_empty()) {
                (true, true) => (0.0, 0.0),
                (true, false) | (false, true) => (c.image_diagonal_microns, c.image_diagonal_microns),
                _ => {
                    let ab = brute_directed(&sa, &sb);
                    let ba = brute_directed(&sb, &sa);
                    let all: Vec<f64> = ab.iter().chain(&ba).copied().collect();
                    let hd = all.iter().fold(0.0f64, |m, &v| m.max(v));
                    let msd = all.iter().sum::<f64>() / all.len() as f64;
                    (hd * c.microns_per_pixel, msd * c.microns_per_pixel)
                }
            };
            let got_hd = hausdorff_microns(a.view(), b.view(), &c).unwrap();
            let got_msd = msd_microns(a.view(), b.view(), &c).unwrap();
            assert!((got_hd - hd).abs() <= 1e-9, "{got_hd} vs {hd}");
            assert!((got_msd - msd).abs() <= 1e-9, "{got_msd} vs {msd}");
            assert!(got_hd >= got_msd && got_msd >= 0.0);
        }
    }

    struct Oracle;

    // Channel 0 carries the ground truth in the oracle test images.
    impl Segmenter for Oracle {
        fn foreground(&self, images: ArrayView4<f32>, _: &[usize]) -> Result<Array3<f32>> {
            Ok(images.index_axis(Axis(1), 0).to_owned())
        }
    }

    struct Background;

    impl Segmenter for Background {
        fn foreground(&self, images: ArrayView4<f32>, _: &[usize]) -> Result<Array3<f32>> {
            let (n, _, h, w) = images.dim();
            Ok(Array3::zeros((n, h, w)))
        }
    }

    fn oracle_samples(reg: &Registry) -> BTreeMap<usize, Vec<PatchSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        reg.classes()
            .iter()
            .map(|t| {
                let v = (0..3)
                    .map(|_| {
                        let mut mask = Array2::<u8>::zeros((16, 16));
                        let (y, x) = (rng.random_range(0..12), rng.random_range(0..12));
                        mask.slice_mut(ndarray::s![y..y + 4, x..x + 4]).fill(1);
                        let mut image = Array3::<f32>::zeros((3, 16, 16));
                        image.index_axis_mut(Axis(0), 0).assign(&mask.mapv(f32::from));
                        PatchSample {
                            image,
                            mask,
                            class_id: t.id,
                            source_id: "P".into(),
                        }
                    })
                    .collect();
                (t.id, v)
            })
            .collect()
    }

    #[test]
    fn oracle_and_background_models() {
        let reg = Registry::renal_default();
        let samples = oracle_samples(&reg);
        let r = evaluate_model(&Oracle, &samples, &reg, 2).unwrap();
        assert_eq!(r.classes.len(), 6);
        for c in &r.classes {
            assert_eq!((c.dice_pct, c.hd_microns, c.msd_microns), (100.0, 0.0, 0.0));
        }
        let r = evaluate_model(&Background, &samples, &reg, 4).unwrap();
        let diag = 16f64.hypot(16.0) * 0.25;
        for c in &r.classes {
            assert_eq!(c.dice_pct, 0.0);
            assert!((c.hd_microns - diag).abs() < 1e-12);
        }
        let csv = table_csv(&[("oracle", &r)]);
        assert!(csv.starts_with("method,DT_dice,DT_hd,DT_msd,PT_dice"));
        assert_eq!(csv.lines().count(), 2);
        assert!(table_text(&[("oracle", &r)]).contains("Average"));
    }

    #[test]
    fn missing_class_is_incomplete() {
        let reg = Registry::renal_default();
        let mut samples = oracle_samples(&reg);
        samples.remove(&4);
        assert!(matches!(
            evaluate_model(&Oracle, &samples, &reg, 2),
            Err(Error::IncompleteEvaluation(_))
        ));
    }

    #[test]
    fn real_model_scores_are_in_range() {
        let reg = Registry::renal_default();
        let model = OmniSeg::<f32>::new(&crate::BackboneConfig::tiny(&[4, 8], 2), 6, 1).unwrap();
        let samples = oracle_samples(&reg);
        let r = evaluate_model(&model, &samples, &reg, 3).unwrap();
        for c in &r.classes {
            assert!((0.0..=100.0).contains(&c.dice_pct) && c.hd_microns >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_covariant(
            a in proptest::collection::vec(0u8..2, 100),
            b in proptest::collection::vec(0u8..2, 100),
            k in 0.5f64..8.0,
        ) {
            let a = Array2::from_shape_vec((10, 10), a).unwrap();
            let b = Array2::from_shape_vec((10, 10), b).unwrap();
            let c1 = MetricContext::new(0.25, 10.0).unwrap();
            let ck = MetricContext::new(0.25 * k, 10.0 * k).unwrap();
            prop_assert_eq!(dice_pct(a.view(), b.view()).unwrap(), dice_pct(b.view(), a.view()).unwrap());
            let h1 = hausdorff_microns(a.view(), b.view(), &c1).unwrap();
            prop_assert!((h1 - hausdorff_microns(b.view(), a.view(), &c1).unwrap()).abs() < 1e-12);
            let m1 = msd_microns(a.view(), b.view(), &c1).unwrap();
            prop_assert!((m1 - msd_microns(b.view(), a.view(), &c1).unwrap()).abs() < 1e-12);
            prop_assert!((hausdorff_microns(a.view(), b.view(), &ck).unwrap() - k * h1).abs() < 1e-9);
            prop_assert!((msd_microns(a.view(), b.view(), &ck).unwrap() - k * m1).abs() < 1e-9);
        }
    }
}
