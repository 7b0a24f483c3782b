//! Partial-label corpus handling: on-disk manifest and rasters, per-class
//! downsampling and patch extraction, crop balancing and patient-level splits.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Registry, TissueClass};

pub use synth::{
    default_structures, generate_synthetic, render_background, render_structure, shift_hue, synth_composite, synth_image,
    ShapeFamily, StructureSpec, SynthConfig,
};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPLITS_FILE: &str = "splits.csv";

/// An image patch with the mask of exactly one labeled class.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `H x W`, values in `{0, 1}`.
    pub mask: Array2<u8>,
    pub class_id: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub class_id: usize,
    pub patient_id: String,
    pub stain_tag: String,
}

/// Corpus index. Paths in entries are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Reads `root/manifest.csv` and checks every entry against the registry
    /// and the file system.
    pub fn load(root: &Path, registry: &Registry) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
            ));
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let entry: ManifestEntry = row.map_err(|e| Error::csv(&path, e))?;
            registry.get(entry.class_id)?;
            if entry.patient_id.trim().is_empty() {
                return Err(Error::Data(format!("empty patient id for {}", entry.image_path)));
            }
            for p in [&entry.image_path, &entry.mask_path] {
                if !root.join(p).is_file() {
                    return Err(Error::io(
                        root.join(p),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                    ));
                }
            }
            entries.push(entry);
        }
        Ok(CorpusManifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.patient_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Loads the image and mask of one entry.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<(Array3<f32>, Array2<u8>)> {
        let image = load_rgb(&self.root.join(&entry.image_path))?;
        let mask = load_mask(&self.root.join(&entry.mask_path))?;
        if image.dim().1 != mask.dim().0 || image.dim().2 != mask.dim().1 {
            return Err(Error::Shape(format!(
                "image {} and mask {} differ in size",
                entry.image_path, entry.mask_path
            )));
        }
        Ok((image, mask))
    }
}

/// Reads an RGB raster into a `3 x H x W` array scaled to `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        raw[(y * w as usize + x) * 3 + c] as f32 / 255.0
    }))
}

pub fn save_rgb(path: &Path, image: ArrayView3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = to_u8(image[[c, y as usize, x as usize]]);
        }
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit mask stored as 0 / 255 and returns it as 0 / 1.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::InvalidMask(format!(
            "{} contains value {v}; masks must be 0 or 255",
            path.display()
        )));
    }
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        (raw[y * w as usize + x] == 255) as u8
    }))
}

pub fn save_mask(path: &Path, mask: ArrayView2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Block-mean downsampling by an integer factor (area interpolation).
pub fn downsample_area(image: ArrayView3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return image.to_owned();
    }
    let (c, h, w) = image.dim();
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f32;
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        image
            .slice(s![ch, y * factor..(y + 1) * factor, x * factor..(x + 1) * factor])
            .sum()
            / norm
    })
}

/// Nearest-neighbour downsampling by an integer factor, sampling block centres.
pub fn downsample_nearest(mask: ArrayView2<u8>, factor: usize) -> Array2<u8> {
    if factor == 1 {
        return mask.to_owned();
    }
    let (h, w) = mask.dim();
    let off = factor / 2;
    Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        mask[[y * factor + off, x * factor + off]]
    })
}

/// Downsamples by the class factor and draws `count` uniformly placed
/// `patch_size` crops.
pub fn extract_patches<R: Rng + ?Sized>(
    image: ArrayView3<f32>,
    mask: ArrayView2<u8>,
    tissue: &TissueClass,
    patch_size: usize,
    count: usize,
    source_id: &str,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    let (img, msk) = prepare_scale(image, mask, tissue, patch_size)?;
    let (_, h, w) = img.dim();
    Ok((0..count)
        .map(|_| {
            let y = rng.random_range(0..=h - patch_size);
            let x = rng.random_range(0..=w - patch_size);
            crop(&img, &msk, y, x, patch_size, tissue.id, source_id)
        })
        .collect())
}

/// Non-overlapping `patch_size` tiles covering the downsampled image; the last
/// row and column are aligned to the border.
pub fn grid_patches(
    image: ArrayView3<f32>,
    mask: ArrayView2<u8>,
    tissue: &TissueClass,
    patch_size: usize,
    source_id: &str,
) -> Result<Vec<PatchSample>> {
    let (img, msk) = prepare_scale(image, mask, tissue, patch_size)?;
    let (_, h, w) = img.dim();
    let mut out = Vec::new();
    for y in tile_origins(h, patch_size, patch_size) {
        for x in tile_origins(w, patch_size, patch_size) {
            out.push(crop(&img, &msk, y, x, patch_size, tissue.id, source_id));
        }
    }
    Ok(out)
}

/// Window origins along one axis with the given stride; the final window is
/// aligned to the far border so every position is covered.
pub fn tile_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window <= len && stride > 0);
    let mut origins: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *origins.last().expect("at least one origin") != len - window {
        origins.push(len - window);
    }
    origins
}

fn prepare_scale(
    image: ArrayView3<f32>,
    mask: ArrayView2<u8>,
    tissue: &TissueClass,
    patch_size: usize,
) -> Result<(Array3<f32>, Array2<u8>)> {
    let (c, h, w) = image.dim();
    if c != 3 || (h, w) != mask.dim() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} do not describe the same RGB raster",
            image.dim(),
            mask.dim()
        )));
    }
    let f = tissue.downsample_factor;
    if patch_size == 0 || h / f < patch_size || w / f < patch_size {
        return Err(Error::Shape(format!(
            "{h}x{w} image downsampled by {f} is smaller than a {patch_size} patch"
        )));
    }
    Ok((downsample_area(image, f), downsample_nearest(mask, f)))
}

fn crop(
    img: &Array3<f32>,
    msk: &Array2<u8>,
    y: usize,
    x: usize,
    size: usize,
    class_id: usize,
    source_id: &str,
) -> PatchSample {
    PatchSample {
        image: img.slice(s![.., y..y + size, x..x + size]).to_owned(),
        mask: msk.slice(s![y..y + size, x..x + size]).to_owned(),
        class_id,
        source_id: source_id.to_string(),
    }
}

/// Crops per image so every class yields at least `target_per_class` patches.
pub fn balance_counts(
    per_class_image_counts: &BTreeMap<usize, usize>,
    target_per_class: usize,
) -> Result<BTreeMap<usize, usize>> {
    per_class_image_counts
        .iter()
        .map(|(&class, &n)| {
            if n == 0 {
                Err(Error::Data(format!("class {class} has no images")))
            } else {
                Ok((class, target_per_class.div_ceil(n)))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratio: (u32, u32, u32),
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    patient_id: String,
    split: Split,
}

impl SplitPlan {
    pub fn split_of(&self, patient: &str) -> Option<Split> {
        if self.train.contains(patient) {
            Some(Split::Train)
        } else if self.val.contains(patient) {
            Some(Split::Val)
        } else if self.test.contains(patient) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for (split, set) in [(Split::Train, &self.train), (Split::Val, &self.val), (Split::Test, &self.test)] {
            for p in set {
                w.serialize(SplitRow {
                    patient_id: p.clone(),
                    split,
                })
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut plan = SplitPlan {
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
            ratio: (6, 1, 3),
        };
        for row in r.deserialize() {
            let row: SplitRow = row.map_err(|e| Error::csv(path, e))?;
            if plan.split_of(&row.patient_id).is_some() {
                return Err(Error::Data(format!("patient {} listed twice", row.patient_id)));
            }
            match row.split {
                Split::Train => plan.train.insert(row.patient_id),
                Split::Val => plan.val.insert(row.patient_id),
                Split::Test => plan.test.insert(row.patient_id),
            };
        }
        Ok(plan)
    }
}

/// Largest-remainder allocation of `n` items over `ratio`, with at least one
/// item per part. Remainder ties go to the earlier part (train, val, test).
pub fn split_sizes(n: usize, ratio: (u32, u32, u32)) -> Result<(usize, usize, usize)> {
    let parts = [ratio.0 as u64, ratio.1 as u64, ratio.2 as u64];
    let total: u64 = parts.iter().sum();
    if n < 3 {
        return Err(Error::Data(format!("{n} patients cannot fill three splits")));
    }
    if parts.contains(&0) {
        return Err(Error::Data("split ratio entries must be positive".into()));
    }
    // Exact integer arithmetic: quota_i = n * r_i / total.
    let mut sizes: Vec<usize> = parts.iter().map(|&r| (n as u64 * r / total) as usize).collect();
    let mut rema: Vec<(u64, usize)> = parts
        .iter()
        .enumerate()
        .map(|(i, &r)| (n as u64 * r % total, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = sizes.iter().sum();
    for &(_, i) in rema.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..3).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).expect("three parts");
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    Ok((sizes[0], sizes[1], sizes[2]))
}

/// Seeded patient-level split.
pub fn split_dataset(patients: &[String], ratio: (u32, u32, u32), seed: u64) -> Result<SplitPlan> {
    let mut unique: Vec<String> = patients
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (tr, va, _) = split_sizes(unique.len(), ratio)?;
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = unique.into_iter();
    let train = it.by_ref().take(tr).collect();
    let val = it.by_ref().take(va).collect();
    let test = it.collect();
    Ok(SplitPlan {
        train,
        val,
        test,
        ratio,
    })
}

/// Manifest entries grouped by class for one split.
pub fn entries_for_split<'a>(
    manifest: &'a CorpusManifest,
    plan: &SplitPlan,
    split: Split,
) -> BTreeMap<usize, Vec<&'a ManifestEntry>> {
    let mut out: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        if plan.split_of(&e.patient_id) == Some(split) {
            out.entry(e.class_id).or_default().push(e);
        }
    }
    out
}

/// Balanced random training crops for one split: every class yields at least
/// `target_per_class` patches.
pub fn build_training_set(
    manifest: &CorpusManifest,
    plan: &SplitPlan,
    split: Split,
    registry: &Registry,
    patch_size: usize,
    target_per_class: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<PatchSample>>> {
    let groups = entries_for_split(manifest, plan, split);
    let counts: BTreeMap<usize, usize> = registry
        .classes()
        .iter()
        .map(|c| (c.id, groups.get(&c.id).map_or(0, Vec::len)))
        .collect();
    let per_image = balance_counts(&counts, target_per_class)?;
    let jobs: Vec<(usize, usize, &ManifestEntry)> = groups
        .iter()
        .flat_map(|(&c, v)| v.iter().enumerate().map(move |(k, e)| (c, k, *e)))
        .collect();
    let patches = jobs
        .into_par_iter()
        .map(|(c, k, e)| {
            let tissue = registry.get(c)?;
            let (img, mask) = manifest.load_entry(e)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((c as u64) << 32) | k as u64);
            extract_patches(img.view(), mask.view(), tissue, patch_size, per_image[&c], &e.patient_id, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: BTreeMap<usize, Vec<PatchSample>> = BTreeMap::new();
    for p in patches.into_iter().flatten() {
        out.entry(p.class_id).or_default().push(p);
    }
    Ok(out)
}

/// Deterministic tiles of every image in one split, for validation and testing.
pub fn build_eval_set(
    manifest: &CorpusManifest,
    plan: &SplitPlan,
    split: Split,
    registry: &Registry,
    patch_size: usize,
) -> Result<BTreeMap<usize, Vec<PatchSample>>> {
    let groups = entries_for_split(manifest, plan, split);
    let jobs: Vec<&ManifestEntry> = groups.values().flatten().copied().collect();
    let tiles = jobs
        .into_par_iter()
        .map(|e| {
            let tissue = registry.get(e.class_id)?;
            let (img, mask) = manifest.load_entry(e)?;
            grid_patches(img.view(), mask.view(), tissue, patch_size, &e.patient_id)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: BTreeMap<usize, Vec<PatchSample>> = BTreeMap::new();
    for p in tiles.into_iter().flatten() {
        out.entry(p.class_id).or_default().push(p);
    }
    Ok(out)
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn no_duplicates<'a>(items: impl Iterator<Item = &'a str>) -> bool {
    let mut seen = HashSet::new();
    items.into_iter().all(|i| seen.insert(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tissue(factor: usize) -> TissueClass {
        TissueClass {
            id: 3,
            name: "CAP".into(),
            downsample_factor: factor,
            microns_per_pixel: 0.25 * factor as f64,
        }
    }

    #[test]
    fn patches_from_large_image() {
        let img = Array3::<f32>::from_elem((3, 3000, 3000), 0.5);
        let mask = Array2::<u8>::zeros((3000, 3000));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = extract_patches(img.view(), mask.view(), &tissue(1), 256, 5, "P1", &mut rng).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|s| s.image.dim() == (3, 256, 256) && s.class_id == 3));
    }

    #[test]
    fn single_crop_position_after_downsampling() {
        let img = Array3::<f32>::from_shape_fn((3, 512, 512), |(c, y, x)| (c + y + x) as f32 / 2000.0);
        let mask = Array2::<u8>::ones((512, 512));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = extract_patches(img.view(), mask.view(), &tissue(2), 256, 3, "P1", &mut rng).unwrap();
        let full = downsample_area(img.view(), 2);
        for s in &p {
            assert_eq!(s.image, full);
            assert!(s.mask.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = Array3::<f32>::zeros((3, 300, 300));
        let mask = Array2::<u8>::zeros((300, 300));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            extract_patches(img.view(), mask.view(), &tissue(2), 256, 1, "P", &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn area_and_nearest_downsampling() {
        let img = Array3::from_shape_fn((3, 4, 4), |(_, y, x)| (y * 4 + x) as f32);
        let d = downsample_area(img.view(), 2);
        assert_eq!(d[[0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let mut mask = Array2::<u8>::zeros((4, 4));
        mask[[1, 1]] = 1;
        assert_eq!(downsample_nearest(mask.view(), 2)[[0, 0]], 1);
        mask[[1, 1]] = 0;
        mask[[0, 0]] = 1;
        assert_eq!(downsample_nearest(mask.view(), 2)[[0, 0]], 0);
    }

    #[test]
    fn balance_examples() {
        let counts = BTreeMap::from([(1, 100), (2, 50)]);
        assert_eq!(balance_counts(&counts, 200).unwrap(), BTreeMap::from([(1, 2), (2, 4)]));
        assert_eq!(
            balance_counts(&BTreeMap::from([(1, 3)]), 10).unwrap(),
            BTreeMap::from([(1, 4)])
        );
        let eq = balance_counts(&BTreeMap::from([(1, 7), (2, 7)]), 30).unwrap();
        assert_eq!(eq[&1], eq[&2]);
        assert!(balance_counts(&BTreeMap::from([(1, 0)]), 10).is_err());
    }

    #[test]
    fn split_size_examples() {
        assert_eq!(split_sizes(10, (6, 1, 3)).unwrap(), (6, 1, 3));
        assert_eq!(split_sizes(125, (6, 1, 3)).unwrap(), (75, 13, 37));
        assert_eq!(split_sizes(3, (6, 1, 3)).unwrap(), (1, 1, 1));
        assert!(split_sizes(2, (6, 1, 3)).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let patients: Vec<String> = (0..20).map(|i| format!("P{i:03}")).collect();
        assert_eq!(
            split_dataset(&patients, (6, 1, 3), 4).unwrap(),
            split_dataset(&patients, (6, 1, 3), 4).unwrap()
        );
    }

    #[test]
    fn split_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let patients: Vec<String> = (0..12).map(|i| format!("P{i}")).collect();
        let plan = split_dataset(&patients, (6, 1, 3), 9).unwrap();
        let path = dir.path().join(SPLITS_FILE);
        plan.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("patient_id,split\n"));
        let back = SplitPlan::read(&path).unwrap();
        assert_eq!(back.train, plan.train);
        assert_eq!(back.val, plan.val);
        assert_eq!(back.test, plan.test);
    }

    #[test]
    fn mask_encoding_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut mask = Array2::<u8>::zeros((4, 4));
        mask[[1, 2]] = 1;
        save_mask(&path, mask.view()).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
        let bad = image::GrayImage::from_fn(4, 4, |x, _| image::Luma([if x == 0 { 128 } else { 0 }]));
        bad.save(&path).unwrap();
        assert!(matches!(load_mask(&path), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn tile_origins_cover_axis() {
        assert_eq!(tile_origins(512, 256, 256), vec![0, 256]);
        assert_eq!(tile_origins(512, 256, 128), vec![0, 128, 256]);
        assert_eq!(tile_origins(300, 256, 256), vec![0, 44]);
        assert_eq!(tile_origins(256, 256, 256), vec![0]);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_complete(n in 3usize..200, seed in 0u64..1000, a in 1u32..10, b in 1u32..10, c in 1u32..10) {
            let patients: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
            let plan = split_dataset(&patients, (a, b, c), seed).unwrap();
            prop_assert!(plan.train.is_disjoint(&plan.val));
            prop_assert!(plan.train.is_disjoint(&plan.test));
            prop_assert!(plan.val.is_disjoint(&plan.test));
            let (x, y, z) = plan.sizes();
            prop_assert_eq!(x + y + z, n);
            prop_assert!(x >= 1 && y >= 1 && z >= 1);
        }

        #[test]
        fn patches_stay_inside(size in 32usize..96, patch in 8usize..32, factor in 1usize..3, seed in 0u64..100) {
            prop_assume!(size / factor >= patch);
            let img = Array3::<f32>::from_shape_fn((3, size, size), |(_, y, x)| (y * size + x) as f32);
            let mask = Array2::<u8>::ones((size, size));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = tissue(factor);
            for p in extract_patches(img.view(), mask.view(), &t, patch, 4, "P", &mut rng).unwrap() {
                prop_assert_eq!(p.image.dim(), (3, patch, patch));
                prop_assert!(p.mask.iter().all(|&v| v == 1));
            }
        }
    }
}
