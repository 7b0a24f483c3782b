use std::fs;
use std::path::{Path, PathBuf};

use omniseg_core::aggregator::{
    merge_labels, overlay_to_rgb8, render_overlay, save_labels, save_probability_map, segment_class, Palette,
};
use omniseg_core::checkpoint::{load_checkpoint, Checkpoint};
use omniseg_core::data::{
    build_eval_set, build_training_set, generate_synthetic, load_rgb, split_dataset, CorpusManifest, Split, SplitPlan,
    SPLITS_FILE,
};
use omniseg_core::metrics::{evaluate_model, table_csv, table_text};
use omniseg_core::trainer::{fit, BEST_CHECKPOINT};
use omniseg_core::{Error, OmniSeg, Registry, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const LABELS_FILE: &str = "labels.png";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const SUMMARY_FILE: &str = "aggregate.json";

pub fn probability_file(class_name: &str) -> String {
    format!("prob_{class_name}.png")
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidClass { .. } | Error::UnknownTissue(_) => 1,
        Error::Checkpoint(_) => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn synth(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let registry = config.registry()?;
    let root = out.unwrap_or(&config.data.root);
    let manifest = generate_synthetic(&config.data.synth, &registry, root)?;
    let plan = split_dataset(&manifest.patients(), config.data.split_ratio, config.seed)?;
    plan.write(&root.join(SPLITS_FILE))?;
    let (train, val, test) = plan.sizes();
    println!(
        "{}",
        json!({
            "root": root,
            "manifest_rows": manifest.entries.len(),
            "classes": registry.num_classes(),
            "patients": manifest.patients().len(),
            "split": {"train": train, "val": val, "test": test},
        })
    );
    Ok(())
}

fn load_corpus(config: &RunConfig, registry: &Registry) -> Result<(CorpusManifest, SplitPlan)> {
    let root = &config.data.root;
    let manifest = CorpusManifest::load(root, registry)?;
    let splits = root.join(SPLITS_FILE);
    let plan = if splits.exists() {
        SplitPlan::read(&splits)?
    } else {
        split_dataset(&manifest.patients(), config.data.split_ratio, config.seed)?
    };
    Ok((manifest, plan))
}

pub fn train(config: &RunConfig, out: &Path) -> Result<()> {
    let registry = config.registry()?;
    let (manifest, plan) = load_corpus(config, &registry)?;
    let patch = config.data.synth.patch_size;
    let train_set = build_training_set(
        &manifest,
        &plan,
        Split::Train,
        &registry,
        patch,
        config.data.target_per_class,
        config.seed,
    )?;
    let val_set = build_eval_set(&manifest, &plan, Split::Val, &registry, patch)?;
    let mut model = OmniSeg::<f32>::new(&config.backbone, registry.num_classes(), config.seed)?;
    let outcome = fit(
        &mut model,
        &train_set,
        &val_set,
        &registry,
        &config.train,
        &config.loss,
        Some(out),
        |stats, report| {
            let dice: serde_json::Map<_, _> = report
                .classes
                .iter()
                .map(|c| (c.name.clone(), json!(c.dice_pct)))
                .collect();
            println!(
                "{}",
                json!({
                    "epoch": stats.epoch,
                    "lr": stats.lr,
                    "loss": stats.mean_loss,
                    "batches": stats.batches,
                    "val_mean_dice": report.mean_dice_pct,
                    "val_dice": dice,
                })
            );
        },
    )?;
    println!(
        "{}",
        json!({
            "best_epoch": outcome.best_epoch,
            "best_mean_dice": outcome.best_report().mean_dice_pct,
            "checkpoint": out.join(BEST_CHECKPOINT),
        })
    );
    Ok(())
}

/// Loads a checkpoint and checks it against the configured classes and
/// backbone.
pub fn load_compatible(config: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let registry = config.registry()?;
    if ck.registry.num_classes() != registry.num_classes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, config {}",
            ck.registry.num_classes(),
            registry.num_classes()
        )));
    }
    if ck.registry != registry {
        return Err(Error::Checkpoint("checkpoint class registry differs from config".into()));
    }
    if ck.model.backbone_config() != &config.backbone {
        return Err(Error::Checkpoint(format!(
            "checkpoint backbone {:?} differs from config {:?}",
            ck.model.backbone_config().channel_ladder,
            config.backbone.channel_ladder
        )));
    }
    Ok(ck)
}

pub fn eval(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_compatible(config, checkpoint)?;
    let (manifest, plan) = load_corpus(config, &ck.registry)?;
    let test = build_eval_set(&manifest, &plan, Split::Test, &ck.registry, config.data.synth.patch_size)?;
    let report = evaluate_model(&ck.model, &test, &ck.registry, config.metrics.batch_size)?;
    create_dir(out)?;
    let rows = [("omniseg", &report)];
    write_file(&out.join(METRICS_CSV), &table_csv(&rows))?;
    let text = table_text(&rows);
    write_file(&out.join(METRICS_TEXT), &text)?;
    print!("{text}");
    Ok(())
}

pub fn aggregate(config: &RunConfig, checkpoint: &Path, image: &Path, stride: Option<usize>, out: &Path) -> Result<()> {
    let ck = load_compatible(config, checkpoint)?;
    let img = load_rgb(image)?;
    let stride = stride.unwrap_or(config.aggregate.stride);
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let patch = config.data.synth.patch_size;
    let maps = ck
        .registry
        .classes()
        .par_iter()
        .map(|t| segment_class(img.view(), t, &ck.model, patch, stride, config.aggregate.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let labels = merge_labels(&maps, config.aggregate.threshold, &ck.registry)?;
    let palette = Palette::for_classes(ck.registry.num_classes());
    let overlay = render_overlay(img.view(), &labels, &palette, config.aggregate.alpha)?;

    create_dir(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let path = out.join(LABELS_FILE);
    save_labels(&path, &labels)?;
    written.push(path);
    let path = out.join(OVERLAY_FILE);
    overlay_to_rgb8(overlay.view()).save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        source: e,
    })?;
    written.push(path);
    for (t, m) in ck.registry.classes().iter().zip(&maps) {
        let path = out.join(probability_file(&t.name));
        save_probability_map(&path, m)?;
        written.push(path);
    }
    let mut counts = vec![0usize; ck.registry.num_classes() + 1];
    for &l in &labels.labels {
        counts[l as usize] += 1;
    }
    let pixels: serde_json::Map<_, _> = std::iter::once("background".to_string())
        .chain(ck.registry.classes().iter().map(|t| t.name.clone()))
        .zip(counts.iter().map(|&n| json!(n)))
        .collect();
    let path = out.join(SUMMARY_FILE);
    let summary = json!({
        "image": image,
        "checkpoint": checkpoint,
        "stride": stride,
        "patch_size": patch,
        "threshold": config.aggregate.threshold,
        "label_pixels": pixels,
    });
    write_file(&path, &format!("{summary:#}\n"))?;
    written.push(path);
    println!("{}", json!({"files": written, "label_pixels": summary["label_pixels"]}));
    Ok(())
}

pub fn params(config: &RunConfig) -> Result<()> {
    let registry = config.registry()?;
    let model = OmniSeg::<f32>::new(&config.backbone, registry.num_classes(), config.seed)?;
    let b = model.parameter_breakdown();
    println!("backbone parameters:         {}", b.backbone);
    println!("controller parameters:       {}", b.controller);
    println!("dynamic head parameters:     {}", b.dynamic_head);
    println!("total parameters:            {}", b.total);
    println!("multi-network equivalent:    {} ({} x backbone)", b.multi_network_equivalent, registry.num_classes());
    Ok(())
}
