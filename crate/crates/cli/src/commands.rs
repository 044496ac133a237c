//! The pipeline stages. Each reads the outputs of the previous one and
//! writes a directory with its artifacts and a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use menisc_core::checkpoint::{load_checkpoint, read_checkpoint_meta};
use menisc_core::evaluation::plots::{bland_altman_svg, violin_svg, write_projection_png};
use menisc_core::evaluation::{evaluate_test_set, transverse_projection, MetricsReport, Summary};
use menisc_core::phantom::{generate_phantom, sample_specs, EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM};
use menisc_core::preprocess::{compute_crop_box, crop, window_rescale, CropBox};
use menisc_core::split::{split_dataset, Subset};
use menisc_core::training::{self, Sample, Segmenter, TrainOutcome};
use menisc_core::unet::{volume_sample, UNet3D, UNet3DConfig};
use menisc_core::vit::{backbone_samples, FreezePolicy, PromptlessViT, PromptlessViTConfig};
use menisc_core::volume::{BinaryMask, Geometry, Volume};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};
use crate::dataset::{write_image, write_mask, CaseEntry, Dataset, DatasetIndex};
use crate::error::{require, CliError, Result};
use crate::manifest::Manifest;

pub const CROP_BOX_FILE: &str = "crop_box.json";
pub const CHECKPOINT_FILE: &str = "best.safetensors";
pub const CASES_CSV: &str = "per_case.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const DEVICE_ENV: &str = "MENISC_DEVICE";

/// Resolved configuration plus the compute device.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub device: String,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, device: device_from_env()? })
    }

    fn manifest(&self, stage: &str) -> Manifest {
        Manifest::new(stage, &self.config, &self.device)
    }
}

/// Reads the device selection from the environment. Only `cpu` exists.
pub fn device_from_env() -> Result<String> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok("cpu".into()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(d) => Err(CliError::Config(format!("{DEVICE_ENV}={d}: only the cpu device is available"))),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn parse_subset(s: &str) -> Result<Subset> {
    Subset::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| CliError::Config(format!("unknown subset {s:?} (train, validation, test)")))
}

/// Writes `count` phantoms with a seeded subset assignment.
pub fn phantom_gen(ctx: &Context, out: &Path) -> Result<DatasetIndex> {
    let c = &ctx.config;
    let geometry = Geometry::with_default_axes(EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM)?;
    let specs = sample_specs(c.phantom.count, c.seed, c.phantom.noise_level, c.phantom.distractors);
    let ids: Vec<String> = (0..specs.len()).map(|i| format!("phantom-{i:03}")).collect();
    let split = split_dataset(&ids, c.phantom.split_counts(), c.seed)?;
    mkdir(out)?;
    let mut cases = Vec::with_capacity(ids.len());
    for (id, spec) in ids.iter().zip(&specs) {
        let (volume, mask) = generate_phantom(spec, &geometry)?;
        cases.push(CaseEntry {
            id: id.clone(),
            subset: split.subset_of(id).expect("every id is assigned"),
            image: Some(write_image(out, id, &volume)?),
            mask: Some(write_mask(out, id, &mask)?),
        });
    }
    write_text(&out.join("specs.json"), &(serde_json::to_string_pretty(&specs)? + "\n"))?;
    let index = DatasetIndex::new(cases);
    index.save(out)?;
    ctx.manifest("phantom-gen").write(out)?;
    log::info!("wrote {} phantoms to {}", ids.len(), out.display());
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub crop_box: CropBox,
    pub margin: usize,
    pub window: [f32; 2],
    pub source_shape: [usize; 3],
}

/// Windows and crops every case. The box comes from the training and
/// validation masks only and is stored in `crop_box.json`.
pub fn preprocess(ctx: &Context, input: &Path, out: &Path) -> Result<CropRecord> {
    let c = &ctx.config;
    let ds = Dataset::open(input)?;
    let fit: Vec<&CaseEntry> = ds.index.cases.iter().filter(|e| e.subset != Subset::Test).collect();
    if fit.is_empty() {
        return Err(CliError::Config("no training or validation cases to derive the crop box from".into()));
    }
    let masks = fit.iter().map(|e| ds.mask(e)).collect::<Result<Vec<_>>>()?;
    let crop_box = compute_crop_box(&masks, c.preprocess.crop_margin)?;
    let [lo, hi] = c.preprocess.window;
    mkdir(out)?;
    let mut cases = Vec::with_capacity(ds.index.cases.len());
    let mut source_shape = None;
    for e in &ds.index.cases {
        let v = ds.image(e)?;
        source_shape.get_or_insert(v.shape());
        let image = crop(&window_rescale(&v, lo, hi)?, &crop_box)?;
        let mask = match e.mask {
            Some(_) => Some(write_mask(out, &e.id, &crop(&ds.mask(e)?, &crop_box)?)?),
            None => None,
        };
        cases.push(CaseEntry { id: e.id.clone(), subset: e.subset, image: Some(write_image(out, &e.id, &image)?), mask });
    }
    let record = CropRecord {
        crop_box,
        margin: c.preprocess.crop_margin,
        window: c.preprocess.window,
        source_shape: source_shape.unwrap_or(crop_box.stop),
    };
    write_text(&out.join(CROP_BOX_FILE), &(serde_json::to_string_pretty(&record)? + "\n"))?;
    DatasetIndex { axes: ds.index.axes, cases }.save(out)?;
    ctx.manifest("preprocess").input("dataset", input).write(out)?;
    log::info!("crop box {:?}..{:?}, extents {:?}", crop_box.start, crop_box.stop, crop_box.extents());
    Ok(record)
}

fn load_pairs(ds: &Dataset, subset: Subset) -> Result<Vec<(Volume, BinaryMask)>> {
    ds.index.subset(subset).into_iter().map(|e| Ok((ds.image(e)?, ds.mask(e)?))).collect()
}

fn slice_samples(pairs: &[(Volume, BinaryMask)], size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (v, m) in pairs {
        out.extend(backbone_samples(v, m, v.geometry().sagittal_axis()?, size)?);
    }
    Ok(out)
}

pub enum Model {
    UNet(UNet3D<f32>),
    ViT(PromptlessViT<f32>),
}

impl Model {
    fn segmenter(&mut self) -> &mut dyn Segmenter {
        match self {
            Model::UNet(m) => m,
            Model::ViT(m) => m,
        }
    }

    pub fn predict(&self, volume: &Volume, batch: usize) -> Result<BinaryMask> {
        Ok(match self {
            Model::UNet(m) => m.predict_volume(volume)?,
            Model::ViT(m) => m.predict_volume(volume, volume.geometry().sagittal_axis()?, batch)?,
        })
    }

    /// Rebuilds the network recorded in a checkpoint and loads its weights.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        require(path, "checkpoint")?;
        let meta = read_checkpoint_meta(path)?;
        let mut model = match meta.kind.as_str() {
            "unet3d" => {
                let cfg: UNet3DConfig = serde_json::from_value(meta.config.clone())?;
                Model::UNet(UNet3D::new(cfg, 0)?)
            }
            "promptless-vit" => {
                let cfg: PromptlessViTConfig = serde_json::from_value(meta.config["backbone"].clone())?;
                let mut m = PromptlessViT::new(cfg, 0)?;
                let freeze: FreezePolicy = serde_json::from_value(meta.config["freeze"].clone())?;
                m.set_freeze_policy(freeze);
                Model::ViT(m)
            }
            other => return Err(CliError::Runtime(format!("{}: unknown model kind {other:?}", path.display()))),
        };
        load_checkpoint(path, model.segmenter().store_mut())?;
        Ok(model)
    }
}

/// Trains on the `train` subset with early stopping on `validation`.
pub fn train(ctx: &Context, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let c = &ctx.config;
    let ds = Dataset::open(data)?;
    let (train_pairs, val_pairs) = (load_pairs(&ds, Subset::Train)?, load_pairs(&ds, Subset::Validation)?);
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(CliError::Config(format!(
            "{}: need training and validation cases, found {} and {}",
            data.display(),
            train_pairs.len(),
            val_pairs.len()
        )));
    }
    let (mut model, train_set, val_set) = match c.model.kind {
        ModelKind::Unet3d => {
            let m = UNet3D::new(c.model.unet_config()?, c.seed)?;
            log::info!("U-Net with {} parameters", m.parameter_count(true));
            let samples = |p: &[(Volume, BinaryMask)]| p.iter().map(|(v, m)| volume_sample(v, m)).collect::<Result<Vec<_>, _>>();
            (Model::UNet(m), samples(&train_pairs)?, samples(&val_pairs)?)
        }
        ModelKind::PromptlessVit => {
            let cfg = c.model.vit_config()?;
            let mut m = PromptlessViT::new(cfg.clone(), c.seed)?;
            if let Some(path) = &c.model.pretrained {
                require(path, "pretrained weights")?;
                let n = m.load_pretrained(path)?;
                log::info!("loaded {n} pretrained tensors from {}", path.display());
            }
            let trainable = m.set_freeze_policy(c.model.freeze);
            log::info!("promptless ViT with {} parameters, {trainable} trainable", m.parameter_count(false));
            let (tr, va) = (slice_samples(&train_pairs, cfg.image_size)?, slice_samples(&val_pairs, cfg.image_size)?);
            (Model::ViT(m), tr, va)
        }
    };
    mkdir(out)?;
    let mut tc = c.train.clone();
    tc.seed = c.seed;
    let started = Instant::now();
    let outcome = training::train(model.segmenter(), &train_set, &val_set, &tc, Some(out))?;
    log::info!(
        "trained {} epochs in {:.1} s, best validation loss {:.5} at epoch {}",
        outcome.history.train_loss.len(),
        started.elapsed().as_secs_f64(),
        outcome.history.best_val_loss,
        outcome.history.best_epoch
    );
    ctx.manifest("train").input("dataset", data).write(out)?;
    Ok(outcome)
}

/// Writes thresholded predictions for one subset.
pub fn predict(ctx: &Context, run: &Path, data: &Path, subset: Subset, out: &Path) -> Result<DatasetIndex> {
    let model = Model::from_checkpoint(&run.join(CHECKPOINT_FILE))?;
    let ds = Dataset::open(data)?;
    let entries = ds.index.subset(subset);
    if entries.is_empty() {
        return Err(CliError::Config(format!("{}: no {} cases", data.display(), subset.name())));
    }
    mkdir(out)?;
    let mut cases = Vec::with_capacity(entries.len());
    for e in entries {
        let pred = model.predict(&ds.image(e)?, ctx.config.model.predict_batch)?;
        cases.push(CaseEntry { id: e.id.clone(), subset, image: None, mask: Some(write_mask(out, &e.id, &pred)?) });
    }
    if let Ok(text) = fs::read_to_string(data.join(CROP_BOX_FILE)) {
        write_text(&out.join(CROP_BOX_FILE), &text)?;
    }
    let index = DatasetIndex { axes: ds.index.axes, cases };
    index.save(out)?;
    ctx.manifest("predict").input("run", run).input("dataset", data).write(out)?;
    Ok(index)
}

/// Scores every predicted case against the dataset's masks.
pub fn evaluate(ctx: &Context, predictions: &Path, data: &Path, out: &Path) -> Result<MetricsReport> {
    let preds = Dataset::open(predictions)?;
    let ds = Dataset::open(data)?;
    let mut ids = Vec::new();
    let mut pred_masks = Vec::new();
    let mut gt_masks = Vec::new();
    for e in &preds.index.cases {
        let gt = ds
            .index
            .find(&e.id)
            .ok_or_else(|| CliError::Config(format!("case {} is not in {}", e.id, data.display())))?;
        ids.push(e.id.clone());
        pred_masks.push(preds.mask(e)?);
        gt_masks.push(ds.mask(gt)?);
    }
    let report = evaluate_test_set(&ids, &pred_masks, &gt_masks, &ctx.config.evaluate.options()?)?;
    mkdir(out)?;
    report.write_csv(out.join(CASES_CSV))?;
    report.write_json(out.join(SUMMARY_JSON))?;
    ctx.manifest("evaluate").input("predictions", predictions).input("dataset", data).write(out)?;
    Ok(report)
}

fn fmt_summary(s: &Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3}", s.mean, s.sd),
        None => "n/a".into(),
    }
}

/// Violin plots and a summary table across one or more evaluations,
/// Bland-Altman plots per evaluation, and optionally transverse
/// projections of predicted and reference masks.
pub fn report(
    ctx: &Context,
    evaluations: &[(String, PathBuf)],
    projections: Option<(&Path, &Path)>,
    out: &Path,
) -> Result<()> {
    if evaluations.is_empty() {
        return Err(CliError::Config("report needs at least one evaluation directory".into()));
    }
    let mut reports = Vec::new();
    for (label, dir) in evaluations {
        let path = dir.join(SUMMARY_JSON);
        require(&path, "evaluation summary")?;
        reports.push((label.clone(), MetricsReport::read_json(&path)?));
    }
    mkdir(out)?;
    let column = |f: &dyn Fn(&menisc_core::evaluation::CaseMetrics) -> Option<f64>| -> Vec<(String, Vec<f64>)> {
        reports.iter().map(|(l, r)| (l.clone(), r.cases.iter().filter_map(f).collect())).collect()
    };
    let plots = [
        ("dice.svg", "Dice coefficient", "Dice", column(&|c| Some(c.dice))),
        ("hd95.svg", "95th percentile Hausdorff distance", "HD95 (mm)", column(&|c| c.hd95_mm)),
        ("thickness_diff.svg", "Thickness difference, prediction - reference", "mm", column(&|c| c.thickness_diff_mm)),
        ("components.svg", "Connected components per prediction", "count", column(&|c| Some(c.components_pred as f64))),
    ];
    for (file, title, unit, groups) in &plots {
        write_text(&out.join(file), &violin_svg(groups, title, unit))?;
    }
    let mut md = String::from("| model | cases | Dice | HD95 (mm) | thickness diff (mm) | components |\n|---|---|---|---|---|---|\n");
    for (label, r) in &reports {
        md.push_str(&format!(
            "| {label} | {} | {} | {} | {} | {} |\n",
            r.cases.len(),
            fmt_summary(&r.dice),
            fmt_summary(&r.hd95_mm),
            fmt_summary(&r.thickness_diff_mm),
            fmt_summary(&r.components_pred)
        ));
        if let Some(ba) = &r.bland_altman {
            let name = format!("bland_altman_{}.svg", sanitize(label));
            write_text(&out.join(name), &bland_altman_svg(ba, &format!("Thickness agreement, {label}"), "mm"))?;
        }
    }
    for (label, r) in &reports {
        if let Some(ba) = &r.bland_altman {
            md.push_str(&format!(
                "\n{label}: thickness bias {:.3} mm, limits of agreement [{:.3}, {:.3}] mm\n",
                ba.mean_difference, ba.loa_low, ba.loa_high
            ));
        }
        if r.undefined_hd95 > 0 {
            md.push_str(&format!("\n{label}: HD95 undefined for {} case(s) with an empty mask\n", r.undefined_hd95));
        }
    }
    write_text(&out.join("summary.md"), &md)?;

    let mut manifest = ctx.manifest("report");
    for (label, dir) in evaluations {
        manifest = manifest.input(&format!("evaluation:{label}"), dir);
    }
    if let Some((pred_dir, data_dir)) = projections {
        write_projections(pred_dir, data_dir, &out.join("projections"))?;
        manifest = manifest.input("predictions", pred_dir).input("dataset", data_dir);
    }
    manifest.write(out)
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Superior-inferior projections of reference and predicted masks on a
/// shared brightness scale per case.
fn write_projections(pred_dir: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let preds = Dataset::open(pred_dir)?;
    let ds = Dataset::open(data_dir)?;
    mkdir(out)?;
    for e in &preds.index.cases {
        let gt_entry = ds.index.find(&e.id).ok_or_else(|| CliError::Config(format!("case {} has no reference", e.id)))?;
        let (pred, gt) = (preds.mask(e)?, ds.mask(gt_entry)?);
        let si = gt.geometry().si_axis()?;
        let (pp, gp) = (transverse_projection(&pred, si)?, transverse_projection(&gt, si)?);
        let peak = pp.data.iter().chain(&gp.data).copied().max();
        write_projection_png(&gp, peak, out.join(format!("{}_reference.png", e.id)))?;
        write_projection_png(&pp, peak, out.join(format!("{}_prediction.png", e.id)))?;
    }
    Ok(())
}
