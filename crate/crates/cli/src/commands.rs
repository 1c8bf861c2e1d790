//! The subcommands, as library functions.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use salfuse_core::eval::{sweep, EvalCurve};
use salfuse_core::forest::{load_forest, save_forest, train_forest, ForestModel};
use salfuse_core::fusion::{binarize_gt, build_training_set, dump_training_set, fuse, to_samples, PatchGrid};
use salfuse_core::imaging::{load_image, GrayMap, Image};
use salfuse_core::pipeline::{analyze, check_ground_truth, maps_from_analysis, training_samples_from};
use salfuse_core::tddl::{load_model, save_model, train_with_report};
use salfuse_core::FusionModel;

use crate::config::PipelineConfig;
use crate::dataset::{list_images, load_pair, DatasetManifest};
use crate::error::CliError;

/// Name of the metadata file `predict` writes next to its maps.
pub const PREDICT_METADATA: &str = "predict_meta.json";

fn load_pairs(manifest: &DatasetManifest) -> Vec<(String, Image, GrayMap)> {
    manifest
        .entries
        .par_iter()
        .filter_map(|e| match load_pair(e) {
            Ok((img, gt)) => Some((e.stem.clone(), img, gt)),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.stem);
                None
            }
        })
        .collect()
}

/// Trains the region regressor on every level of every image and saves it.
pub fn cmd_train_forest(manifest: &DatasetManifest, cfg: &PipelineConfig, out: &Path) -> Result<ForestModel, CliError> {
    cfg.validate()?;
    let map_cfg = cfg.map_config();
    let per_image: Vec<_> = load_pairs(manifest)
        .into_par_iter()
        .filter_map(|(stem, img, gt)| {
            let run = || -> Result<_, String> {
                check_ground_truth(&gt, &img).map_err(|e| e.to_string())?;
                let analysis = analyze(&img, &map_cfg).map_err(|e| e.to_string())?;
                Ok(training_samples_from(&analysis, &gt, cfg.gt_threshold))
            };
            run().map_err(|e| log::warn!("skipping {stem}: {e}")).ok()
        })
        .collect();
    let samples: Vec<_> = per_image.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(CliError::Io("no region samples could be extracted".into()));
    }
    log::info!(
        "training {} trees on {} region samples",
        cfg.forest_trees,
        samples.len()
    );
    let model = train_forest(&samples, &cfg.forest_params())?;
    save_forest(&model, out).map_err(|e| CliError::io(out, e))?;
    Ok(model)
}

/// Builds patch samples from forest maps, trains the fusion model and saves it.
/// With `dump_dir`, the stacked training matrices are written there as
/// `train_x.bin` and `train_y.bin`.
pub fn cmd_train_fusion(
    manifest: &DatasetManifest,
    forest_path: &Path,
    cfg: &PipelineConfig,
    out: &Path,
    dump_dir: Option<&Path>,
) -> Result<FusionModel, CliError> {
    cfg.validate()?;
    let forest = load_forest(forest_path).map_err(|e| CliError::io(forest_path, e))?;
    let pairs: Vec<(Image, GrayMap)> = load_pairs(manifest).into_iter().map(|(_, i, g)| (i, g)).collect();
    let samples = build_training_set(&pairs, &forest, &cfg.fusion_config());
    if samples.is_empty() {
        return Err(CliError::Io("no fusion samples could be built".into()));
    }
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        dump_training_set(&samples, dir.join("train_x.bin"), dir.join("train_y.bin"))?;
    }
    let train_cfg = cfg.train_config();
    log::info!(
        "training fusion model: {} samples, d = {}, T = {}",
        samples.len(),
        train_cfg.atoms,
        train_cfg.iterations
    );
    let (model, report) = train_with_report(&to_samples::<f64>(&samples), &train_cfg)?;
    if let Some(loss) = report.tail_mean(1000) {
        log::info!(
            "final running loss {loss:.5}, {} steps with empty active set",
            report.empty_active_steps
        );
    }
    save_model(&model, out).map_err(|e| CliError::io(out, e))?;
    Ok(model)
}

/// Fused map and per-scale forest maps of one image, at its resized size.
pub fn predict_image(
    image: &Image,
    forest: &ForestModel,
    model: &FusionModel,
    cfg: &PipelineConfig,
) -> Result<(GrayMap, Vec<GrayMap>), CliError> {
    let analysis = analyze(image, &cfg.map_config()).map_err(|e| CliError::Io(e.to_string()))?;
    let maps = maps_from_analysis(&analysis, forest);
    let grid = PatchGrid::for_map(&maps[0], cfg.patch_size, cfg.stride)?;
    let fused = fuse(&maps, model, &grid, &cfg.train_config().jsc_params())?;
    Ok((fused, maps))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictReport {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

/// Writes `<stem>.png` for each input image (a file or a directory of
/// images), plus `<stem>_scale<k>.png` per-scale maps when `dump_scales` is set.
pub fn cmd_predict(
    input: &Path,
    forest_path: &Path,
    fusion_path: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
    dump_scales: bool,
) -> Result<PredictReport, CliError> {
    cfg.validate()?;
    let forest = load_forest(forest_path).map_err(|e| CliError::io(forest_path, e))?;
    let model: FusionModel = load_model(fusion_path).map_err(|e| CliError::io(fusion_path, e))?;
    if model.modalities() != cfg.levels {
        return Err(CliError::Config(format!(
            "fusion model has {} modalities but levels = {}",
            model.modalities(),
            cfg.levels
        )));
    }
    let inputs: Vec<PathBuf> = if input.is_dir() {
        list_images(input)?.into_values().collect()
    } else {
        vec![input.to_path_buf()]
    };
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let results: Vec<_> = inputs
        .par_iter()
        .map(|path| {
            let run = || -> Result<(PathBuf, serde_json::Value), CliError> {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| CliError::io(path, "no file stem"))?;
                let image = load_image(path)?;
                let (fused, scales) = predict_image(&image, &forest, &model, cfg)?;
                let target = out_dir.join(format!("{stem}.png"));
                fused.save_png(&target)?;
                if dump_scales {
                    for (k, m) in scales.iter().enumerate() {
                        m.save_png(out_dir.join(format!("{stem}_scale{}.png", k + 1)))?;
                    }
                }
                let meta = serde_json::json!({
                    "stem": stem,
                    "original": [image.width(), image.height()],
                    "resized": [fused.width(), fused.height()],
                });
                Ok((target, meta))
            };
            (path.clone(), run())
        })
        .collect();

    let mut report = PredictReport::default();
    let mut meta = Vec::new();
    for (path, r) in results {
        match r {
            Ok((target, m)) => {
                report.written.push(target);
                meta.push(m);
            }
            Err(e) => {
                log::error!("{}: {e}", path.display());
                report.failed.push((path, e.to_string()));
            }
        }
    }
    let meta_path = out_dir.join(PREDICT_METADATA);
    let doc = serde_json::json!({ "resize_cap": cfg.resize_cap, "maps": meta });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&doc).expect("json") + "\n")
        .map_err(|e| CliError::io(&meta_path, e))?;
    if report.written.is_empty() {
        return Err(CliError::Io(format!(
            "no image under {} could be processed",
            input.display()
        )));
    }
    Ok(report)
}

/// Pairs `<maps_dir>/<stem><suffix>.png` with the manifest masks, brings each
/// mask to its map's (resized) size, binarizes it and sweeps thresholds.
/// Writes `<out_prefix>_curve.csv` and `<out_prefix>_summary.json`.
pub fn cmd_evaluate(
    maps_dir: &Path,
    manifest: &DatasetManifest,
    out_prefix: &Path,
    cfg: &PipelineConfig,
    suffix: &str,
) -> Result<EvalCurve, CliError> {
    let maps = list_images(maps_dir)?;
    let mut pairs = Vec::new();
    for entry in &manifest.entries {
        let Some(path) = maps.get(&format!("{}{suffix}", entry.stem)) else {
            log::warn!("{}: no predicted map", entry.stem);
            continue;
        };
        let map = GrayMap::load(path)?;
        let gt = GrayMap::load(&entry.mask)?.resize(map.width(), map.height());
        pairs.push((map, binarize_gt(&gt, cfg.gt_threshold)));
    }
    if pairs.is_empty() {
        return Err(CliError::Io(format!(
            "no map in {} matches the dataset",
            maps_dir.display()
        )));
    }
    let refs: Vec<(&GrayMap, &GrayMap)> = pairs.iter().map(|(m, g)| (m, g)).collect();
    let curve = sweep(&refs, cfg.eval_mode)?;
    if let Some(parent) = out_prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    curve.save(out_prefix)?;
    Ok(curve)
}
