//! Per-image stages shared by training and inference: resize, scale space,
//! region hierarchy, region descriptors and per-scale forest maps.

use crate::features::{level_features_from, PixelFeatures, RegionFeatures};
use crate::forest::{score_level, ForestModel, TrainSample};
use crate::imaging::{build_scale_space, GrayMap, Image, ImagingError, ScaleSpace};
use crate::segmentation::{
    build_hierarchy, build_region_graph, Segmentation, SegmentationError, SegmentationHierarchy, SegmentationParams,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error("ground truth is {gt:?} but image is {image:?}")]
    GroundTruthDims { gt: (usize, usize), image: (usize, usize) },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub sigma: f64,
    /// Number of scale-space levels, and so of per-scale maps.
    pub levels: usize,
    pub segmentation: SegmentationParams,
    /// Longest image side after resizing.
    pub resize_cap: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            sigma: 1.2,
            levels: 4,
            segmentation: SegmentationParams::default(),
            resize_cap: 400,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.levels < 2 {
            return Err(PipelineError::Config(format!(
                "need at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.segmentation.thresholds.len() + 1 != self.levels {
            return Err(PipelineError::Config(format!(
                "{} levels need {} merge thresholds, got {}",
                self.levels,
                self.levels - 1,
                self.segmentation.thresholds.len()
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(PipelineError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.resize_cap < crate::imaging::MIN_PIPELINE_SIDE {
            return Err(PipelineError::Config(format!(
                "resize cap {} is too small",
                self.resize_cap
            )));
        }
        Ok(())
    }
}

/// One level of an analysed image: its segmentation and region descriptors.
#[derive(Debug, Clone)]
pub struct LevelAnalysis {
    pub segmentation: Segmentation,
    pub features: Vec<RegionFeatures>,
}

/// A resized image with its scale space, hierarchy and per-level descriptors.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub image: Image,
    pub scale_space: ScaleSpace,
    pub hierarchy: SegmentationHierarchy,
    pub levels: Vec<LevelAnalysis>,
}

impl Analysis {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Resizes to the cap and runs the scale-space, segmentation and feature stages.
pub fn analyze(image: &Image, cfg: &MapConfig) -> Result<Analysis, PipelineError> {
    cfg.validate()?;
    let image = image.resize_to_cap(cfg.resize_cap);
    image.check_pipeline_size()?;
    let scale_space = build_scale_space(&image, cfg.sigma, cfg.levels)?;
    let hierarchy = build_hierarchy(&scale_space, &cfg.segmentation)?;
    let levels = hierarchy
        .levels()
        .iter()
        .enumerate()
        .map(|(k, seg)| {
            let pf = PixelFeatures::compute(scale_space.level(k));
            let graph = build_region_graph(seg);
            LevelAnalysis {
                segmentation: seg.clone(),
                features: level_features_from(&pf, seg, &graph),
            }
        })
        .collect();
    Ok(Analysis {
        image,
        scale_space,
        hierarchy,
        levels,
    })
}

/// One forest map per scale-space level, at the resized image size.
pub fn maps_from_analysis(analysis: &Analysis, forest: &ForestModel) -> Vec<GrayMap> {
    analysis
        .levels
        .iter()
        .map(|l| score_level(forest, &l.segmentation, &l.features))
        .collect()
}

pub fn per_scale_maps(image: &Image, forest: &ForestModel, cfg: &MapConfig) -> Result<Vec<GrayMap>, PipelineError> {
    Ok(maps_from_analysis(&analyze(image, cfg)?, forest))
}

/// Brings a ground-truth mask to the analysed image size.
pub fn align_ground_truth(gt: &GrayMap, analysis: &Analysis) -> GrayMap {
    gt.resize(analysis.width(), analysis.height())
}

/// Checks that a mask has the same size as its source image.
pub fn check_ground_truth(gt: &GrayMap, image: &Image) -> Result<(), PipelineError> {
    if gt.width() != image.width() || gt.height() != image.height() {
        return Err(PipelineError::GroundTruthDims {
            gt: (gt.width(), gt.height()),
            image: (image.width(), image.height()),
        });
    }
    Ok(())
}

/// Fraction of each region's pixels whose ground truth exceeds `gt_threshold`.
pub fn region_targets(seg: &Segmentation, gt: &GrayMap, gt_threshold: f64) -> Vec<f64> {
    assert!(
        seg.width() == gt.width() && seg.height() == gt.height(),
        "segmentation and ground truth dimensions differ"
    );
    let mut salient = vec![0usize; seg.region_count()];
    let mut total = vec![0usize; seg.region_count()];
    for (&l, &g) in seg.labels().iter().zip(gt.values()) {
        total[l] += 1;
        if g > gt_threshold {
            salient[l] += 1;
        }
    }
    salient.iter().zip(&total).map(|(&s, &t)| s as f64 / t as f64).collect()
}

/// Regression samples from every region of every level of one image.
pub fn training_samples_from(analysis: &Analysis, gt: &GrayMap, gt_threshold: f64) -> Vec<TrainSample> {
    let gt = align_ground_truth(gt, analysis);
    analysis
        .levels
        .iter()
        .flat_map(|l| {
            let targets = region_targets(&l.segmentation, &gt, gt_threshold);
            l.features
                .iter()
                .zip(targets)
                .map(|(v, target)| TrainSample { v: *v, target })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn region_training_samples(
    image: &Image,
    gt: &GrayMap,
    cfg: &MapConfig,
    gt_threshold: f64,
) -> Result<Vec<TrainSample>, PipelineError> {
    check_ground_truth(gt, image)?;
    Ok(training_samples_from(&analyze(image, cfg)?, gt, gt_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{train_forest, ForestParams};

    fn blob(w: usize, h: usize) -> (Image, GrayMap) {
        let inside = |x: usize, y: usize| {
            let (dx, dy) = (x as f64 - w as f64 / 2.0, y as f64 - h as f64 / 2.0);
            dx * dx + dy * dy < (w.min(h) as f64 / 4.0).powi(2)
        };
        let img = Image::from_fn(w, h, |x, y| {
            if inside(x, y) {
                [0.9, 0.1, 0.1]
            } else {
                let t = ((x / 3 + y / 3) % 2) as f64 * 0.1;
                [0.2 + t, 0.5, 0.3 + t]
            }
        });
        let gt = GrayMap::from_fn(w, h, |x, y| if inside(x, y) { 1.0 } else { 0.0 });
        (img, gt)
    }

    #[test]
    fn region_targets_count_strictly_above_threshold() {
        let seg = Segmentation::from_labels(2, 2, &[0, 0, 1, 1], 0);
        let gt = GrayMap::new(2, 2, vec![0.3, 1.0, 0.0, 0.31]).unwrap();
        assert_eq!(region_targets(&seg, &gt, 0.3), vec![0.5, 0.5]);
    }

    #[test]
    fn maps_have_image_size_and_level_count() {
        let (img, gt) = blob(48, 40);
        let cfg = MapConfig::default();
        let samples = region_training_samples(&img, &gt, &cfg, 0.3).unwrap();
        assert!(!samples.is_empty());
        assert!(samples.iter().all(|s| (0.0..=1.0).contains(&s.target)));
        let forest = train_forest(
            &samples,
            &ForestParams {
                trees: 5,
                min_leaf: 2,
                seed: 0,
            },
        )
        .unwrap();
        let maps = per_scale_maps(&img, &forest, &cfg).unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            assert_eq!((m.width(), m.height()), (48, 40));
            assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn resize_cap_applies() {
        let (img, _) = blob(80, 40);
        let cfg = MapConfig {
            resize_cap: 40,
            ..MapConfig::default()
        };
        let a = analyze(&img, &cfg).unwrap();
        assert_eq!((a.width(), a.height()), (40, 20));
    }

    #[test]
    fn rejects_tiny_images_and_bad_configs() {
        let img = Image::filled(8, 30, [0.5; 3]);
        assert!(matches!(
            analyze(&img, &MapConfig::default()),
            Err(PipelineError::Imaging(_))
        ));
        let cfg = MapConfig {
            levels: 3,
            ..MapConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let (img, _) = blob(20, 20);
        let gt = GrayMap::filled(21, 20, 0.0);
        assert!(matches!(
            region_training_samples(&img, &gt, &MapConfig::default(), 0.3),
            Err(PipelineError::GroundTruthDims { .. })
        ));
    }
}
