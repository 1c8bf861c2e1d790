//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::Path;

use salfuse_core::eval::Aggregation;
use salfuse_core::forest::ForestParams;
use salfuse_core::fusion::FusionConfig;
use salfuse_core::pipeline::MapConfig;
use salfuse_core::segmentation::SegmentationParams;
use salfuse_core::TrainConfig;

use crate::error::CliError;

/// Every tunable of the pipeline, with the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub sigma: f64,
    pub levels: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub segmentation: SegmentationParams,
    pub forest_trees: usize,
    pub forest_min_leaf: usize,
    pub train: TrainConfig,
    /// `None` derives `t0 = max(1, iterations/10)`.
    pub t0: Option<f64>,
    pub gt_threshold: f64,
    pub resize_cap: usize,
    pub eval_mode: Aggregation,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sigma: 1.2,
            levels: 4,
            patch_size: 9,
            stride: 9,
            segmentation: SegmentationParams::default(),
            forest_trees: 200,
            forest_min_leaf: 8,
            train: TrainConfig::default(),
            t0: None,
            gt_threshold: 0.3,
            resize_cap: 400,
            eval_mode: Aggregation::Pooled,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

impl PipelineConfig {
    pub fn map_config(&self) -> MapConfig {
        MapConfig {
            sigma: self.sigma,
            levels: self.levels,
            segmentation: self.segmentation.clone(),
            resize_cap: self.resize_cap,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            maps: self.map_config(),
            patch_size: self.patch_size,
            stride: self.stride,
            gt_threshold: self.gt_threshold,
        }
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            trees: self.forest_trees,
            min_leaf: self.forest_min_leaf,
            seed: self.seed,
        }
    }

    /// Dictionary-learning settings with the seed and `t0` resolved.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.seed;
        cfg.t0 = self.t0.unwrap_or_else(|| (cfg.iterations as f64 / 10.0).max(1.0));
        cfg
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "sigma" => self.sigma = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "seg_k" => self.segmentation.k_param = parse(key, value)?,
            "seg_min_size" => self.segmentation.min_size = parse(key, value)?,
            "seg_thresholds" => {
                self.segmentation.thresholds = value
                    .split(',')
                    .map(|t| parse(key, t.trim()))
                    .collect::<Result<_, _>>()?
            }
            "forest_trees" => self.forest_trees = parse(key, value)?,
            "forest_min_leaf" => self.forest_min_leaf = parse(key, value)?,
            "atoms" => self.train.atoms = parse(key, value)?,
            "lambda1" => self.train.lambda1 = parse(key, value)?,
            "lambda2" => self.train.lambda2 = parse(key, value)?,
            "nu" => self.train.nu = parse(key, value)?,
            "rho" => self.train.rho = parse(key, value)?,
            "t0" => {
                self.t0 = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "iterations" => self.train.iterations = parse(key, value)?,
            "jsc_max_iter" => self.train.jsc_max_iter = parse(key, value)?,
            "jsc_tol" => self.train.jsc_tol = parse(key, value)?,
            "gt_threshold" => self.gt_threshold = parse(key, value)?,
            "resize_cap" => self.resize_cap = parse(key, value)?,
            "eval_mode" => {
                self.eval_mode = match value {
                    "pooled" => Aggregation::Pooled,
                    "per_image_mean" => Aggregation::PerImageMean,
                    _ => {
                        return Err(CliError::Config(format!(
                            "eval_mode: expected pooled or per_image_mean, got {value:?}"
                        )))
                    }
                }
            }
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.map_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.gt_threshold > 0.0 && self.gt_threshold < 1.0) {
            return Err(CliError::Config(format!(
                "gt_threshold must be in (0,1), got {}",
                self.gt_threshold
            )));
        }
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(CliError::Config(format!(
                "need 0 < stride <= patch_size, got stride {} and patch_size {}",
                self.stride, self.patch_size
            )));
        }
        if self.forest_trees == 0 {
            return Err(CliError::Config("forest_trees must be positive".into()));
        }
        Ok(())
    }

    /// The full setting list in the format [`PipelineConfig::parse_str`] reads.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let t = &self.train;
        let thresholds: Vec<String> = self.segmentation.thresholds.iter().map(f64::to_string).collect();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        line("sigma", self.sigma.to_string());
        line("levels", self.levels.to_string());
        line("patch_size", self.patch_size.to_string());
        line("stride", self.stride.to_string());
        line("seg_k", self.segmentation.k_param.to_string());
        line("seg_min_size", self.segmentation.min_size.to_string());
        line("seg_thresholds", thresholds.join(","));
        line("forest_trees", self.forest_trees.to_string());
        line("forest_min_leaf", self.forest_min_leaf.to_string());
        line("atoms", t.atoms.to_string());
        line("lambda1", t.lambda1.to_string());
        line("lambda2", t.lambda2.to_string());
        line("nu", t.nu.to_string());
        line("rho", t.rho.to_string());
        line("t0", self.t0.map_or_else(|| "auto".to_string(), |v| v.to_string()));
        line("iterations", t.iterations.to_string());
        line("jsc_max_iter", t.jsc_max_iter.to_string());
        line("jsc_tol", t.jsc_tol.to_string());
        line("gt_threshold", self.gt_threshold.to_string());
        line("resize_cap", self.resize_cap.to_string());
        line(
            "eval_mode",
            match self.eval_mode {
                Aggregation::Pooled => "pooled",
                Aggregation::PerImageMean => "per_image_mean",
            }
            .to_string(),
        );
        line("seed", self.seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse_str(&cfg.render()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.t0 = Some(50.0);
        other.stride = 4;
        other.eval_mode = Aggregation::PerImageMean;
        other.segmentation.thresholds = vec![0.8, 0.7, 0.65];
        assert_eq!(PipelineConfig::parse_str(&other.render()).unwrap(), other);
    }

    #[test]
    fn defaults_resolve() {
        let cfg = PipelineConfig::default();
        let t = cfg.train_config();
        assert_eq!((t.atoms, t.iterations, t.t0), (150, 100_000, 10_000.0));
        assert_eq!((t.lambda1, t.lambda2, t.nu, t.rho), (0.015, 0.002, 1e-4, 0.01));
        assert_eq!(cfg.fusion_config().gt_threshold, 0.3);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "sigma",
            "bogus = 1",
            "stride = 10",
            "levels = x",
            "gt_threshold = 1.5",
            "levels = 3",
            "eval_mode = median",
        ] {
            assert!(
                matches!(PipelineConfig::parse_str(text), Err(CliError::Config(_))),
                "{text}"
            );
        }
        let cfg = PipelineConfig::parse_str("# comment\n\nseed = 7  # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }
}
