//! Threshold-swept precision/recall, ROC and F-measure evaluation.
//!
//! A pixel is predicted salient when its map value is `>=` the threshold.
//! Curves use the 256 thresholds `k/255`; by default confusion counts are
//! summed over the whole dataset before rates are formed.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::imaging::GrayMap;

pub const THRESHOLD_COUNT: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation dataset is empty")]
    Empty,
    #[error("map {index} is {map:?} but ground truth is {gt:?}")]
    Dimensions {
        index: usize,
        map: (usize, usize),
        gt: (usize, usize),
    },
    #[error("writing evaluation output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Counts against a binary ground truth (any nonzero value is positive).
///
/// Panics if the dimensions differ.
pub fn confusion(map: &GrayMap, gt_binary: &GrayMap, threshold: f64) -> ConfusionCounts {
    assert!(map.same_dims(gt_binary), "map and ground truth dimensions differ");
    let mut c = ConfusionCounts::default();
    for (&v, &g) in map.values().iter().zip(gt_binary.values()) {
        match (v >= threshold, g > 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `(precision, recall)`, each defined as 1 when its denominator is zero.
pub fn pr_point(c: &ConfusionCounts) -> (f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// `(tpr, fpr)`; a rate with an empty denominator is 0.
pub fn roc_point(c: &ConfusionCounts) -> (f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fn_), ratio(c.fp, c.fp + c.tn))
}

/// Harmonic mean `2PR/(P+R)`, 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let s = precision + recall;
    if s == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / s
    }
}

/// The 256 thresholds `k/255`.
pub fn thresholds() -> Vec<f64> {
    (0..THRESHOLD_COUNT).map(|k| k as f64 / 255.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Sum confusion counts over the dataset, then form rates.
    #[default]
    Pooled,
    /// Form rates per image, then average them.
    PerImageMean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub f_measure: Vec<f64>,
    pub auc_roc: f64,
    pub max_f: f64,
}

/// Counts at every threshold for one image, via a 256-bin histogram of the
/// threshold index at which each pixel switches to positive.
pub fn confusion_curve(map: &GrayMap, gt_binary: &GrayMap) -> Vec<ConfusionCounts> {
    assert!(map.same_dims(gt_binary), "map and ground truth dimensions differ");
    let ts = thresholds();
    // pixel with value v is positive at threshold k iff k <= last(v)
    let mut pos_hist = vec![0u64; THRESHOLD_COUNT + 1];
    let mut neg_hist = vec![0u64; THRESHOLD_COUNT + 1];
    for (&v, &g) in map.values().iter().zip(gt_binary.values()) {
        // number of thresholds <= v
        let count = ts.partition_point(|&t| t <= v);
        if g > 0.0 {
            pos_hist[count] += 1;
        } else {
            neg_hist[count] += 1;
        }
    }
    let pos_total: u64 = pos_hist.iter().sum();
    let neg_total: u64 = neg_hist.iter().sum();
    // positives predicted at threshold k: pixels with count > k
    let mut out = Vec::with_capacity(THRESHOLD_COUNT);
    let (mut pos_below, mut neg_below) = (0u64, 0u64);
    for k in 0..THRESHOLD_COUNT {
        pos_below += pos_hist[k];
        neg_below += neg_hist[k];
        out.push(ConfusionCounts {
            tp: pos_total - pos_below,
            fn_: pos_below,
            fp: neg_total - neg_below,
            tn: neg_below,
        });
    }
    out
}

fn check_pairs(pairs: &[(&GrayMap, &GrayMap)]) -> Result<(), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    for (index, (m, g)) in pairs.iter().enumerate() {
        if !m.same_dims(g) {
            return Err(EvalError::Dimensions {
                index,
                map: (m.width(), m.height()),
                gt: (g.width(), g.height()),
            });
        }
    }
    Ok(())
}

/// Trapezoidal area under the ROC points, anchored at (0,0) and (1,1).
pub fn roc_auc(tpr: &[f64], fpr: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = fpr.iter().copied().zip(tpr.iter().copied()).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

/// Sweeps the 256 thresholds over `(map, binary gt)` pairs.
pub fn sweep(pairs: &[(&GrayMap, &GrayMap)], mode: Aggregation) -> Result<EvalCurve, EvalError> {
    check_pairs(pairs)?;
    let per_image: Vec<Vec<ConfusionCounts>> = pairs.par_iter().map(|(m, g)| confusion_curve(m, g)).collect();
    let n = THRESHOLD_COUNT;
    let (mut precision, mut recall, mut tpr, mut fpr) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    match mode {
        Aggregation::Pooled => {
            for k in 0..n {
                let c = per_image
                    .iter()
                    .fold(ConfusionCounts::default(), |acc, img| acc + img[k]);
                (precision[k], recall[k]) = pr_point(&c);
                (tpr[k], fpr[k]) = roc_point(&c);
            }
        }
        Aggregation::PerImageMean => {
            let count = per_image.len() as f64;
            for k in 0..n {
                for img in &per_image {
                    let (p, r) = pr_point(&img[k]);
                    let (t, f) = roc_point(&img[k]);
                    precision[k] += p;
                    recall[k] += r;
                    tpr[k] += t;
                    fpr[k] += f;
                }
                precision[k] /= count;
                recall[k] /= count;
                tpr[k] /= count;
                fpr[k] /= count;
            }
        }
    }
    let f: Vec<f64> = precision.iter().zip(&recall).map(|(&p, &r)| f_measure(p, r)).collect();
    let max_f = f.iter().copied().fold(0.0, f64::max);
    Ok(EvalCurve {
        thresholds: thresholds(),
        auc_roc: roc_auc(&tpr, &fpr),
        precision,
        recall,
        tpr,
        fpr,
        f_measure: f,
        max_f,
    })
}

impl EvalCurve {
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), EvalError> {
        writeln!(w, "threshold,precision,recall,tpr,fpr,f")?;
        for k in 0..self.thresholds.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.thresholds[k], self.precision[k], self.recall[k], self.tpr[k], self.fpr[k], self.f_measure[k]
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({ "max_f": self.max_f, "auc_roc": self.auc_roc }).to_string()
    }

    /// Writes `<prefix>_curve.csv` and `<prefix>_summary.json`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<(), EvalError> {
        let prefix = prefix.as_ref().as_os_str().to_owned();
        let mut csv = prefix.clone();
        csv.push("_curve.csv");
        let mut summary = prefix;
        summary.push("_summary.json");
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        std::fs::write(summary, self.summary_json() + "\n")?;
        Ok(())
    }
}
