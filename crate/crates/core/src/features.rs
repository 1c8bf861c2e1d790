//! Regional descriptors: contrast against neighbors, contrast against the
//! image border (backgroundness), and region properties.
//!
//! Layout of the 38-dimensional vector [`RegionFeatures::v`]:
//!
//! | range   | block          | components                                         |
//! |---------|----------------|----------------------------------------------------|
//! | 0..14   | contrast       | pairwise distances to neighbors, area weighted      |
//! | 14..28  | backgroundness | pairwise distances to the border band               |
//! | 28..38  | property       | centroid, bbox size, area, aspect, Lab variance, border contact |
//!
//! Each 14-wide distance block is ordered as
//! `|Δrgb| (3), |Δlab| (3), |Δhsv| (3), χ²rgb, χ²lab, χ²hsv, χ²lbp, ‖Δtex‖₁/15`.

use std::io::Write;
use std::path::Path;

use crate::imaging::{convolve_separable, lab_to_unit, luma, rgb_to_hsv, rgb_to_lab, Image};
use crate::segmentation::{RegionGraph, Segmentation};

pub const HIST_BINS_PER_CHANNEL: usize = 16;
pub const COLOR_HIST_LEN: usize = 3 * HIST_BINS_PER_CHANNEL;
pub const LBP_BINS: usize = 59;
pub const TEXTURE_FILTERS: usize = 15;
pub const DISTANCE_DIM: usize = 14;
pub const PROPERTY_DIM: usize = 10;
pub const FEATURE_DIM: usize = 2 * DISTANCE_DIM + PROPERTY_DIM;
/// Width in pixels of the border band used as pseudo-background.
pub const BORDER_BAND: usize = 15;

pub const CONTRAST_OFFSET: usize = 0;
pub const BACKGROUND_OFFSET: usize = DISTANCE_DIM;
pub const PROPERTY_OFFSET: usize = 2 * DISTANCE_DIM;

/// Accumulated color, texture and shape statistics of one pixel set.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub mean_rgb: [f64; 3],
    pub mean_lab: [f64; 3],
    pub mean_hsv: [f64; 3],
    pub hist_rgb: Vec<f64>,
    pub hist_lab: Vec<f64>,
    pub hist_hsv: Vec<f64>,
    pub hist_lbp: Vec<f64>,
    pub tex_resp: [f64; TEXTURE_FILTERS],
    /// Normalized `(x, y)` of the pixel-center centroid.
    pub centroid: [f64; 2],
    /// Normalized `(x0, y0, w, h)`.
    pub bbox: [f64; 4],
    pub area_ratio: f64,
    pub var_lab: [f64; 3],
    /// Fraction of the image-border pixels owned by this pixel set.
    pub border_contact: f64,
    pub pixel_count: usize,
    /// Bounding box aspect in pixels (width / height).
    pub aspect: f64,
}

/// Per-pixel planes shared by every region of one image level.
#[derive(Debug, Clone)]
pub struct PixelFeatures {
    width: usize,
    height: usize,
    rgb: Vec<[f64; 3]>,
    lab: Vec<[f64; 3]>,
    hsv: Vec<[f64; 3]>,
    lbp: Vec<u8>,
    texture: Vec<Vec<f64>>,
}

impl PixelFeatures {
    pub fn compute(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let rgb = img.pixels().to_vec();
        let lab = rgb.iter().map(|&p| lab_to_unit(rgb_to_lab(p))).collect();
        let hsv = rgb.iter().map(|&p| rgb_to_hsv(p)).collect();
        let gray: Vec<f64> = rgb.iter().map(|&p| luma(p)).collect();
        let lbp = lbp_codes(&gray, w, h);
        let texture = filter_bank_responses(&gray, w, h);
        Self {
            width: w,
            height: h,
            rgb,
            lab,
            hsv,
            lbp,
            texture,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Uniform LBP bin index (0..59) of every pixel.
    pub fn lbp(&self) -> &[u8] {
        &self.lbp
    }
}

// ---------------------------------------------------------------------------
// Local binary patterns

const LBP_OFFSETS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

fn circular_transitions(code: u8) -> u32 {
    (code ^ code.rotate_left(1)).count_ones()
}

/// Maps an 8-bit LBP code to its uniform bin: the 58 codes with at most two
/// circular 0/1 transitions get bins 0..58 in increasing code order, every
/// other code falls into bin 58.
pub fn uniform_lbp_table() -> [u8; 256] {
    let mut table = [(LBP_BINS - 1) as u8; 256];
    let mut next = 0u8;
    for code in 0..=255u8 {
        if circular_transitions(code) <= 2 {
            table[code as usize] = next;
            next += 1;
        }
    }
    debug_assert_eq!(next as usize, LBP_BINS - 1);
    table
}

fn lbp_codes(gray: &[f64], w: usize, h: usize) -> Vec<u8> {
    let table = uniform_lbp_table();
    let (wi, hi) = (w as isize, h as isize);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..hi {
        for x in 0..wi {
            let center = gray[(y * wi + x) as usize];
            let mut code = 0u8;
            for (bit, (dx, dy)) in LBP_OFFSETS.iter().enumerate() {
                let nx = (x + dx).clamp(0, wi - 1);
                let ny = (y + dy).clamp(0, hi - 1);
                if gray[(ny * wi + nx) as usize] >= center {
                    code |= 1 << bit;
                }
            }
            out.push(table[code as usize]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Filter bank

struct GaussianTaps {
    g: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

fn gaussian_taps(sigma: f64) -> GaussianTaps {
    let radius = (3.0 * sigma).ceil() as isize;
    let s2 = sigma * sigma;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * s2)).exp())
        .collect();
    let norm: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let d1 = (-radius..=radius)
        .zip(&g)
        .map(|(i, gv)| -(i as f64) / s2 * gv)
        .collect();
    let d2 = (-radius..=radius)
        .zip(&g)
        .map(|(i, gv)| ((i * i) as f64 / (s2 * s2) - 1.0 / s2) * gv)
        .collect();
    GaussianTaps { g, d1, d2 }
}

/// Eight steered first derivatives of a Gaussian (σ = 1.5, orientations kπ/8),
/// four scale-normalized LoGs (σ ∈ {1, 2, 4, 8}, capped so the support fits
/// the image) and three Gaussians (σ ∈ {1, 2, 4}).
fn filter_bank_responses(gray: &[f64], w: usize, h: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(TEXTURE_FILTERS);
    let taps = gaussian_taps(1.5);
    let gx = convolve_separable(gray, w, h, &taps.d1, &taps.g);
    let gy = convolve_separable(gray, w, h, &taps.g, &taps.d1);
    for k in 0..8 {
        let theta = k as f64 * std::f64::consts::PI / 8.0;
        let (s, c) = theta.sin_cos();
        out.push(gx.iter().zip(&gy).map(|(a, b)| c * a + s * b).collect());
    }
    let sigma_cap = (w.min(h) as f64 / 6.0).max(0.5);
    for sigma in [1.0f64, 2.0, 4.0, 8.0] {
        let sigma = sigma.min(sigma_cap);
        let taps = gaussian_taps(sigma);
        let xx = convolve_separable(gray, w, h, &taps.d2, &taps.g);
        let yy = convolve_separable(gray, w, h, &taps.g, &taps.d2);
        out.push(xx.iter().zip(&yy).map(|(a, b)| sigma * sigma * (a + b)).collect());
    }
    for sigma in [1.0, 2.0, 4.0] {
        let taps = gaussian_taps(sigma);
        out.push(convolve_separable(gray, w, h, &taps.g, &taps.g));
    }
    out
}

// ---------------------------------------------------------------------------
// Statistics accumulation

#[derive(Clone)]
struct Accumulator {
    count: usize,
    sum_rgb: [f64; 3],
    sum_lab: [f64; 3],
    sum_lab_sq: [f64; 3],
    sum_hsv: [f64; 3],
    hist_rgb: [usize; COLOR_HIST_LEN],
    hist_lab: [usize; COLOR_HIST_LEN],
    hist_hsv: [usize; COLOR_HIST_LEN],
    hist_lbp: [usize; LBP_BINS],
    tex: [f64; TEXTURE_FILTERS],
    sum_x: f64,
    sum_y: f64,
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
    border: usize,
}

impl Default for Accumulator {
    fn default() -> Self {
        Self {
            count: 0,
            sum_rgb: [0.0; 3],
            sum_lab: [0.0; 3],
            sum_lab_sq: [0.0; 3],
            sum_hsv: [0.0; 3],
            hist_rgb: [0; COLOR_HIST_LEN],
            hist_lab: [0; COLOR_HIST_LEN],
            hist_hsv: [0; COLOR_HIST_LEN],
            hist_lbp: [0; LBP_BINS],
            tex: [0.0; TEXTURE_FILTERS],
            sum_x: 0.0,
            sum_y: 0.0,
            min_x: usize::MAX,
            min_y: usize::MAX,
            max_x: 0,
            max_y: 0,
            border: 0,
        }
    }
}

fn bin(v: f64) -> usize {
    ((v * HIST_BINS_PER_CHANNEL as f64).floor().max(0.0) as usize).min(HIST_BINS_PER_CHANNEL - 1)
}

impl Accumulator {
    fn add(&mut self, pf: &PixelFeatures, i: usize) {
        let (x, y) = (i % pf.width, i / pf.width);
        self.count += 1;
        let (rgb, lab, hsv) = (pf.rgb[i], pf.lab[i], pf.hsv[i]);
        for c in 0..3 {
            self.sum_rgb[c] += rgb[c];
            self.sum_lab[c] += lab[c];
            self.sum_lab_sq[c] += lab[c] * lab[c];
            self.sum_hsv[c] += hsv[c];
            self.hist_rgb[c * HIST_BINS_PER_CHANNEL + bin(rgb[c])] += 1;
            self.hist_lab[c * HIST_BINS_PER_CHANNEL + bin(lab[c])] += 1;
            self.hist_hsv[c * HIST_BINS_PER_CHANNEL + bin(hsv[c])] += 1;
        }
        self.hist_lbp[pf.lbp[i] as usize] += 1;
        for (t, plane) in self.tex.iter_mut().zip(&pf.texture) {
            *t += plane[i].abs();
        }
        self.sum_x += x as f64;
        self.sum_y += y as f64;
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
        if x == 0 || y == 0 || x + 1 == pf.width || y + 1 == pf.height {
            self.border += 1;
        }
    }

    fn finish(&self, pf: &PixelFeatures) -> RegionStats {
        let n = self.count.max(1) as f64;
        let (w, h) = (pf.width as f64, pf.height as f64);
        let mean = |s: [f64; 3]| s.map(|v| v / n);
        let norm_hist = |hist: &[usize]| -> Vec<f64> {
            let total: usize = hist.iter().sum();
            hist.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
        };
        let mean_lab = mean(self.sum_lab);
        let mut var_lab = [0.0; 3];
        for c in 0..3 {
            var_lab[c] = (self.sum_lab_sq[c] / n - mean_lab[c] * mean_lab[c]).max(0.0);
        }
        let (bw, bh) = if self.count == 0 {
            (0.0, 0.0)
        } else {
            (
                (self.max_x - self.min_x + 1) as f64,
                (self.max_y - self.min_y + 1) as f64,
            )
        };
        let border_total = if pf.width == 1 || pf.height == 1 {
            pf.width * pf.height
        } else {
            2 * (pf.width + pf.height) - 4
        };
        RegionStats {
            mean_rgb: mean(self.sum_rgb),
            mean_lab,
            mean_hsv: mean(self.sum_hsv),
            hist_rgb: norm_hist(&self.hist_rgb),
            hist_lab: norm_hist(&self.hist_lab),
            hist_hsv: norm_hist(&self.hist_hsv),
            hist_lbp: norm_hist(&self.hist_lbp),
            tex_resp: self.tex.map(|v| v / n),
            centroid: [(self.sum_x / n + 0.5) / w, (self.sum_y / n + 0.5) / h],
            bbox: if self.count == 0 {
                [0.0; 4]
            } else {
                [self.min_x as f64 / w, self.min_y as f64 / h, bw / w, bh / h]
            },
            area_ratio: self.count as f64 / (w * h),
            var_lab,
            border_contact: self.border as f64 / border_total as f64,
            pixel_count: self.count,
            aspect: if bh > 0.0 { (bw / bh).clamp(0.0, 10.0) } else { 0.0 },
        }
    }
}

/// Statistics of every region of `seg` measured on `img_level`.
pub fn region_stats(img_level: &Image, seg: &Segmentation) -> Vec<RegionStats> {
    let pf = PixelFeatures::compute(img_level);
    region_stats_from(&pf, seg)
}

pub fn region_stats_from(pf: &PixelFeatures, seg: &Segmentation) -> Vec<RegionStats> {
    assert!(
        seg.width() == pf.width && seg.height() == pf.height,
        "segmentation {}x{} does not match image {}x{}",
        seg.width(),
        seg.height(),
        pf.width,
        pf.height
    );
    let mut acc = vec![Accumulator::default(); seg.region_count()];
    for (i, &l) in seg.labels().iter().enumerate() {
        acc[l].add(pf, i);
    }
    acc.iter().map(|a| a.finish(pf)).collect()
}

/// Statistics of the `band`-pixel frame along the image border.
pub fn pseudo_background(pf: &PixelFeatures, band: usize) -> RegionStats {
    let (w, h) = (pf.width, pf.height);
    let mut acc = Accumulator::default();
    for y in 0..h {
        for x in 0..w {
            if x < band || y < band || x + band >= w || y + band >= h {
                acc.add(pf, y * w + x);
            }
        }
    }
    acc.finish(pf)
}

/// χ² histogram distance `Σ 2 (a_i - b_i)² / (a_i + b_i)`; empty bins contribute 0.
///
/// Panics when the histograms have different lengths.
pub fn chi_square(h1: &[f64], h2: &[f64]) -> f64 {
    assert_eq!(h1.len(), h2.len(), "histogram length mismatch");
    h1.iter()
        .zip(h2)
        .map(|(&a, &b)| {
            let s = a + b;
            if s > 0.0 {
                2.0 * (a - b) * (a - b) / s
            } else {
                0.0
            }
        })
        .sum()
}

/// The 14 distance components between two pixel sets.
pub fn pairwise_distances(a: &RegionStats, b: &RegionStats) -> [f64; DISTANCE_DIM] {
    let mut d = [0.0; DISTANCE_DIM];
    for c in 0..3 {
        d[c] = (a.mean_rgb[c] - b.mean_rgb[c]).abs();
        d[3 + c] = (a.mean_lab[c] - b.mean_lab[c]).abs();
        d[6 + c] = (a.mean_hsv[c] - b.mean_hsv[c]).abs();
    }
    d[9] = chi_square(&a.hist_rgb, &b.hist_rgb);
    d[10] = chi_square(&a.hist_lab, &b.hist_lab);
    d[11] = chi_square(&a.hist_hsv, &b.hist_hsv);
    d[12] = chi_square(&a.hist_lbp, &b.hist_lbp);
    d[13] = a
        .tex_resp
        .iter()
        .zip(&b.tex_resp)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / TEXTURE_FILTERS as f64;
    d
}

/// Neighbor-area weighted average of [`pairwise_distances`]; zeros without neighbors.
pub fn contrast_block(r: usize, graph: &RegionGraph, stats: &[RegionStats]) -> [f64; DISTANCE_DIM] {
    let mut out = [0.0; DISTANCE_DIM];
    let total: usize = graph.adjacency[r].iter().map(|&n| graph.areas[n]).sum();
    if total == 0 {
        return out;
    }
    for &n in &graph.adjacency[r] {
        let w = graph.areas[n] as f64 / total as f64;
        for (o, d) in out.iter_mut().zip(pairwise_distances(&stats[r], &stats[n])) {
            *o += w * d;
        }
    }
    out
}

pub fn backgroundness_block(r: usize, stats: &[RegionStats], pseudo_bg: &RegionStats) -> [f64; DISTANCE_DIM] {
    pairwise_distances(&stats[r], pseudo_bg)
}

pub fn property_block(r: usize, stats: &[RegionStats]) -> [f64; PROPERTY_DIM] {
    let s = &stats[r];
    [
        s.centroid[0],
        s.centroid[1],
        s.bbox[2],
        s.bbox[3],
        s.area_ratio,
        s.aspect,
        s.var_lab[0],
        s.var_lab[1],
        s.var_lab[2],
        s.border_contact,
    ]
}

/// The fixed-layout descriptor of one region (see module docs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionFeatures {
    pub v: [f64; FEATURE_DIM],
}

impl RegionFeatures {
    pub fn contrast(&self) -> &[f64] {
        &self.v[CONTRAST_OFFSET..CONTRAST_OFFSET + DISTANCE_DIM]
    }

    pub fn backgroundness(&self) -> &[f64] {
        &self.v[BACKGROUND_OFFSET..BACKGROUND_OFFSET + DISTANCE_DIM]
    }

    pub fn property(&self) -> &[f64] {
        &self.v[PROPERTY_OFFSET..]
    }
}

pub fn assemble_features(
    r: usize,
    graph: &RegionGraph,
    stats: &[RegionStats],
    pseudo_bg: &RegionStats,
) -> RegionFeatures {
    let mut v = [0.0; FEATURE_DIM];
    v[CONTRAST_OFFSET..CONTRAST_OFFSET + DISTANCE_DIM].copy_from_slice(&contrast_block(r, graph, stats));
    v[BACKGROUND_OFFSET..BACKGROUND_OFFSET + DISTANCE_DIM].copy_from_slice(&backgroundness_block(r, stats, pseudo_bg));
    v[PROPERTY_OFFSET..].copy_from_slice(&property_block(r, stats));
    RegionFeatures { v }
}

/// Descriptors of every region of `seg`, measured on `img_level`.
pub fn level_features(img_level: &Image, seg: &Segmentation, graph: &RegionGraph) -> Vec<RegionFeatures> {
    let pf = PixelFeatures::compute(img_level);
    level_features_from(&pf, seg, graph)
}

pub fn level_features_from(pf: &PixelFeatures, seg: &Segmentation, graph: &RegionGraph) -> Vec<RegionFeatures> {
    let stats = region_stats_from(pf, seg);
    let bg = pseudo_background(pf, BORDER_BAND);
    (0..seg.region_count())
        .map(|r| assemble_features(r, graph, &stats, &bg))
        .collect()
}

/// Debug dump: `region,f0,...,f37` with one row per region.
pub fn write_feature_csv(path: impl AsRef<Path>, feats: &[RegionFeatures]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "region")?;
    for i in 0..FEATURE_DIM {
        write!(out, ",f{i}")?;
    }
    writeln!(out)?;
    for (r, f) in feats.iter().enumerate() {
        write!(out, "{r}")?;
        for v in f.v {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}
