//! Graph-based superpixels at the finest scale and greedy similarity merging
//! for the coarser levels of the hierarchy.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use crate::imaging::{lab_to_unit, rgb_to_lab, save_image, Image, ImagingError, ScaleSpace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentationError {
    #[error("expected {expected} merge thresholds, got {got}")]
    ThresholdCount { expected: usize, got: usize },
    #[error("merge threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("label map {got_w}x{got_h} does not match image {w}x{h}")]
    Dimensions {
        w: usize,
        h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("per-region feature count {got} does not match region count {expected}")]
    FeatureCount { expected: usize, got: usize },
}

/// Partition of the pixel grid into 4-connected regions with contiguous ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    labels: Vec<usize>,
    region_count: usize,
    level: usize,
}

impl Segmentation {
    /// Builds a segmentation from any labeling; ids are renumbered in raster order
    /// of first appearance.
    pub fn from_labels(width: usize, height: usize, labels: &[usize], level: usize) -> Self {
        assert_eq!(labels.len(), width * height, "label map size");
        let (labels, region_count) = canonical_labels(labels);
        Self {
            width,
            height,
            labels,
            region_count,
            level,
        }
    }

    /// Keeps the given ids as-is; they must cover exactly `0..region_count`.
    pub fn with_exact_labels(width: usize, height: usize, labels: Vec<usize>, level: usize) -> Option<Self> {
        if labels.len() != width * height {
            return None;
        }
        let region_count = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; region_count];
        labels.iter().for_each(|&l| seen[l] = true);
        if !seen.iter().all(|&s| s) {
            return None;
        }
        Some(Self {
            width,
            height,
            labels,
            region_count,
            level,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    /// 1-based index of the hierarchy level this partition belongs to.
    pub fn level(&self) -> usize {
        self.level
    }

    /// Writes the label map as an RGB PNG with a fixed pseudo-random palette.
    pub fn save_debug_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let img = Image::from_fn(self.width, self.height, |x, y| palette(self.label(x, y)));
        save_image(&img, path)
    }
}

fn palette(label: usize) -> [f64; 3] {
    // splitmix-style scramble, deterministic across runs
    let mut z = (label as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    [
        (z & 0xff) as f64 / 255.0,
        ((z >> 8) & 0xff) as f64 / 255.0,
        ((z >> 16) & 0xff) as f64 / 255.0,
    ]
}

fn canonical_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut remap = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = remap.len();
            *remap.entry(l).or_insert(next)
        })
        .collect();
    (out, remap.len())
}

/// Nested partitions, finest first. `parent_maps[k - 1]` maps level-`k-1` ids
/// to level-`k` ids (0-based level indices).
#[derive(Debug, Clone)]
pub struct SegmentationHierarchy {
    levels: Vec<Segmentation>,
    parent_maps: Vec<Vec<usize>>,
}

impl SegmentationHierarchy {
    pub fn levels(&self) -> &[Segmentation] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &Segmentation {
        &self.levels[k]
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn parent_maps(&self) -> &[Vec<usize>] {
        &self.parent_maps
    }

    /// Region counts per level, finest first.
    pub fn region_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Segmentation::region_count).collect()
    }
}

/// Region adjacency and bookkeeping for one segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGraph {
    pub adjacency: Vec<BTreeSet<usize>>,
    pub border_flags: Vec<bool>,
    pub areas: Vec<usize>,
    /// Number of image-border pixels owned by each region.
    pub border_pixels: Vec<usize>,
}

impl RegionGraph {
    pub fn region_count(&self) -> usize {
        self.areas.len()
    }
}

pub fn build_region_graph(seg: &Segmentation) -> RegionGraph {
    let n = seg.region_count;
    let (w, h) = (seg.width, seg.height);
    let mut adjacency = vec![BTreeSet::new(); n];
    let mut border_flags = vec![false; n];
    let mut areas = vec![0usize; n];
    let mut border_pixels = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let l = seg.labels[y * w + x];
            areas[l] += 1;
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                border_flags[l] = true;
                border_pixels[l] += 1;
            }
            if x + 1 < w {
                let r = seg.labels[y * w + x + 1];
                if r != l {
                    adjacency[l].insert(r);
                    adjacency[r].insert(l);
                }
            }
            if y + 1 < h {
                let d = seg.labels[(y + 1) * w + x];
                if d != l {
                    adjacency[l].insert(d);
                    adjacency[d].insert(l);
                }
            }
        }
    }
    RegionGraph {
        adjacency,
        border_flags,
        areas,
        border_pixels,
    }
}

// ---------------------------------------------------------------------------
// Felzenszwalb-Huttenlocher segmentation

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Unites two roots; the smaller index becomes the root.
    fn union_roots(&mut self, a: usize, b: usize) -> usize {
        let (root, child) = if a < b { (a, b) } else { (b, a) };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        root
    }
}

#[derive(Clone, Copy)]
struct PixelEdge {
    a: u32,
    b: u32,
    weight: f32,
    diagonal: bool,
}

fn pixel_edges(img: &Image) -> Vec<PixelEdge> {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let dist = |i: usize, j: usize| -> f32 {
        let (p, q) = (px[i], px[j]);
        let d: f64 = (0..3).map(|c| (255.0 * (p[c] - q[c])).powi(2)).sum();
        d.sqrt() as f32
    };
    let mut edges = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut push = |j: usize, diagonal: bool| {
                edges.push(PixelEdge {
                    a: i as u32,
                    b: j as u32,
                    weight: dist(i, j),
                    diagonal,
                })
            };
            if x + 1 < w {
                push(i + 1, false);
            }
            if y + 1 < h {
                push(i + w, false);
                if x + 1 < w {
                    push(i + w + 1, true);
                }
                if x > 0 {
                    push(i + w - 1, true);
                }
            }
        }
    }
    // stable sort keeps construction order among equal weights
    edges.sort_by(|e, f| e.weight.total_cmp(&f.weight));
    edges
}

/// Graph-based segmentation on the 8-connected pixel grid (edge weight is the
/// RGB distance on a 0..255 scale, merge predicate `w <= Int(C) + k/|C|`),
/// followed by a pass that merges components below `min_size` into their
/// cheapest 4-adjacent neighbor. Regions are 4-connected on return.
pub fn segment_finest(img: &Image, k_param: f64, min_size: usize) -> Segmentation {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let edges = pixel_edges(img);

    let mut ds = DisjointSet::new(n);
    let mut threshold = vec![k_param; n];
    for e in &edges {
        let ra = ds.find(e.a as usize);
        let rb = ds.find(e.b as usize);
        if ra == rb {
            continue;
        }
        let wt = e.weight as f64;
        if wt <= threshold[ra] && wt <= threshold[rb] {
            let root = ds.union_roots(ra, rb);
            threshold[root] = wt + k_param / ds.size[root] as f64;
        }
    }
    let coarse: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();

    // 8-connected components may touch only diagonally; split them into
    // 4-connected pieces before enforcing the minimum size.
    let pieces = four_connected_components(&coarse, w, h);
    let mut ds = DisjointSet::new(n);
    for i in 0..n {
        let root = pieces[i];
        if root != i {
            let (ra, rb) = (ds.find(root), ds.find(i));
            if ra != rb {
                ds.union_roots(ra, rb);
            }
        }
    }
    for e in edges.iter().filter(|e| !e.diagonal) {
        let ra = ds.find(e.a as usize);
        let rb = ds.find(e.b as usize);
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            ds.union_roots(ra, rb);
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();
    Segmentation::from_labels(w, h, &labels, 1)
}

/// Labels each pixel with the smallest pixel index of its 4-connected
/// same-label component.
fn four_connected_components(labels: &[usize], w: usize, h: usize) -> Vec<usize> {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = start;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[start] {
                    comp[j] = start;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    comp
}

// ---------------------------------------------------------------------------
// Similarity merging

/// Scale of the Lab distance in the merge similarity `exp(-d / scale)`.
pub const MERGE_DISTANCE_SCALE: f64 = 0.1;

pub fn merge_similarity(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    (-d / MERGE_DISTANCE_SCALE).exp()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    similarity: f64,
    a: usize,
    b: usize,
    version_a: u32,
    version_b: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // max-heap on similarity; ties go to the lexicographically smallest pair
    fn cmp(&self, other: &Self) -> Ordering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

/// Mean of the [0,1]-scaled Lab color of `img` over each region of `seg`.
pub fn region_mean_lab(img: &Image, seg: &Segmentation) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; seg.region_count];
    let mut counts = vec![0usize; seg.region_count];
    for (p, &l) in img.pixels().iter().zip(&seg.labels) {
        let lab = lab_to_unit(rgb_to_lab(*p));
        for c in 0..3 {
            sums[l][c] += lab[c];
        }
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| s.map(|v| v / n.max(1) as f64))
        .collect()
}

/// Greedily merges the most similar adjacent pair while its similarity
/// exceeds `threshold`, re-scoring merged regions after every merge.
/// Returns the coarser partition and the map from `prev` ids to new ids.
pub fn merge_level(
    prev: &Segmentation,
    graph: &RegionGraph,
    mean_lab: &[[f64; 3]],
    threshold: f64,
) -> Result<(Segmentation, Vec<usize>), SegmentationError> {
    if !(threshold > 0.0) {
        return Err(SegmentationError::Threshold(threshold));
    }
    let n = prev.region_count;
    if mean_lab.len() != n || graph.region_count() != n {
        return Err(SegmentationError::FeatureCount {
            expected: n,
            got: mean_lab.len().min(graph.region_count()),
        });
    }

    let mut ds = DisjointSet::new(n);
    let mut means = mean_lab.to_vec();
    let mut areas: Vec<f64> = graph.areas.iter().map(|&a| a as f64).collect();
    let mut adjacency = graph.adjacency.clone();
    let mut version = vec![0u32; n];
    let mut heap = BinaryHeap::new();
    for a in 0..n {
        for &b in adjacency[a].range(a + 1..) {
            heap.push(Candidate {
                similarity: merge_similarity(means[a], means[b]),
                a,
                b,
                version_a: 0,
                version_b: 0,
            });
        }
    }

    while let Some(c) = heap.pop() {
        if c.similarity <= threshold {
            break;
        }
        let live = ds.parent[c.a] == c.a
            && ds.parent[c.b] == c.b
            && version[c.a] == c.version_a
            && version[c.b] == c.version_b;
        if !live {
            continue;
        }
        let root = ds.union_roots(c.a, c.b);
        let gone = if root == c.a { c.b } else { c.a };
        let total = areas[root] + areas[gone];
        for ch in 0..3 {
            means[root][ch] = (means[root][ch] * areas[root] + means[gone][ch] * areas[gone]) / total;
        }
        areas[root] = total;
        let moved = std::mem::take(&mut adjacency[gone]);
        for nb in moved {
            adjacency[nb].remove(&gone);
            if nb != root {
                adjacency[nb].insert(root);
                adjacency[root].insert(nb);
            }
        }
        adjacency[root].remove(&gone);
        version[root] += 1;
        version[gone] += 1;
        for &nb in &adjacency[root] {
            let (a, b) = if root < nb { (root, nb) } else { (nb, root) };
            heap.push(Candidate {
                similarity: merge_similarity(means[a], means[b]),
                a,
                b,
                version_a: version[a],
                version_b: version[b],
            });
        }
    }

    // roots are group minima, so ordering by root preserves raster order
    let mut new_id = vec![usize::MAX; n];
    let mut next = 0;
    let mut parent_map = vec![0; n];
    for r in 0..n {
        let root = ds.find(r);
        if new_id[root] == usize::MAX {
            new_id[root] = next;
            next += 1;
        }
        parent_map[r] = new_id[root];
    }
    let labels: Vec<usize> = prev.labels.iter().map(|&l| parent_map[l]).collect();
    let seg = Segmentation {
        width: prev.width,
        height: prev.height,
        labels,
        region_count: next,
        level: prev.level + 1,
    };
    Ok((seg, parent_map))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationParams {
    /// Scale parameter of the graph segmentation (0..255 weight units).
    pub k_param: f64,
    pub min_size: usize,
    /// One similarity threshold per level after the finest.
    pub thresholds: Vec<f64>,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            k_param: 200.0,
            min_size: 100,
            thresholds: vec![0.7, 0.6, 0.5],
        }
    }
}

/// Finest level from the sharpest image, then one merge per coarser level
/// using that level's (blurred) colors.
pub fn build_hierarchy(
    ss: &ScaleSpace,
    params: &SegmentationParams,
) -> Result<SegmentationHierarchy, SegmentationError> {
    let depth = ss.depth();
    if params.thresholds.len() + 1 != depth {
        return Err(SegmentationError::ThresholdCount {
            expected: depth.saturating_sub(1),
            got: params.thresholds.len(),
        });
    }
    let finest = segment_finest(ss.level(0), params.k_param, params.min_size);
    let mut levels = vec![finest];
    let mut parent_maps = Vec::with_capacity(depth - 1);
    for (k, &threshold) in params.thresholds.iter().enumerate() {
        let prev = &levels[k];
        let img = ss.level(k + 1);
        if img.width() != prev.width || img.height() != prev.height {
            return Err(SegmentationError::Dimensions {
                w: img.width(),
                h: img.height(),
                got_w: prev.width,
                got_h: prev.height,
            });
        }
        let graph = build_region_graph(prev);
        let means = region_mean_lab(img, prev);
        let (next, parents) = merge_level(prev, &graph, &means, threshold)?;
        levels.push(next);
        parent_maps.push(parents);
    }
    Ok(SegmentationHierarchy { levels, parent_maps })
}
