//! Random-forest regression from region descriptors to saliency scores.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::features::{RegionFeatures, FEATURE_DIM};
use crate::imaging::GrayMap;
use crate::segmentation::Segmentation;

const MAGIC: &[u8; 4] = b"SFRF";
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ForestError {
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("forest needs at least one tree")]
    NoTrees,
    #[error("target {0} outside [0, 1]")]
    Target(f64),
    #[error("forest file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a forest file (bad magic)")]
    BadMagic,
    #[error("unsupported forest file version {0}")]
    Version(u32),
    #[error("forest file truncated")]
    Truncated,
    #[error("corrupt forest file: {0}")]
    Corrupt(&'static str),
}

/// One region descriptor with its salient-pixel fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub v: RegionFeatures,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 200,
            min_leaf: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Regression tree stored in pre-order; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<Node>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<Tree>,
    feature_dim: usize,
}

impl ForestModel {
    pub fn new(trees: Vec<Tree>, feature_dim: usize) -> Result<Self, ForestError> {
        if trees.is_empty() {
            return Err(ForestError::NoTrees);
        }
        Ok(Self { trees, feature_dim })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Mean of the tree outputs, clamped to `[0, 1]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.feature_dim, "feature dimension");
        let s: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        (s / self.trees.len() as f64).clamp(0.0, 1.0)
    }
}

pub fn predict_region(model: &ForestModel, v: &RegionFeatures) -> f64 {
    model.predict(&v.v)
}

/// Paints every pixel with its region's predicted score.
pub fn score_level(model: &ForestModel, seg: &Segmentation, feats: &[RegionFeatures]) -> GrayMap {
    assert_eq!(feats.len(), seg.region_count(), "one descriptor per region");
    let scores: Vec<f64> = feats.iter().map(|f| predict_region(model, f)).collect();
    GrayMap::new(
        seg.width(),
        seg.height(),
        seg.labels().iter().map(|&l| scores[l]).collect(),
    )
    .expect("segmentation dims are valid")
}

// ---------------------------------------------------------------------------
// Training

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split_on(feature: usize, idx: &[usize], xs: &[&[f64]], ys: &[f64], buf: &mut Vec<(f64, f64)>) -> Option<Split> {
    buf.clear();
    buf.extend(idx.iter().map(|&i| (xs[i][feature], ys[i])));
    buf.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = buf.len() as f64;
    let total: f64 = buf.iter().map(|p| p.1).sum();
    let base = total * total / n;
    let mut left = 0.0;
    let mut best: Option<Split> = None;
    for i in 0..buf.len() - 1 {
        left += buf[i].1;
        if buf[i].0 == buf[i + 1].0 {
            continue;
        }
        let nl = (i + 1) as f64;
        let right = total - left;
        let gain = left * left / nl + right * right / (n - nl) - base;
        if best.as_ref().is_none_or(|b| gain > b.gain) {
            let mut threshold = 0.5 * (buf[i].0 + buf[i + 1].0);
            if threshold >= buf[i + 1].0 {
                threshold = buf[i].0;
            }
            best = Some(Split {
                feature,
                threshold,
                gain,
            });
        }
    }
    best
}

fn grow_tree(xs: &[&[f64]], ys: &[f64], dim: usize, min_leaf: usize, rng: &mut ChaCha8Rng) -> Tree {
    let n = ys.len();
    let bootstrap: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mtry = (dim as f64).sqrt().ceil() as usize;

    enum Slot {
        Root,
        Left(usize),
        Right(usize),
    }
    let mut nodes: Vec<Node> = Vec::new();
    let mut stack = vec![(Slot::Root, bootstrap)];
    let mut buf = Vec::new();
    let mut features: Vec<usize> = (0..dim).collect();
    while let Some((slot, idx)) = stack.pop() {
        let id = nodes.len();
        match slot {
            Slot::Root => {}
            Slot::Left(p) => {
                if let Node::Split { left, .. } = &mut nodes[p] {
                    *left = id;
                }
            }
            Slot::Right(p) => {
                if let Node::Split { right, .. } = &mut nodes[p] {
                    *right = id;
                }
            }
        }
        let mean = idx.iter().map(|&i| ys[i]).sum::<f64>() / idx.len() as f64;
        let pure = idx.iter().all(|&i| ys[i] == ys[idx[0]]);
        if idx.len() <= min_leaf || pure {
            nodes.push(Node::Leaf {
                value: mean.clamp(0.0, 1.0),
            });
            continue;
        }
        // draw mtry candidates; keep drawing past mtry only if none splits
        features.shuffle(rng);
        let mut best: Option<Split> = None;
        for (k, &f) in features.iter().enumerate() {
            if k >= mtry && best.is_some() {
                break;
            }
            if let Some(s) = best_split_on(f, &idx, xs, ys, &mut buf) {
                if best.as_ref().is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
        }
        let Some(split) = best else {
            nodes.push(Node::Leaf {
                value: mean.clamp(0.0, 1.0),
            });
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| xs[i][split.feature] <= split.threshold);
        nodes.push(Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: usize::MAX,
            right: usize::MAX,
        });
        // left is popped first, which keeps the node vector in pre-order
        stack.push((Slot::Right(id), r));
        stack.push((Slot::Left(id), l));
    }
    Tree { nodes }
}

/// Bagged regression trees with `⌈√dim⌉` candidate features per node.
/// Tree `i` draws from a ChaCha stream `i` keyed by `params.seed`, so the
/// result does not depend on thread scheduling.
pub fn train_forest(samples: &[TrainSample], params: &ForestParams) -> Result<ForestModel, ForestError> {
    if samples.is_empty() {
        return Err(ForestError::EmptyTrainingSet);
    }
    if params.trees == 0 {
        return Err(ForestError::NoTrees);
    }
    if let Some(bad) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.target)) {
        return Err(ForestError::Target(bad.target));
    }
    let xs: Vec<&[f64]> = samples.iter().map(|s| &s.v.v[..]).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let min_leaf = params.min_leaf.max(1);
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            grow_tree(&xs, &ys, FEATURE_DIM, min_leaf, &mut rng)
        })
        .collect();
    ForestModel::new(trees, FEATURE_DIM)
}

// ---------------------------------------------------------------------------
// Persistence

/// Little-endian layout: magic `SFRF`, version u32, tree count u32,
/// feature dim u32, then per tree a node count u32 followed by pre-order
/// records `{tag u8, feature u32, value f64}` (tag 0 leaf, 1 split; value is
/// the leaf output or the split threshold).
pub fn write_forest(model: &ForestModel, mut w: impl Write) -> Result<(), ForestError> {
    w.write_all(MAGIC)?;
    w.write_all(&FOREST_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(model.trees.len() as u32).to_le_bytes())?;
    w.write_all(&(model.feature_dim as u32).to_le_bytes())?;
    for tree in &model.trees {
        w.write_all(&(tree.nodes.len() as u32).to_le_bytes())?;
        for node in &tree.nodes {
            let (tag, feature, value) = match *node {
                Node::Leaf { value } => (0u8, 0u32, value),
                Node::Split { feature, threshold, .. } => (1u8, feature as u32, threshold),
            };
            w.write_all(&[tag])?;
            w.write_all(&feature.to_le_bytes())?;
            w.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], ForestError> {
        let end = self.pos.checked_add(N).ok_or(ForestError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ForestError::Truncated)?;
        self.pos = end;
        Ok(s.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
}

pub fn read_forest(mut r: impl Read) -> Result<ForestModel, ForestError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take::<4>().map_err(|_| ForestError::BadMagic)? != *MAGIC {
        return Err(ForestError::BadMagic);
    }
    let version = c.u32()?;
    if version != FOREST_FORMAT_VERSION {
        return Err(ForestError::Version(version));
    }
    let tree_count = c.u32()? as usize;
    let feature_dim = c.u32()? as usize;
    let mut trees = Vec::with_capacity(tree_count.min(1 << 16));
    for _ in 0..tree_count {
        let node_count = c.u32()? as usize;
        let mut records = Vec::with_capacity(node_count.min(1 << 20));
        for _ in 0..node_count {
            let [tag] = c.take::<1>()?;
            let feature = c.u32()? as usize;
            let value = f64::from_le_bytes(c.take()?);
            records.push((tag, feature, value));
        }
        trees.push(rebuild_tree(&records, feature_dim)?);
    }
    if c.pos != bytes.len() {
        return Err(ForestError::Corrupt("trailing bytes"));
    }
    ForestModel::new(trees, feature_dim)
}

fn rebuild_tree(records: &[(u8, usize, f64)], feature_dim: usize) -> Result<Tree, ForestError> {
    if records.is_empty() {
        return Err(ForestError::Corrupt("empty tree"));
    }
    let mut nodes = Vec::with_capacity(records.len());
    // parents awaiting children: (node id, left already assigned)
    let mut open: Vec<(usize, bool)> = Vec::new();
    for (id, &(tag, feature, value)) in records.iter().enumerate() {
        if id > 0 {
            let Some(top) = open.last_mut() else {
                return Err(ForestError::Corrupt("node outside tree"));
            };
            let parent = top.0;
            if let Node::Split { left, right, .. } = &mut nodes[parent] {
                if !top.1 {
                    *left = id;
                    top.1 = true;
                } else {
                    *right = id;
                    open.pop();
                }
            }
        }
        match tag {
            0 => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ForestError::Corrupt("leaf value outside [0, 1]"));
                }
                nodes.push(Node::Leaf { value });
            }
            1 => {
                if feature >= feature_dim || !value.is_finite() {
                    return Err(ForestError::Corrupt("bad split record"));
                }
                nodes.push(Node::Split {
                    feature,
                    threshold: value,
                    left: usize::MAX,
                    right: usize::MAX,
                });
                open.push((id, false));
            }
            _ => return Err(ForestError::Corrupt("unknown node tag")),
        }
    }
    if !open.is_empty() {
        return Err(ForestError::Truncated);
    }
    Ok(Tree { nodes })
}

pub fn save_forest(model: &ForestModel, path: impl AsRef<Path>) -> Result<(), ForestError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_forest(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<ForestModel, ForestError> {
    read_forest(std::fs::File::open(path)?)
}
