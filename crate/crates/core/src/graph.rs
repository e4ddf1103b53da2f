//! Region adjacency graph over superpixels.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polsar::{FeatureImage, CHANNELS};
use crate::slic::{segment_sizes, SuperpixelSegmentation};

/// Undirected superpixel graph: one node per segment, an edge between every
/// pair of segments sharing a 4-connected pixel boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGraph {
    n_nodes: usize,
    /// Unordered pairs stored as `(lo, hi)`, sorted.
    edges: Vec<(u32, u32)>,
    edge_weights: Vec<f64>,
    node_features: Array2<f64>,
    node_sizes: Vec<usize>,
}

impl SuperpixelGraph {
    pub fn new(
        node_features: Array2<f64>,
        edges: impl IntoIterator<Item = (u32, u32)>,
        node_sizes: Vec<usize>,
        sigma: Option<f64>,
    ) -> Result<Self> {
        let n = node_features.nrows();
        if node_sizes.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} node sizes for {n} nodes",
                node_sizes.len()
            )));
        }
        if node_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptData("non-finite node feature".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a as usize >= n || b as usize >= n {
                return Err(Error::ShapeMismatch(format!("invalid edge ({a}, {b})")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(u32, u32)> = set.into_iter().collect();
        let dist2: Vec<f64> = edges
            .iter()
            .map(|&(a, b)| {
                let (xa, xb) = (node_features.row(a as usize), node_features.row(b as usize));
                xa.iter().zip(xb.iter()).map(|(p, q)| (p - q).powi(2)).sum()
            })
            .collect();
        let sigma = sigma.unwrap_or_else(|| {
            if dist2.is_empty() {
                0.0
            } else {
                dist2.iter().map(|d| d.sqrt()).sum::<f64>() / dist2.len() as f64
            }
        });
        let edge_weights = dist2
            .iter()
            .map(|&d| {
                if d == 0.0 {
                    1.0
                } else if sigma > 0.0 {
                    // stays in (0, 1] until underflow; floor keeps it positive
                    (-d / (2.0 * sigma * sigma)).exp().max(f64::MIN_POSITIVE)
                } else {
                    f64::MIN_POSITIVE
                }
            })
            .collect();
        Ok(Self {
            n_nodes: n,
            edges,
            edge_weights,
            node_features,
            node_sizes,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    /// Pixel count of each node's superpixel.
    pub fn node_sizes(&self) -> &[usize] {
        &self.node_sizes
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::new(self.n_nodes, &self.edges)
    }

    pub fn to_export(&self) -> GraphExport {
        GraphExport {
            n_nodes: self.n_nodes,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            weights: self.edge_weights.clone(),
            features: self.node_features.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_export())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// JSON form of a graph, for debugging and diffing between implementations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub n_nodes: usize,
    pub edges: Vec<[u32; 2]>,
    pub weights: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

/// Neighbor lists in CSR form. Every node lists itself first, then its
/// neighbors in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Adjacency {
    pub fn new(n_nodes: usize, edges: &[(u32, u32)]) -> Self {
        let mut lists: Vec<Vec<u32>> = (0..n_nodes as u32).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            lists[a as usize].push(b);
            lists[b as usize].push(a);
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut list in lists {
            list[1..].sort_unstable();
            list.dedup();
            targets.extend(list);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Neighborhood of `i`, self included.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Range of slot indices for node `i`, for per-(i, j) storage.
    pub fn slots(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Total number of (i, j) pairs, self-loops included.
    pub fn n_slots(&self) -> usize {
        self.targets.len()
    }
}

/// Builds the graph: node features are per-segment means, edges join
/// segments that touch horizontally or vertically, and weights are
/// `exp(-|xi - xj|^2 / (2 sigma^2))` with `sigma` defaulting to the mean
/// adjacent feature distance.
pub fn build_graph(
    features: &FeatureImage,
    seg: &SuperpixelSegmentation,
    sigma: Option<f64>,
) -> Result<SuperpixelGraph> {
    let (h, w) = (seg.height(), seg.width());
    if features.height() != h || features.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} vs segmentation {h}x{w}",
            features.height(),
            features.width()
        )));
    }
    let k = seg.k();
    let sizes = segment_sizes(seg);
    let mut sums = Array2::<f64>::zeros((k, CHANNELS));
    let labels = seg.labels();
    for (p, px) in features.as_slice().chunks_exact(CHANNELS).enumerate() {
        let mut row = sums.row_mut(labels[p] as usize);
        for (acc, v) in row.iter_mut().zip(px) {
            *acc += v;
        }
    }
    for (mut row, &size) in sums.rows_mut().into_iter().zip(&sizes) {
        row /= size as f64;
    }
    let mut edges = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if c + 1 < w && labels[r * w + c + 1] != l {
                edges.push((l, labels[r * w + c + 1]));
            }
            if r + 1 < h && labels[(r + 1) * w + c] != l {
                edges.push((l, labels[(r + 1) * w + c]));
            }
        }
    }
    SuperpixelGraph::new(sums, edges, sizes, sigma)
}

/// Pixel coordinates belonging to each segment, in raster order.
pub fn node_to_pixel_lookup(seg: &SuperpixelSegmentation) -> Vec<Vec<(usize, usize)>> {
    let mut lists = vec![Vec::new(); seg.k()];
    for (p, &l) in seg.labels().iter().enumerate() {
        lists[l as usize].push((p / seg.width(), p % seg.width()));
    }
    lists
}
