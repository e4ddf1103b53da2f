//! SLIC superpixels over an 8-bit RGB image, with 4-connectivity
//! enforcement and contiguous relabeling.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub k_target: usize,
    #[serde(default = "default_compactness")]
    pub compactness: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

fn default_compactness() -> f64 {
    10.0
}

fn default_iterations() -> usize {
    10
}

impl SlicParams {
    pub fn new(k_target: usize) -> Self {
        Self {
            k_target,
            compactness: default_compactness(),
            iterations: default_iterations(),
        }
    }
}

/// Pixel to segment assignment. Labels run over `0..k` and every id is used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelSegmentation {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    k: usize,
    k_target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationHeader {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub k_target: usize,
}

impl SuperpixelSegmentation {
    /// Wraps an existing label map. Ids are compacted to `0..k` keeping
    /// their relative order.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>, k_target: usize) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        let (labels, k) = relabel(&labels);
        Ok(Self {
            height,
            width,
            labels,
            k,
            k_target,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_target(&self) -> usize {
        self.k_target
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn header(&self) -> SegmentationHeader {
        SegmentationHeader {
            height: self.height,
            width: self.width,
            k: self.k,
            k_target: self.k_target,
        }
    }

    /// Writes the label map as little-endian `u32` plus a JSON header.
    pub fn save(&self, bin_path: &Path, header_path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
        let text = serde_json::to_string_pretty(&self.header())?;
        fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
    }

    pub fn load(bin_path: &Path, header_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
        let header: SegmentationHeader = serde_json::from_str(&text)?;
        let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() != header.height * header.width * 4 {
            return Err(Error::ShapeMismatch(format!(
                "{} is {} bytes for {}x{}",
                bin_path.display(),
                bytes.len(),
                header.height,
                header.width
            )));
        }
        let labels = bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let seg = Self::from_labels(header.height, header.width, labels, header.k_target)?;
        if seg.k != header.k {
            return Err(Error::CorruptData(format!(
                "header says {} segments, labels hold {}",
                header.k, seg.k
            )));
        }
        Ok(seg)
    }

    /// The RGB image with segment boundaries painted red.
    pub fn boundary_overlay(&self, rgb: &RgbImage) -> Result<RgbImage> {
        if rgb.height() as usize != self.height || rgb.width() as usize != self.width {
            return Err(Error::ShapeMismatch("overlay image size".into()));
        }
        let mut out = rgb.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let l = self.get(r, c);
                let edge = (c + 1 < self.width && self.get(r, c + 1) != l)
                    || (r + 1 < self.height && self.get(r + 1, c) != l);
                if edge {
                    out.put_pixel(c as u32, r as u32, image::Rgb([255, 0, 0]));
                }
            }
        }
        Ok(out)
    }
}

/// Pixel count of every segment.
pub fn segment_sizes(seg: &SuperpixelSegmentation) -> Vec<usize> {
    let mut sizes = vec![0; seg.k];
    for &l in &seg.labels {
        sizes[l as usize] += 1;
    }
    sizes
}

fn relabel(labels: &[u32]) -> (Vec<u32>, usize) {
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.last().map_or(true, |&m| m as usize + 1 == ids.len()) {
        return (labels.to_vec(), ids.len());
    }
    let out = labels
        .iter()
        .map(|l| ids.binary_search(l).expect("id present") as u32)
        .collect();
    (out, ids.len())
}

fn srgb_to_linear(v: u8) -> f64 {
    let c = f64::from(v) / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    row: f64,
    col: f64,
}

/// Runs SLIC. Every segment of the result is 4-connected and the segment
/// count never exceeds 1.5 × `k_target`.
pub fn slic_segment(rgb: &RgbImage, params: &SlicParams) -> Result<SuperpixelSegmentation> {
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    let n = h * w;
    let k_target = params.k_target;
    if k_target == 0 || k_target > n {
        return Err(Error::InvalidK { k_target, pixels: n });
    }
    let lab: Vec<[f64; 3]> = rgb.pixels().map(|p| rgb_to_lab(p.0)).collect();
    let step = (n as f64 / k_target as f64).sqrt();

    let (ny, nx) = grid_shape(h, w, step, k_target);
    let (dy, dx) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let gradient = |r: usize, c: usize| -> f64 {
        let at = |r: usize, c: usize| lab[r * w + c];
        let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
        d2(at(r, (c + 1).min(w - 1)), at(r, c.saturating_sub(1)))
            + d2(at((r + 1).min(h - 1), c), at(r.saturating_sub(1), c))
    };
    let mut centers = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let r0 = (((i as f64 + 0.5) * dy) as usize).min(h - 1);
            let c0 = (((j as f64 + 0.5) * dx) as usize).min(w - 1);
            let (mut best, mut best_g) = ((r0, c0), gradient(r0, c0));
            for r in r0.saturating_sub(1)..=(r0 + 1).min(h - 1) {
                for c in c0.saturating_sub(1)..=(c0 + 1).min(w - 1) {
                    let g = gradient(r, c);
                    if g < best_g {
                        best = (r, c);
                        best_g = g;
                    }
                }
            }
            centers.push(Center {
                lab: lab[best.0 * w + best.1],
                row: best.0 as f64,
                col: best.1 as f64,
            });
        }
    }

    let radius = step.max(dy).max(dx).ceil() as isize;
    let spatial_weight = params.compactness / step;
    let distance = |center: &Center, r: usize, c: usize| -> f64 {
        let p = lab[r * w + c];
        let d_lab = (0..3).map(|i| (center.lab[i] - p[i]).powi(2)).sum::<f64>().sqrt();
        let d_xy = ((center.row - r as f64).powi(2) + (center.col - c as f64).powi(2)).sqrt();
        d_lab + spatial_weight * d_xy
    };
    let mut assignment = vec![u32::MAX; n];
    let mut best_dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        assignment.fill(u32::MAX);
        best_dist.fill(f64::INFINITY);
        for (idx, center) in centers.iter().enumerate() {
            let (cr, cc) = (center.row.round() as isize, center.col.round() as isize);
            let r_lo = (cr - radius).max(0) as usize;
            let r_hi = ((cr + radius) as usize).min(h - 1);
            let c_lo = (cc - radius).max(0) as usize;
            let c_hi = ((cc + radius) as usize).min(w - 1);
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let d = distance(center, r, c);
                    if d < best_dist[r * w + c] {
                        best_dist[r * w + c] = d;
                        assignment[r * w + c] = idx as u32;
                    }
                }
            }
        }
        for p in 0..n {
            if assignment[p] == u32::MAX {
                let (r, c) = (p / w, p % w);
                let nearest = centers
                    .iter()
                    .enumerate()
                    .map(|(i, ctr)| (i, distance(ctr, r, c)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("at least one center");
                assignment[p] = nearest as u32;
            }
        }
        let mut sums = vec![([0.0; 3], 0.0, 0.0, 0usize); centers.len()];
        for (p, &a) in assignment.iter().enumerate() {
            let s = &mut sums[a as usize];
            for i in 0..3 {
                s.0[i] += lab[p][i];
            }
            s.1 += (p / w) as f64;
            s.2 += (p % w) as f64;
            s.3 += 1;
        }
        for (center, (lab_sum, rs, cs, count)) in centers.iter_mut().zip(sums) {
            if count > 0 {
                let m = count as f64;
                center.lab = lab_sum.map(|v| v / m);
                center.row = rs / m;
                center.col = cs / m;
            }
        }
    }

    let min_size = step * step / 4.0;
    let labels = enforce_connectivity(&assignment, h, w, min_size, k_target * 3 / 2);
    SuperpixelSegmentation::from_labels(h, w, labels, k_target)
}

/// Grid of initial centers: roughly square cells of side `step`, never more
/// than `k_target` of them.
fn grid_shape(h: usize, w: usize, step: f64, k_target: usize) -> (usize, usize) {
    let mut ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let mut nx = ((w as f64 / step).round() as usize).clamp(1, w);
    while ny * nx > k_target {
        // shrink the axis whose cells are currently the narrowest
        let rows_narrower = (h as f64 / ny as f64) <= (w as f64 / nx as f64);
        if ny > 1 && (rows_narrower || nx == 1) {
            ny -= 1;
        } else {
            nx -= 1;
        }
    }
    (ny, nx)
}

/// Splits every cluster into its 4-connected components, merges
/// components smaller than `min_size` (and, if needed to respect
/// `max_segments`, the smallest remaining ones) into their largest
/// adjacent neighbor, ties broken by smallest component id.
fn enforce_connectivity(
    assignment: &[u32],
    h: usize,
    w: usize,
    min_size: f64,
    max_segments: usize,
) -> Vec<u32> {
    let n = h * w;
    let mut comp = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let cluster = assignment[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == u32::MAX && assignment[q] == cluster {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }

    let m = sizes.len();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); m];
    for p in 0..n {
        let (r, c) = (p / w, p % w);
        let a = comp[p] as usize;
        for q in [(c + 1 < w).then(|| p + 1), (r + 1 < h).then(|| p + w)]
            .into_iter()
            .flatten()
        {
            let b = comp[q] as usize;
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }

    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut group_size = sizes.clone();
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut groups = m;

    // Merges root `a` into its largest adjacent group. Returns false if it
    // has no neighbor.
    let merge_into_neighbor = |a: usize,
                                   parent: &mut Vec<usize>,
                                   group_size: &mut Vec<usize>,
                                   members: &mut Vec<Vec<usize>>|
     -> bool {
        let mut best: Option<usize> = None;
        for &member in &members[a] {
            for &nb in &adjacency[member] {
                let root = find(parent, nb);
                if root == a {
                    continue;
                }
                best = match best {
                    Some(b) if group_size[b] > group_size[root]
                        || (group_size[b] == group_size[root] && b < root) =>
                    {
                        Some(b)
                    }
                    _ => Some(root),
                };
            }
        }
        let Some(target) = best else { return false };
        parent[a] = target;
        group_size[target] += group_size[a];
        let moved = std::mem::take(&mut members[a]);
        members[target].extend(moved);
        true
    };

    for i in 0..m {
        let root = find(&mut parent, i);
        if root == i
            && (group_size[i] as f64) < min_size
            && merge_into_neighbor(i, &mut parent, &mut group_size, &mut members)
        {
            groups -= 1;
        }
    }
    while groups > max_segments.max(1) {
        let smallest = (0..m)
            .filter(|&i| parent[i] == i)
            .min_by_key(|&i| (group_size[i], i))
            .expect("at least one group");
        if !merge_into_neighbor(smallest, &mut parent, &mut group_size, &mut members) {
            break;
        }
        groups -= 1;
    }

    (0..n)
        .map(|p| find(&mut parent, comp[p] as usize) as u32)
        .collect()
}
