//! Pixel branch: a four-block patch CNN.
//!
//! Each block is a 3×3 convolution (stride 1, zero padding 1) followed by
//! ReLU; blocks 2 and 4 end with a 2×2/2 max-pool (floor). A final
//! fully-connected layer maps the flattened block-4 output to the embedding
//! width shared with the superpixel branch.
//!
//! Activations are stored as `(batch·side·side) × channels` matrices in
//! row-major `(b, y, x)` order so that convolutions are one GEMM over an
//! im2col buffer.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot, Parameters};
use crate::polsar::{FeatureImage, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub patch_size: usize,
    pub channels: [usize; 4],
    pub out_dim: usize,
    pub in_channels: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            patch_size: 15,
            channels: [128, 256, 512, 512],
            out_dim: 64,
            in_channels: CHANNELS,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size < 5 {
            return Err(Error::InvalidPatchSize(self.patch_size));
        }
        if self.channels.contains(&0) || self.out_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("cnn widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side after the second pooling.
    pub fn final_side(&self) -> usize {
        self.patch_size / 2 / 2
    }

    pub fn flat_dim(&self) -> usize {
        self.final_side() * self.final_side() * self.channels[3]
    }
}

/// An `n × n × 9` window of the feature image centered on one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: (usize, usize),
    pub size: usize,
    /// Row-major `(y, x, channel)`.
    pub data: Vec<f64>,
}

/// Reflect-without-repeat indexing: -1 maps to 1, `len` to `len - 2`.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub(crate) fn fill_patch(features: &FeatureImage, center: (usize, usize), n: usize, out: &mut [f64]) {
    let half = (n / 2) as isize;
    let (h, w) = (features.height(), features.width());
    let src = features.as_slice();
    for dy in 0..n {
        let r = reflect(center.0 as isize + dy as isize - half, h);
        for dx in 0..n {
            let c = reflect(center.1 as isize + dx as isize - half, w);
            let from = (r * w + c) * CHANNELS;
            let to = (dy * n + dx) * CHANNELS;
            out[to..to + CHANNELS].copy_from_slice(&src[from..from + CHANNELS]);
        }
    }
}

/// Extracts the patch around `center`, mirror-padding at the borders.
pub fn extract_patch(features: &FeatureImage, center: (usize, usize), n: usize) -> Result<Patch> {
    if n % 2 == 0 {
        return Err(Error::InvalidPatchSize(n));
    }
    if center.0 >= features.height() || center.1 >= features.width() {
        return Err(Error::OutOfBounds {
            row: center.0,
            col: center.1,
            height: features.height(),
            width: features.width(),
        });
    }
    let mut data = vec![0.0; n * n * CHANNELS];
    fill_patch(features, center, n, &mut data);
    Ok(Patch {
        center,
        size: n,
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub config: CnnConfig,
    /// `(9·c_in) × c_out` per block; row index is `(ky·3 + kx)·c_in + c`.
    pub conv_weight: [Array2<f64>; 4],
    pub conv_bias: [Array2<f64>; 4],
    /// `flat_dim × out_dim`.
    pub fc_weight: Array2<f64>,
    pub fc_bias: Array2<f64>,
}

const POOL_AFTER: [bool; 4] = [false, true, false, true];

impl CnnParams {
    pub fn init<R: Rng>(config: &CnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for &c_out in &config.channels {
            weights.push(glorot(rng, 9 * c_in, c_out, 9 * c_in, 9 * c_out));
            biases.push(Array2::zeros((1, c_out)));
            c_in = c_out;
        }
        let flat = config.flat_dim();
        Ok(Self {
            config: config.clone(),
            conv_weight: weights.try_into().expect("four blocks"),
            conv_bias: biases.try_into().expect("four blocks"),
            fc_weight: glorot(rng, flat, config.out_dim, flat, config.out_dim),
            fc_bias: Array2::zeros((1, config.out_dim)),
        })
    }

    /// Writes the patches around `centers` into a network input matrix.
    pub fn gather_input(&self, features: &FeatureImage, centers: &[(usize, usize)]) -> Array2<f64> {
        let n = self.config.patch_size;
        let per = n * n * CHANNELS;
        let mut data = vec![0.0; centers.len() * per];
        for (chunk, &c) in data.chunks_exact_mut(per).zip(centers) {
            fill_patch(features, c, n, chunk);
        }
        Array2::from_shape_vec((centers.len() * n * n, CHANNELS), data).expect("sized buffer")
    }

    pub fn forward(&self, input: ArrayView2<f64>, batch: usize) -> Result<(Array2<f64>, CnnCache)> {
        self.ensure_finite()?;
        let n = self.config.patch_size;
        if input.nrows() != batch * n * n || input.ncols() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "cnn input {}x{} for batch {batch} of {n}x{n} patches",
                input.nrows(),
                input.ncols()
            )));
        }
        let mut side = n;
        let mut x = input.to_owned();
        let mut blocks = Vec::with_capacity(4);
        for l in 0..4 {
            let cols = im2col(x.view(), batch, side);
            let mut y = cols.dot(&self.conv_weight[l]);
            y += &self.conv_bias[l];
            y.mapv_inplace(|v| v.max(0.0));
            let (next, argmax, next_side) = if POOL_AFTER[l] {
                let (p, idx) = max_pool(y.view(), batch, side);
                (p, Some(idx), side / 2)
            } else {
                (y.clone(), None, side)
            };
            blocks.push(BlockCache {
                input: x,
                side,
                relu_out: y,
                argmax,
            });
            x = next;
            side = next_side;
        }
        let flat = x
            .into_shape_with_order((batch, self.config.flat_dim()))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let mut out = flat.dot(&self.fc_weight);
        out += &self.fc_bias;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalError("non-finite cnn output".into()));
        }
        Ok((out, CnnCache { batch, blocks, flat }))
    }

    /// Forward pass that keeps only the output.
    pub fn infer(&self, input: ArrayView2<f64>, batch: usize) -> Result<Array2<f64>> {
        self.forward(input, batch).map(|(out, _)| out)
    }

    /// Post-ReLU activations of every block (before pooling), with their
    /// spatial side.
    pub fn block_activations(&self, input: ArrayView2<f64>, batch: usize) -> Result<Vec<(usize, Array2<f64>)>> {
        let (_, cache) = self.forward(input, batch)?;
        Ok(cache.blocks.into_iter().map(|b| (b.side, b.relu_out)).collect())
    }

    /// Accumulates parameter gradients for `d_out` (`batch × out_dim`).
    pub fn backward(&self, cache: &CnnCache, d_out: ArrayView2<f64>, grads: &mut CnnParams) {
        let batch = cache.batch;
        grads.fc_weight += &cache.flat.t().dot(&d_out);
        grads.fc_bias += &d_out.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let d_flat = d_out.dot(&self.fc_weight.t());
        let last = &cache.blocks[3];
        let mut d_x = d_flat
            .into_shape_with_order((batch * (last.side / 2) * (last.side / 2), self.config.channels[3]))
            .expect("flat layout matches block output");
        for l in (0..4).rev() {
            let block = &cache.blocks[l];
            let mut d_y = match &block.argmax {
                Some(idx) => unpool(d_x.view(), idx, block.relu_out.nrows()),
                None => d_x,
            };
            ndarray::Zip::from(&mut d_y)
                .and(&block.relu_out)
                .for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
            grads.conv_bias[l] += &d_y.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            let cols = im2col(block.input.view(), batch, block.side);
            grads.conv_weight[l] += &cols.t().dot(&d_y);
            if l == 0 {
                break;
            }
            let d_cols = d_y.dot(&self.conv_weight[l].t());
            d_x = col2im(d_cols.view(), batch, block.side, block.input.ncols());
        }
    }
}

impl Parameters for CnnParams {
    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::with_capacity(10);
        for l in 0..4 {
            out.push((format!("conv{}.weight", l + 1), &self.conv_weight[l]));
            out.push((format!("conv{}.bias", l + 1), &self.conv_bias[l]));
        }
        out.push(("fc.weight".into(), &self.fc_weight));
        out.push(("fc.bias".into(), &self.fc_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::with_capacity(10);
        for (w, b) in self.conv_weight.iter_mut().zip(self.conv_bias.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    side: usize,
    relu_out: Array2<f64>,
    argmax: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct CnnCache {
    batch: usize,
    blocks: Vec<BlockCache>,
    flat: Array2<f64>,
}

/// Forward pass over explicit patches; returns one row per patch.
pub fn cnn_forward(patches: &[Patch], params: &CnnParams) -> Result<Array2<f64>> {
    let n = params.config.patch_size;
    if let Some(p) = patches.iter().find(|p| p.size != n) {
        return Err(Error::InvalidPatchSize(p.size));
    }
    let data: Vec<f64> = patches.iter().flat_map(|p| p.data.iter().copied()).collect();
    let input = Array2::from_shape_vec((patches.len() * n * n, CHANNELS), data)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    params.infer(input.view(), patches.len())
}

fn im2col(x: ArrayView2<f64>, batch: usize, side: usize) -> Array2<f64> {
    let c = x.ncols();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = vec![0.0; batch * side * side * 9 * c];
    let row_len = 9 * c;
    for b in 0..batch {
        for y in 0..side {
            for xx in 0..side {
                let row = (b * side + y) * side + xx;
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= side as isize {
                            continue;
                        }
                        let from = ((b * side + sy as usize) * side + sx as usize) * c;
                        let to = (ky * 3 + kx) * c;
                        dst[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((batch * side * side, row_len), cols).expect("sized buffer")
}

fn col2im(cols: ArrayView2<f64>, batch: usize, side: usize, c: usize) -> Array2<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let row_len = 9 * c;
    let mut out = vec![0.0; batch * side * side * c];
    for b in 0..batch {
        for y in 0..side {
            for xx in 0..side {
                let row = (b * side + y) * side + xx;
                let from_row = &src[row * row_len..(row + 1) * row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= side as isize {
                            continue;
                        }
                        let to = ((b * side + sy as usize) * side + sx as usize) * c;
                        let from = (ky * 3 + kx) * c;
                        for (o, v) in out[to..to + c].iter_mut().zip(&from_row[from..from + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((batch * side * side, c), out).expect("sized buffer")
}

/// 2×2 stride-2 max-pool with floor; also returns the source row of every
/// output element (first maximum in scan order).
fn max_pool(x: ArrayView2<f64>, batch: usize, side: usize) -> (Array2<f64>, Vec<u32>) {
    let c = x.ncols();
    let half = side / 2;
    let mut out = Array2::<f64>::zeros((batch * half * half, c));
    let mut idx = vec![0u32; batch * half * half * c];
    for b in 0..batch {
        for oy in 0..half {
            for ox in 0..half {
                let orow = (b * half + oy) * half + ox;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_row = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let r = (b * side + 2 * oy + dy) * side + 2 * ox + dx;
                        let v = x[[r, ch]];
                        if v > best {
                            best = v;
                            best_row = r;
                        }
                    }
                    out[[orow, ch]] = best;
                    idx[orow * c + ch] = best_row as u32;
                }
            }
        }
    }
    (out, idx)
}

fn unpool(d: ArrayView2<f64>, idx: &[u32], rows: usize) -> Array2<f64> {
    let c = d.ncols();
    let mut out = Array2::<f64>::zeros((rows, c));
    for ((r, ch), &g) in d.indexed_iter() {
        out[[idx[r * c + ch] as usize, ch]] += g;
    }
    out
}
