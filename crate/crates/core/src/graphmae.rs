//! Graph masked autoencoder over the superpixel graph.
//!
//! A random subset of nodes has its input features replaced by a learnable
//! token, a stack of GAT layers encodes the graph, the same nodes are
//! re-masked with a second token in embedding space, and a single GAT layer
//! decodes back to feature space. The loss is the scaled cosine error on the
//! masked nodes only. After pretraining the encoder, run without masking,
//! gives one embedding per superpixel which is broadcast to its pixels.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{Activation, GatCache, GatLayer, HeadMode};
use crate::graph::{Adjacency, SuperpixelGraph};
use crate::nn::{Adam, Parameters};
use crate::polsar::CHANNELS;
use crate::slic::SuperpixelSegmentation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphMaeConfig {
    pub in_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub encoder_layers: usize,
    pub mask_ratio: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for GraphMaeConfig {
    fn default() -> Self {
        Self {
            in_dim: CHANNELS,
            heads: 4,
            head_dim: 16,
            encoder_layers: 4,
            mask_ratio: 0.5,
            gamma: 3.0,
            epochs: 400,
            lr: 1e-3,
        }
    }
}

impl GraphMaeConfig {
    /// Embedding width `heads × head_dim`.
    pub fn embedding_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.encoder_layers == 0 {
            return Err(Error::Config("graphmae dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::Config(format!("gamma {} must be at least 1", self.gamma)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("graphmae lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMaeParams {
    /// `1 × in_dim` token replacing masked input rows.
    pub enc_mask_token: Array2<f64>,
    /// `1 × D` token replacing masked embedding rows before decoding.
    pub dec_mask_token: Array2<f64>,
    pub encoder: Vec<GatLayer>,
    pub decoder: GatLayer,
}

impl GraphMaeParams {
    pub fn init(cfg: &GraphMaeConfig, rng: &mut impl rand::Rng) -> Self {
        let d = cfg.embedding_dim();
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let in_dim = if l == 0 { cfg.in_dim } else { d };
                let act = if l + 1 == cfg.encoder_layers {
                    Activation::Identity
                } else {
                    Activation::Elu
                };
                GatLayer::new(rng, in_dim, cfg.heads, cfg.head_dim, HeadMode::Concat, act)
            })
            .collect();
        let decoder = GatLayer::new(rng, d, cfg.heads, cfg.in_dim, HeadMode::Average, Activation::Identity);
        Self {
            enc_mask_token: Array2::zeros((1, cfg.in_dim)),
            dec_mask_token: Array2::zeros((1, d)),
            encoder,
            decoder,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.dec_mask_token.ncols()
    }
}

impl Parameters for GraphMaeParams {
    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("enc_mask_token".to_string(), &self.enc_mask_token),
            ("dec_mask_token".to_string(), &self.dec_mask_token),
        ];
        for (l, layer) in self.encoder.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("encoder.{l}.{n}"), t)));
        }
        out.extend(self.decoder.named().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.enc_mask_token, &mut self.dec_mask_token];
        for layer in &mut self.encoder {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.decoder.tensors_mut());
        out
    }
}

/// Number of masked nodes for `k` nodes: `floor(ratio·k + 0.5)`.
pub fn mask_count(k: usize, ratio: f64) -> usize {
    ((ratio * k as f64 + 0.5).floor() as usize).min(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGraph {
    /// Masked node ids, ascending.
    pub mask_set: Vec<usize>,
    pub masked_features: Array2<f64>,
}

fn sample_mask(k: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = rand::seq::index::sample(&mut rng, k, mask_count(k, ratio)).into_vec();
    set.sort_unstable();
    set
}

fn apply_mask(x: ArrayView2<f64>, mask_set: &[usize], token: ArrayView1<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for &i in mask_set {
        out.row_mut(i).assign(&token);
    }
    out
}

/// Replaces the features of `round(ratio·K)` uniformly sampled nodes with
/// `token`.
pub fn mask_nodes(g: &SuperpixelGraph, ratio: f64, token: ArrayView1<f64>, seed: u64) -> Result<MaskedGraph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if token.len() != g.node_features().ncols() {
        return Err(Error::ShapeMismatch(format!(
            "mask token of length {} for {}-dim features",
            token.len(),
            g.node_features().ncols()
        )));
    }
    let mask_set = sample_mask(g.n_nodes(), ratio, seed);
    let masked_features = apply_mask(g.node_features().view(), &mask_set, token);
    Ok(MaskedGraph {
        mask_set,
        masked_features,
    })
}

/// Scaled cosine error: mean over rows of `(1 - cos(x_i, z_i))^gamma`.
pub fn sce_loss(x: ArrayView2<f64>, z: ArrayView2<f64>, gamma: f64) -> Result<f64> {
    sce_loss_grad(x, z, gamma).map(|(l, _)| l)
}

const NORM_FLOOR: f64 = 1e-12;

/// Loss and its gradient with respect to `z`.
pub fn sce_loss_grad(x: ArrayView2<f64>, z: ArrayView2<f64>, gamma: f64) -> Result<(f64, Array2<f64>)> {
    if x.nrows() == 0 {
        return Err(Error::EmptyMask);
    }
    if x.dim() != z.dim() {
        return Err(Error::ShapeMismatch(format!("targets {:?} vs reconstructions {:?}", x.dim(), z.dim())));
    }
    let m = x.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(z.raw_dim());
    for ((xi, zi), mut gi) in x.rows().into_iter().zip(z.rows()).zip(grad.rows_mut()) {
        let nx = xi.dot(&xi).sqrt().max(NORM_FLOOR);
        let nz = zi.dot(&zi).sqrt().max(NORM_FLOOR);
        let cos = xi.dot(&zi) / (nx * nz);
        let err = (1.0 - cos).clamp(0.0, 2.0);
        loss += err.powf(gamma);
        let coef = -gamma * err.powf(gamma - 1.0) / m;
        // d cos / d z = x / (|x||z|) - cos z / |z|^2
        gi.scaled_add(coef / (nx * nz), &xi);
        gi.scaled_add(-coef * cos / (nz * nz), &zi);
    }
    let loss = loss / m;
    if !loss.is_finite() {
        return Err(Error::NumericalError("non-finite SCE loss".into()));
    }
    Ok((loss, grad))
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(0), idx)
}

/// Runs the encoder on `x`.
pub fn encode(params: &GraphMaeParams, x: ArrayView2<f64>, adj: &Adjacency) -> Result<Array2<f64>> {
    let mut h = x.to_owned();
    for layer in &params.encoder {
        h = layer.forward(h.view(), adj)?.0;
    }
    Ok(h)
}

/// Mask, encode, re-mask, decode; returns the reconstruction for every
/// node.
fn reconstruct(
    params: &GraphMaeParams,
    x: ArrayView2<f64>,
    adj: &Adjacency,
    mask_set: &[usize],
) -> Result<(Array2<f64>, Vec<GatCache>, GatCache)> {
    let mut h = apply_mask(x, mask_set, params.enc_mask_token.row(0));
    let mut caches = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (out, cache) = layer.forward(h.view(), adj)?;
        caches.push(cache);
        h = out;
    }
    let remasked = apply_mask(h.view(), mask_set, params.dec_mask_token.row(0));
    let (z, dec_cache) = params.decoder.forward(remasked.view(), adj)?;
    Ok((z, caches, dec_cache))
}

/// Reconstruction loss of a fresh mask drawn from `seed`.
pub fn forward_reconstruct(
    g: &SuperpixelGraph,
    params: &GraphMaeParams,
    ratio: f64,
    gamma: f64,
    seed: u64,
) -> Result<(f64, Vec<usize>)> {
    let mask_set = sample_mask(g.n_nodes(), ratio, seed);
    let loss = masked_loss_with(g, params, &mask_set, gamma, |h, adj| {
        Ok(params.decoder.forward(h, adj)?.0)
    })?;
    Ok((loss, mask_set))
}

/// Mask, encode, re-mask, then hand the re-masked embeddings to `decode`
/// and score its output on the masked nodes.
fn masked_loss_with(
    g: &SuperpixelGraph,
    params: &GraphMaeParams,
    mask_set: &[usize],
    gamma: f64,
    decode: impl FnOnce(ArrayView2<f64>, &Adjacency) -> Result<Array2<f64>>,
) -> Result<f64> {
    if mask_set.is_empty() {
        return Err(Error::EmptyMask);
    }
    let x = g.node_features();
    let adj = g.adjacency();
    let masked = apply_mask(x.view(), mask_set, params.enc_mask_token.row(0));
    let h = encode(params, masked.view(), &adj)?;
    let remasked = apply_mask(h.view(), mask_set, params.dec_mask_token.row(0));
    let z = decode(remasked.view(), &adj)?;
    sce_loss(rows(x, mask_set).view(), rows(&z, mask_set).view(), gamma)
}

/// Loss for a fixed mask set, plus gradients for every parameter.
pub fn loss_and_grad(
    params: &GraphMaeParams,
    x: ArrayView2<f64>,
    adj: &Adjacency,
    mask_set: &[usize],
    gamma: f64,
) -> Result<(f64, GraphMaeParams)> {
    if mask_set.is_empty() {
        return Err(Error::EmptyMask);
    }
    let x_owned = x.to_owned();
    let (z, caches, dec_cache) = reconstruct(params, x, adj, mask_set)?;
    let (loss, dz_masked) = sce_loss_grad(rows(&x_owned, mask_set).view(), rows(&z, mask_set).view(), gamma)?;
    let mut grads = params.zeroed();
    let mut dz = Array2::<f64>::zeros(z.raw_dim());
    for (r, &i) in mask_set.iter().enumerate() {
        dz.row_mut(i).assign(&dz_masked.row(r));
    }
    let mut d_h = params.decoder.backward(&dec_cache, adj, dz.view(), &mut grads.decoder);
    for &i in mask_set {
        let row: Array1<f64> = d_h.row(i).to_owned();
        grads.dec_mask_token.row_mut(0).scaled_add(1.0, &row);
        d_h.row_mut(i).fill(0.0);
    }
    for (l, layer) in params.encoder.iter().enumerate().rev() {
        d_h = layer.backward(&caches[l], adj, d_h.view(), &mut grads.encoder[l]);
    }
    for &i in mask_set {
        let row: Array1<f64> = d_h.row(i).to_owned();
        grads.enc_mask_token.row_mut(0).scaled_add(1.0, &row);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub initial: GraphMaeParams,
    pub params: GraphMaeParams,
    pub losses: Vec<f64>,
}

/// Full-graph Adam pretraining with a fresh mask every epoch. The seed
/// drives both initialization and the mask sequence.
pub fn pretrain(g: &SuperpixelGraph, cfg: &GraphMaeConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if g.node_features().ncols() != cfg.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "graph features have {} dims, config expects {}",
            g.node_features().ncols(),
            cfg.in_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = GraphMaeParams::init(cfg, &mut rng);
    let mut params = initial.clone();
    let adj = g.adjacency();
    let x = g.node_features().view();
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mask_set = sample_mask(g.n_nodes(), cfg.mask_ratio, rng.next_u64());
        let (loss, grads) = match loss_and_grad(&params, x, &adj, &mask_set, cfg.gamma) {
            Ok(v) => v,
            Err(Error::NumericalError(_)) => return Err(Error::TrainingDiverged { epoch }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        opt.step(&mut params, &grads);
        losses.push(loss);
        log::debug!("pretrain epoch {epoch}: loss {loss:.6}");
    }
    if params.ensure_finite().is_err() {
        return Err(Error::TrainingDiverged { epoch: cfg.epochs });
    }
    Ok(PretrainOutcome {
        initial,
        params,
        losses,
    })
}

/// Superpixel embeddings viewed per pixel: every pixel reads the embedding
/// of its segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    embeddings: Array2<f64>,
}

impl PixelFeatureMap {
    pub fn new(seg: &SuperpixelSegmentation, embeddings: Array2<f64>) -> Result<Self> {
        if embeddings.nrows() != seg.k() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings for {} segments",
                embeddings.nrows(),
                seg.k()
            )));
        }
        Ok(Self {
            height: seg.height(),
            width: seg.width(),
            labels: seg.labels().to_vec(),
            embeddings,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(self.labels[row * self.width + col] as usize)
    }

    pub fn node_embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Materializes the `(H·W) × D` per-pixel table.
    pub fn to_dense(&self) -> Array2<f64> {
        self.embeddings.select(
            ndarray::Axis(0),
            &self.labels.iter().map(|&l| l as usize).collect::<Vec<_>>(),
        )
    }
}

/// Encodes the unmasked graph and broadcasts node embeddings to pixels.
pub fn encode_and_broadcast(
    g: &SuperpixelGraph,
    params: &GraphMaeParams,
    seg: &SuperpixelSegmentation,
) -> Result<PixelFeatureMap> {
    if g.n_nodes() != seg.k() {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, segmentation {} segments",
            g.n_nodes(),
            seg.k()
        )));
    }
    let e = encode(params, g.node_features().view(), &g.adjacency())?;
    PixelFeatureMap::new(seg, e)
}
