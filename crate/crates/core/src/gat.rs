//! Multi-head graph attention layer over a CSR neighborhood that always
//! includes a self-loop.
//!
//! Per head `k`: `h_i = W_k x_i`, `e_ij = LeakyReLU(a_self·h_i + a_nbr·h_j)`,
//! `alpha_ij = softmax_j(e_ij)` over `N(i) ∪ {i}`, and the head output is
//! `sum_j alpha_ij h_j`. Heads are concatenated or averaged, then the
//! activation is applied.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::nn::{elu, elu_grad, glorot, leaky_relu, leaky_relu_grad, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Concat,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu(x),
            Activation::Identity => x,
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub heads: usize,
    pub head_dim: usize,
    pub mode: HeadMode,
    pub activation: Activation,
    /// `in_dim × (heads · head_dim)`; head `k` owns columns `k*head_dim..`.
    pub weight: Array2<f64>,
    /// `heads × head_dim`, applied to the attending node.
    pub attn_self: Array2<f64>,
    /// `heads × head_dim`, applied to the neighbor.
    pub attn_neighbor: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GatCache {
    input: Array2<f64>,
    projected: Array2<f64>,
    /// Raw scores before LeakyReLU, `n_slots × heads`.
    scores: Array2<f64>,
    /// Attention coefficients, `n_slots × heads`.
    alpha: Array2<f64>,
    pre_activation: Array2<f64>,
}

impl GatCache {
    pub fn alpha(&self) -> &Array2<f64> {
        &self.alpha
    }
}

impl GatLayer {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        mode: HeadMode,
        activation: Activation,
    ) -> Self {
        Self {
            heads,
            head_dim,
            mode,
            activation,
            weight: glorot(rng, in_dim, heads * head_dim, in_dim, head_dim),
            attn_self: glorot(rng, heads, head_dim, head_dim, 1),
            attn_neighbor: glorot(rng, heads, head_dim, head_dim, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        match self.mode {
            HeadMode::Concat => self.heads * self.head_dim,
            HeadMode::Average => self.head_dim,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, adj: &Adjacency) -> Result<(Array2<f64>, GatCache)> {
        self.ensure_finite()?;
        let n = adj.n_nodes();
        if x.nrows() != n || x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "GAT input {}x{} for {n} nodes of dim {}",
                x.nrows(),
                x.ncols(),
                self.in_dim()
            )));
        }
        let (heads, f) = (self.heads, self.head_dim);
        let projected = x.dot(&self.weight);
        let mut self_term = Array2::<f64>::zeros((n, heads));
        let mut nbr_term = Array2::<f64>::zeros((n, heads));
        for i in 0..n {
            for k in 0..heads {
                let h = projected.slice(s![i, k * f..(k + 1) * f]);
                self_term[[i, k]] = h.dot(&self.attn_self.row(k));
                nbr_term[[i, k]] = h.dot(&self.attn_neighbor.row(k));
            }
        }

        let slots = adj.n_slots();
        let mut scores = Array2::<f64>::zeros((slots, heads));
        let mut alpha = Array2::<f64>::zeros((slots, heads));
        let mut pre = Array2::<f64>::zeros((n, self.out_dim()));
        let head_scale = match self.mode {
            HeadMode::Concat => 1.0,
            HeadMode::Average => 1.0 / heads as f64,
        };
        for i in 0..n {
            let range = adj.slots(i);
            let nbrs = adj.neighbors(i);
            for k in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for (slot, &j) in range.clone().zip(nbrs) {
                    let s = self_term[[i, k]] + nbr_term[[j as usize, k]];
                    scores[[slot, k]] = s;
                    max = max.max(leaky_relu(s));
                }
                let mut total = 0.0;
                for slot in range.clone() {
                    let e = (leaky_relu(scores[[slot, k]]) - max).exp();
                    alpha[[slot, k]] = e;
                    total += e;
                }
                let cols = match self.mode {
                    HeadMode::Concat => k * f..(k + 1) * f,
                    HeadMode::Average => 0..f,
                };
                for (slot, &j) in range.clone().zip(nbrs) {
                    let a = alpha[[slot, k]] / total;
                    alpha[[slot, k]] = a;
                    let h = projected.slice(s![j as usize, k * f..(k + 1) * f]);
                    let mut out = pre.slice_mut(s![i, cols.clone()]);
                    out.scaled_add(a * head_scale, &h);
                }
            }
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalError("non-finite GAT output".into()));
        }
        let act = self.activation;
        let out = pre.mapv(|v| act.apply(v));
        Ok((
            out,
            GatCache {
                input: x.to_owned(),
                projected,
                scores,
                alpha,
                pre_activation: pre,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the layer input.
    pub fn backward(
        &self,
        cache: &GatCache,
        adj: &Adjacency,
        d_out: ArrayView2<f64>,
        grads: &mut GatLayer,
    ) -> Array2<f64> {
        let n = adj.n_nodes();
        let (heads, f) = (self.heads, self.head_dim);
        let act = self.activation;
        let mut d_pre = d_out.to_owned();
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.pre_activation)
            .for_each(|d, &p| *d *= act.grad(p));
        let head_scale = match self.mode {
            HeadMode::Concat => 1.0,
            HeadMode::Average => 1.0 / heads as f64,
        };

        let mut d_proj = Array2::<f64>::zeros(cache.projected.raw_dim());
        let mut d_self = Array2::<f64>::zeros((n, heads));
        let mut d_nbr = Array2::<f64>::zeros((n, heads));
        let mut d_alpha = Vec::new();
        for i in 0..n {
            let range = adj.slots(i);
            let nbrs = adj.neighbors(i);
            for k in 0..heads {
                let cols = match self.mode {
                    HeadMode::Concat => k * f..(k + 1) * f,
                    HeadMode::Average => 0..f,
                };
                let g = d_pre.slice(s![i, cols]).mapv(|v| v * head_scale);
                d_alpha.clear();
                let mut weighted = 0.0;
                for (slot, &j) in range.clone().zip(nbrs) {
                    let h = cache.projected.slice(s![j as usize, k * f..(k + 1) * f]);
                    let da = g.dot(&h);
                    weighted += cache.alpha[[slot, k]] * da;
                    d_alpha.push(da);
                    let a = cache.alpha[[slot, k]];
                    d_proj
                        .slice_mut(s![j as usize, k * f..(k + 1) * f])
                        .scaled_add(a, &g);
                }
                for ((slot, &j), da) in range.clone().zip(nbrs).zip(&d_alpha) {
                    let de = cache.alpha[[slot, k]] * (da - weighted);
                    let ds = de * leaky_relu_grad(cache.scores[[slot, k]]);
                    d_self[[i, k]] += ds;
                    d_nbr[[j as usize, k]] += ds;
                }
            }
        }
        for i in 0..n {
            for k in 0..heads {
                let h = cache.projected.slice(s![i, k * f..(k + 1) * f]).to_owned();
                grads.attn_self.row_mut(k).scaled_add(d_self[[i, k]], &h);
                grads.attn_neighbor.row_mut(k).scaled_add(d_nbr[[i, k]], &h);
                let mut dh = d_proj.slice_mut(s![i, k * f..(k + 1) * f]);
                dh.scaled_add(d_self[[i, k]], &self.attn_self.row(k));
                dh.scaled_add(d_nbr[[i, k]], &self.attn_neighbor.row(k));
            }
        }
        grads.weight += &cache.input.t().dot(&d_proj);
        d_proj.dot(&self.weight.t())
    }
}

impl Parameters for GatLayer {
    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("weight".into(), &self.weight),
            ("attn_self".into(), &self.attn_self),
            ("attn_neighbor".into(), &self.attn_neighbor),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.attn_self, &mut self.attn_neighbor]
    }
}

/// Dense reference implementation: materializes the full `n × n` attention
/// matrix per head with non-edges masked out. Test oracle only.
#[doc(hidden)]
pub fn dense_gat_oracle(layer: &GatLayer, x: &Array2<f64>, edges: &[(u32, u32)]) -> Array2<f64> {
    let n = x.nrows();
    let mut connected = vec![vec![false; n]; n];
    for (i, row) in connected.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        connected[a as usize][b as usize] = true;
        connected[b as usize][a as usize] = true;
    }
    let f = layer.head_dim;
    let mut heads_out = Vec::new();
    for k in 0..layer.heads {
        let w = layer.weight.slice(s![.., k * f..(k + 1) * f]);
        let h = x.dot(&w);
        let mut att = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let mut row = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if connected[i][j] {
                    let mut s = 0.0;
                    for d in 0..f {
                        s += layer.attn_self[[k, d]] * h[[i, d]] + layer.attn_neighbor[[k, d]] * h[[j, d]];
                    }
                    row[j] = if s > 0.0 { s } else { 0.2 * s };
                }
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..n {
                att[[i, j]] = (row[j] - m).exp() / z;
            }
        }
        heads_out.push(att.dot(&h));
    }
    let pre = match layer.mode {
        HeadMode::Concat => ndarray::concatenate(
            ndarray::Axis(1),
            &heads_out.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .expect("equal rows"),
        HeadMode::Average => {
            let mut acc = Array2::<f64>::zeros((n, f));
            for a in &heads_out {
                acc += a;
            }
            acc / layer.heads as f64
        }
    };
    pre.mapv(|v| match layer.activation {
        Activation::Elu => {
            if v > 0.0 {
                v
            } else {
                v.exp() - 1.0
            }
        }
        Activation::Identity => v,
    })
}
