//! Minimal dense-layer toolkit shared by the graph and pixel branches:
//! named parameter tables, initialization, Adam and the checkpoint
//! container. Layers implement their own backward passes.

pub mod checkpoint;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// A model whose parameters are a fixed, ordered list of named 2-D tables.
/// Gradients are carried in a value of the same type.
pub trait Parameters {
    /// Names and tables, in a stable order.
    fn named(&self) -> Vec<(String, &Array2<f64>)>;

    /// Tables in the same order as [`named`](Self::named).
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;

    /// A copy with every entry set to zero, used as a gradient buffer.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    fn ensure_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalError(format!("non-finite parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Uniform Glorot initialization.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit))
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.named();
        let tensors = params.tensors_mut();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, (_, g)), m), v) in tensors
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
    }
}
