//! Weighted fusion of the two branches, the softmax head, and joint
//! supervised training of the pixel branch and head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::CnnParams;
use crate::error::{Error, Result};
use crate::graphmae::PixelFeatureMap;
use crate::metrics::ClassMap;
use crate::nn::{glorot, Adam, Parameters};
use crate::polsar::{FeatureImage, LabeledPixel};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            epochs: 250,
            lr: 5e-4,
            batch_size: 64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("fusion batch size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `D × C`.
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl HeadParams {
    pub fn init<R: rand::Rng>(rng: &mut R, dim: usize, classes: usize) -> Self {
        Self {
            weight: glorot(rng, dim, classes, dim, classes),
            bias: Array2::zeros((1, classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, f: ArrayView2<f64>) -> Array2<f64> {
        f.dot(&self.weight) + &self.bias
    }
}

impl Parameters for HeadParams {
    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `alpha·fs + (1 − alpha)·fp`.
pub fn fuse(fs: ArrayView1<f64>, fp: ArrayView1<f64>, alpha: f64) -> Result<Array1<f64>> {
    if fs.len() != fp.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot fuse {}-dim and {}-dim features",
            fs.len(),
            fp.len()
        )));
    }
    Ok(&fs * alpha + &fp * (1.0 - alpha))
}

fn fuse_rows(fs: ArrayView2<f64>, fp: Option<ArrayView2<f64>>, alpha: f64) -> Array2<f64> {
    match fp {
        Some(fp) if alpha < 1.0 => &fs * alpha + &fp * (1.0 - alpha),
        _ => fs.to_owned(),
    }
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let p = softmax(row.view());
        row.assign(&p);
    }
    logits
}

pub fn classify(f: ArrayView1<f64>, head: &HeadParams) -> Array1<f64> {
    softmax((f.dot(&head.weight) + head.bias.row(0)).view())
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// `−log p[class]` with `p` clamped below at 1e-12. `class` is 0-based.
pub fn cross_entropy(probs: ArrayView1<f64>, class: usize) -> f64 {
    -probs[class].max(PROB_FLOOR).ln()
}

/// Gradient of the cross-entropy with respect to the logits.
pub fn cross_entropy_grad(probs: ArrayView1<f64>, class: usize) -> Array1<f64> {
    let mut g = probs.to_owned();
    g[class] -= 1.0;
    g
}

/// Pixel branch plus softmax head, the trainable part of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub cnn: CnnParams,
    pub head: HeadParams,
}

impl Parameters for Classifier {
    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<_> = self.cnn.named().into_iter().map(|(n, t)| (format!("cnn.{n}"), t)).collect();
        out.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.cnn.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

impl Classifier {
    fn check_dims(&self, fs: &PixelFeatureMap, features: &FeatureImage) -> Result<()> {
        if fs.dim() != self.cnn.config.out_dim || fs.dim() != self.head.weight.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "superpixel features are {}-dim, pixel branch {} and head {}",
                fs.dim(),
                self.cnn.config.out_dim,
                self.head.weight.nrows()
            )));
        }
        if fs.height() != features.height() || fs.width() != features.width() {
            return Err(Error::ShapeMismatch("feature maps cover different images".into()));
        }
        Ok(())
    }

    fn fused_batch(
        &self,
        fs: &PixelFeatureMap,
        features: &FeatureImage,
        centers: &[(usize, usize)],
        alpha: f64,
    ) -> Result<Array2<f64>> {
        let f_s = gather_fs(fs, centers);
        let f_p = if alpha < 1.0 {
            let input = self.cnn.gather_input(features, centers);
            Some(self.cnn.infer(input.view(), centers.len())?)
        } else {
            None
        };
        Ok(fuse_rows(f_s.view(), f_p.as_ref().map(|a| a.view()), alpha))
    }

    /// Mean cross-entropy over `pixels` and its gradient.
    pub fn loss_and_grad(
        &self,
        fs: &PixelFeatureMap,
        features: &FeatureImage,
        pixels: &[LabeledPixel],
        alpha: f64,
    ) -> Result<(f64, Classifier)> {
        let mut grads = self.zeroed();
        let loss = self.accumulate(fs, features, pixels, alpha, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate(
        &self,
        fs: &PixelFeatureMap,
        features: &FeatureImage,
        pixels: &[LabeledPixel],
        alpha: f64,
        grads: &mut Classifier,
    ) -> Result<f64> {
        let b = pixels.len();
        let c = self.head.num_classes();
        let centers: Vec<(usize, usize)> = pixels.iter().map(|p| (p.row, p.col)).collect();
        let mut classes = Vec::with_capacity(b);
        for p in pixels {
            if p.class == 0 || p.class as usize > c {
                return Err(Error::LabelOutOfRange { label: p.class, classes: c });
            }
            classes.push(p.class as usize - 1);
        }
        let f_s = gather_fs(fs, &centers);
        let branch = if alpha < 1.0 {
            let input = self.cnn.gather_input(features, &centers);
            Some(self.cnn.forward(input.view(), b)?)
        } else {
            None
        };
        let f = fuse_rows(f_s.view(), branch.as_ref().map(|(out, _)| out.view()), alpha);
        let probs = softmax_rows(self.head.logits(f.view()));
        let mut loss = 0.0;
        let mut d_logits = Array2::<f64>::zeros((b, c));
        for (i, &k) in classes.iter().enumerate() {
            loss += cross_entropy(probs.row(i), k);
            d_logits.row_mut(i).assign(&(cross_entropy_grad(probs.row(i), k) / b as f64));
        }
        grads.head.weight += &f.t().dot(&d_logits);
        grads.head.bias += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
        if let Some((_, cache)) = &branch {
            let d_fp = d_logits.dot(&self.head.weight.t()) * (1.0 - alpha);
            self.cnn.backward(cache, d_fp.view(), &mut grads.cnn);
        }
        Ok(loss / b as f64)
    }
}

fn gather_fs(fs: &PixelFeatureMap, centers: &[(usize, usize)]) -> Array2<f64> {
    let mut out = Array2::zeros((centers.len(), fs.dim()));
    for (mut row, &(r, c)) in out.rows_mut().into_iter().zip(centers) {
        row.assign(&fs.get(r, c));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    /// Sample-weighted mean loss of each epoch.
    pub losses: Vec<f64>,
}

/// Mini-batch Adam over the training pixels; the superpixel features stay
/// fixed. The seed fixes the shuffle order of every epoch.
pub fn train_joint(
    fs: &PixelFeatureMap,
    features: &FeatureImage,
    train: &[LabeledPixel],
    mut classifier: Classifier,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    classifier.check_dims(fs, features)?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("no training pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut grads = classifier.zeroed();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledPixel> = chunk.iter().map(|&i| train[i]).collect();
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let loss = match classifier.accumulate(fs, features, &batch, cfg.alpha, &mut grads) {
                Ok(l) => l,
                Err(Error::NumericalError(_)) => return Err(Error::TrainingDiverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut classifier, &grads);
        }
        let mean = total / train.len() as f64;
        log::debug!("train epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(TrainOutcome { classifier, losses })
}

/// Classifies every pixel, `batch` pixels at a time. Class ids are 1-based.
pub fn predict_map(
    fs: &PixelFeatureMap,
    features: &FeatureImage,
    classifier: &Classifier,
    alpha: f64,
    batch: usize,
) -> Result<ClassMap> {
    classifier.check_dims(fs, features)?;
    let (h, w) = (features.height(), features.width());
    let centers: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let mut labels = Vec::with_capacity(h * w);
    for chunk in centers.chunks(batch.max(1)) {
        let f = classifier.fused_batch(fs, features, chunk, alpha)?;
        let logits = classifier.head.logits(f.view());
        labels.extend(logits.rows().into_iter().map(|row| argmax(row) as u8 + 1));
    }
    ClassMap::new(h, w, labels)
}
