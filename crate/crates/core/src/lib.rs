//! Dual-branch PolSAR land-cover classification with very few labels.
//!
//! The superpixel branch learns node embeddings with a graph masked
//! autoencoder over a SLIC superpixel graph, without labels. The pixel
//! branch is a small patch CNN trained on the labeled pixels. The two
//! feature maps are blended with a fixed weight and classified by a
//! fully-connected softmax layer.

pub mod error;
pub mod fusion;
pub mod cnn;
pub mod gat;
pub mod graph;
pub mod graphmae;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod polsar;
pub mod slic;

pub use cnn::{CnnConfig, CnnParams, Patch};
pub use error::{Error, Result};
pub use fusion::{Classifier, FusionConfig, HeadParams};
pub use graph::SuperpixelGraph;
pub use graphmae::{GraphMaeConfig, GraphMaeParams, PixelFeatureMap};
pub use metrics::{ClassMap, Metrics};
pub use pipeline::{PipelineConfig, Stage};
pub use polsar::{CoherencyImage, FeatureImage, GroundTruth, LabelSplit, LabeledPixel, SceneSpec};
pub use slic::{SlicParams, SuperpixelSegmentation};
