//! End-to-end workflow: configuration, per-stage seeds, artifact files
//! and the manifest that records them.
//!
//! Every stage reads what earlier stages wrote to the output directory, so
//! the stages can be run one at a time or all in sequence.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{CnnConfig, CnnParams};
use crate::error::{Error, Result};
use crate::fusion::{predict_map, train_joint, Classifier, FusionConfig, HeadParams, TrainOutcome};
use crate::graph::{build_graph, SuperpixelGraph};
use crate::graphmae::{encode_and_broadcast, pretrain, GraphMaeConfig, GraphMaeParams, PixelFeatureMap, PretrainOutcome};
use crate::metrics::{evaluate, format_table, render_map, ClassMap, Metrics, PALETTE};
use crate::nn::checkpoint::Checkpoint;
use crate::polsar::{
    extract_features, load_coherency, load_ground_truth, make_split, pauli_rgb, save_ground_truth, synth_scene,
    FeatureImage, GroundTruth, LabelSplit, NormStats, SceneSpec, CHANNELS,
};
use crate::slic::{slic_segment, SlicParams, SuperpixelSegmentation};

/// Environment variable that overrides the configured output directory.
pub const ENV_OUT: &str = "DBGC_OUT";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SceneSpec),
    /// Nine channel files, `header.json` and `labels.bin`.
    Directory(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SceneSpec::five_class(128, 128))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpixelConfig {
    /// Defaults to one superpixel per 100 pixels.
    pub k_target: Option<usize>,
    pub compactness: f64,
    pub iterations: usize,
    /// Edge-weight bandwidth; defaults to the mean adjacent distance.
    pub sigma: Option<f64>,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        let p = SlicParams::new(1);
        Self {
            k_target: None,
            compactness: p.compactness,
            iterations: p.iterations,
            sigma: None,
        }
    }
}

impl SuperpixelConfig {
    pub fn k_target_for(&self, height: usize, width: usize) -> usize {
        self.k_target.unwrap_or((height * width / 100).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub per_class: usize,
    /// Overrides the seed derived from the root seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            per_class: 111,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub superpixel: SuperpixelConfig,
    pub graphmae: GraphMaeConfig,
    pub cnn: CnnConfig,
    pub fusion: FusionConfig,
    pub split: SplitConfig,
    pub seed: u64,
    pub output: PathBuf,
    /// Pixels per inference batch.
    pub predict_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            superpixel: SuperpixelConfig::default(),
            graphmae: GraphMaeConfig::default(),
            cnn: CnnConfig::default(),
            fusion: FusionConfig::default(),
            split: SplitConfig::default(),
            seed: 0,
            output: PathBuf::from("dbgc-out"),
            predict_batch: 256,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.graphmae.validate()?;
        self.cnn.validate()?;
        self.fusion.validate()?;
        if self.graphmae.in_dim != CHANNELS || self.cnn.in_channels != CHANNELS {
            return Err(Error::Config(format!("both branches must read {CHANNELS} channels")));
        }
        if self.cnn.out_dim != self.graphmae.embedding_dim() {
            return Err(Error::Config(format!(
                "pixel branch width {} differs from superpixel embedding width {}",
                self.cnn.out_dim,
                self.graphmae.embedding_dim()
            )));
        }
        if self.split.per_class == 0 || self.predict_batch == 0 {
            return Err(Error::Config("labels per class and predict batch must be positive".into()));
        }
        Ok(())
    }

    /// Output directory precedence: `explicit`, then [`ENV_OUT`], then the
    /// configured value.
    pub fn resolve_output(&mut self, explicit: Option<PathBuf>) {
        if let Some(dir) = explicit {
            self.output = dir;
        } else if let Some(dir) = std::env::var_os(ENV_OUT).filter(|v| !v.is_empty()) {
            self.output = PathBuf::from(dir);
        }
    }
}

/// Seeds for each stage, all drawn from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub pretrain: u64,
    pub train: u64,
}

impl StageSeeds {
    pub fn derive(root: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(root);
        Self {
            data: rng.next_u64(),
            split: rng.next_u64(),
            pretrain: rng.next_u64(),
            train: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    pub seeds: StageSeeds,
    pub config: PipelineConfig,
    /// File name to SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Segment,
    Pretrain,
    Train,
    Evaluate,
    RunAll,
}

/// Normalized features, labels, split and display composite.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub features: FeatureImage,
    pub ground_truth: GroundTruth,
    pub split: LabelSplit,
    pub pauli: RgbImage,
}

pub fn prepare_data(cfg: &PipelineConfig, seeds: &StageSeeds) -> Result<PreparedData> {
    let (coh, gt) = match &cfg.data {
        DataSource::Synthetic(spec) => synth_scene(spec, seeds.data)?,
        DataSource::Directory(dir) => (load_coherency(dir)?, load_ground_truth(dir)?),
    };
    if gt.height() != coh.height() || gt.width() != coh.width() {
        return Err(Error::ShapeMismatch("ground truth and image sizes differ".into()));
    }
    let split = make_split(&gt, cfg.split.per_class, cfg.split.seed.unwrap_or(seeds.split))?;
    Ok(PreparedData {
        features: extract_features(&coh).normalize(),
        ground_truth: gt,
        split,
        pauli: pauli_rgb(&coh),
    })
}

pub fn segment_data(
    cfg: &PipelineConfig,
    pauli: &RgbImage,
    features: &FeatureImage,
) -> Result<(SuperpixelSegmentation, SuperpixelGraph)> {
    let params = SlicParams {
        k_target: cfg.superpixel.k_target_for(features.height(), features.width()),
        compactness: cfg.superpixel.compactness,
        iterations: cfg.superpixel.iterations,
    };
    let seg = slic_segment(pauli, &params)?;
    let graph = build_graph(features, &seg, cfg.superpixel.sigma)?;
    Ok((seg, graph))
}

/// Fresh classifier initialized from `seed`; returns it with the shuffle
/// seed for training.
pub fn init_classifier(cfg: &PipelineConfig, classes: usize, seed: u64) -> Result<(Classifier, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cnn = CnnParams::init(&cfg.cnn, &mut rng)?;
    let head = HeadParams::init(&mut rng, cfg.cnn.out_dim, classes);
    Ok((Classifier { cnn, head }, rng.next_u64()))
}

pub fn train_classifier(
    cfg: &PipelineConfig,
    fs: &PixelFeatureMap,
    data: &PreparedData,
    seed: u64,
) -> Result<TrainOutcome> {
    let (classifier, shuffle) = init_classifier(cfg, data.ground_truth.num_classes(), seed)?;
    train_joint(fs, &data.features, &data.split.train, classifier, &cfg.fusion, shuffle)
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub alpha: f64,
    pub metrics: Metrics,
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub segments: usize,
    pub pretrain_losses: Vec<f64>,
    pub runs: Vec<AblationRun>,
}

/// Runs the whole pipeline in memory, sharing data, segmentation and
/// pretraining across one joint-training run per `alpha`.
pub fn run_experiment(cfg: &PipelineConfig, alphas: &[f64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds = StageSeeds::derive(cfg.seed);
    let data = prepare_data(cfg, &seeds)?;
    let (seg, graph) = segment_data(cfg, &data.pauli, &data.features)?;
    let PretrainOutcome { params, losses, .. } = pretrain(&graph, &cfg.graphmae, seeds.pretrain)?;
    let fs = encode_and_broadcast(&graph, &params, &seg)?;
    let mut runs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut run_cfg = cfg.clone();
        run_cfg.fusion.alpha = alpha;
        let out = train_classifier(&run_cfg, &fs, &data, seeds.train)?;
        let pred = predict_map(&fs, &data.features, &out.classifier, alpha, cfg.predict_batch)?;
        runs.push(AblationRun {
            alpha,
            metrics: evaluate(&pred, &data.ground_truth, &data.split.train)?,
            train_losses: out.losses,
        });
    }
    Ok(ExperimentReport {
        segments: seg.k(),
        pretrain_losses: losses,
        runs,
    })
}

/// Label used for a run in reports.
pub fn method_name(alpha: f64) -> &'static str {
    if alpha == 1.0 {
        "GNN"
    } else if alpha == 0.0 {
        "CNN"
    } else {
        "DB-GC"
    }
}

struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked { path }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    height: usize,
    width: usize,
    norm_stats: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    cnn: CnnConfig,
    classes: usize,
    alpha: f64,
}

struct Workspace<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    manifest: Manifest,
}

impl<'a> Workspace<'a> {
    fn open(cfg: &'a PipelineConfig, fresh: bool) -> Result<Self> {
        let dir = cfg.output.as_path();
        let path = dir.join(MANIFEST_FILE);
        let existing = if fresh || !path.is_file() {
            None
        } else {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Some(serde_json::from_str::<Manifest>(&text)?)
        };
        let manifest = match existing {
            Some(mut m) if m.root_seed == cfg.seed => {
                m.config = cfg.clone();
                m
            }
            _ => Manifest {
                root_seed: cfg.seed,
                seeds: StageSeeds::derive(cfg.seed),
                config: cfg.clone(),
                artifacts: BTreeMap::new(),
            },
        };
        Ok(Self { cfg, dir, manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.manifest
            .artifacts
            .insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn write_png(&mut self, name: &str, img: &RgbImage) -> Result<()> {
        img.save(self.path(name))?;
        self.record(name)
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.path(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let path = self.path(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn load_prepared(&self) -> Result<PreparedData> {
        let header: FeatureHeader = self.read_json("features.json")?;
        let path = self.path("features.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let features = FeatureImage::from_raw(header.height, header.width, values, header.norm_stats)?;
        let pauli = image::open(self.path("pauli.png"))?.to_rgb8();
        Ok(PreparedData {
            features,
            ground_truth: load_ground_truth(self.dir)?,
            split: self.read_json("split.json")?,
            pauli,
        })
    }

    fn load_segmentation(&self, data: &PreparedData) -> Result<(SuperpixelSegmentation, SuperpixelGraph)> {
        let seg = SuperpixelSegmentation::load(&self.path("segmentation.bin"), &self.path("segmentation.json"))?;
        let graph = build_graph(&data.features, &seg, self.cfg.superpixel.sigma)?;
        Ok((seg, graph))
    }

    fn load_graphmae(&self) -> Result<GraphMaeParams> {
        let ckpt = Checkpoint::load(&self.path("graphmae.ckpt"))?;
        let cfg: GraphMaeConfig = ckpt.config()?;
        let mut params = GraphMaeParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        ckpt.restore(&mut params)?;
        Ok(params)
    }

    fn superpixel_features(&self, data: &PreparedData) -> Result<PixelFeatureMap> {
        let (seg, graph) = self.load_segmentation(data)?;
        encode_and_broadcast(&graph, &self.load_graphmae()?, &seg)
    }

    fn prepare(&mut self) -> Result<()> {
        let data = prepare_data(self.cfg, &self.manifest.seeds)?;
        let f = &data.features;
        let bytes: Vec<u8> = f.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.write("features.bin", &bytes)?;
        let header = FeatureHeader {
            height: f.height(),
            width: f.width(),
            norm_stats: f.norm_stats().cloned(),
        };
        self.write("features.json", serde_json::to_string_pretty(&header)?.as_bytes())?;
        self.write_png("pauli.png", &data.pauli)?;
        self.write("split.json", serde_json::to_string_pretty(&data.split)?.as_bytes())?;
        save_ground_truth(self.dir, &data.ground_truth)?;
        self.record("labels.bin")?;
        self.record("header.json")?;
        log::info!(
            "prepared {}x{} image, {} training pixels",
            f.height(),
            f.width(),
            data.split.train.len()
        );
        Ok(())
    }

    fn segment(&mut self) -> Result<()> {
        let data = self.load_prepared()?;
        let (seg, graph) = segment_data(self.cfg, &data.pauli, &data.features)?;
        seg.save(&self.path("segmentation.bin"), &self.path("segmentation.json"))?;
        self.record("segmentation.bin")?;
        self.record("segmentation.json")?;
        self.write_png("segmentation_overlay.png", &seg.boundary_overlay(&data.pauli)?)?;
        graph.save_json(&self.path("graph.json"))?;
        self.record("graph.json")?;
        log::info!("{} superpixels, {} edges", seg.k(), graph.edges().len());
        Ok(())
    }

    fn pretrain(&mut self) -> Result<()> {
        let data = self.load_prepared()?;
        let (_, graph) = self.load_segmentation(&data)?;
        let out = pretrain(&graph, &self.cfg.graphmae, self.manifest.seeds.pretrain)?;
        let ckpt = Checkpoint::capture("graphmae", &self.cfg.graphmae, self.manifest.seeds.pretrain, &out.params)?;
        self.write("graphmae.ckpt", &ckpt.to_bytes()?)?;
        self.write("pretrain_loss.csv", loss_csv(&out.losses).as_bytes())?;
        if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
            log::info!("pretrain loss {first:.4} -> {last:.4}");
        }
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let data = self.load_prepared()?;
        let fs = self.superpixel_features(&data)?;
        let out = train_classifier(self.cfg, &fs, &data, self.manifest.seeds.train)?;
        let meta = ClassifierMeta {
            cnn: self.cfg.cnn.clone(),
            classes: data.ground_truth.num_classes(),
            alpha: self.cfg.fusion.alpha,
        };
        let ckpt = Checkpoint::capture("classifier", &meta, self.manifest.seeds.train, &out.classifier)?;
        self.write("classifier.ckpt", &ckpt.to_bytes()?)?;
        self.write("train_loss.csv", loss_csv(&out.losses).as_bytes())?;
        if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
            log::info!("train loss {first:.4} -> {last:.4}");
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let data = self.load_prepared()?;
        let fs = self.superpixel_features(&data)?;
        let ckpt = Checkpoint::load(&self.path("classifier.ckpt"))?;
        let meta: ClassifierMeta = ckpt.config()?;
        let mut cfg = self.cfg.clone();
        cfg.cnn = meta.cnn;
        let (mut classifier, _) = init_classifier(&cfg, meta.classes, 0)?;
        ckpt.restore(&mut classifier)?;
        let pred = predict_map(&fs, &data.features, &classifier, meta.alpha, self.cfg.predict_batch)?;
        let metrics = evaluate(&pred, &data.ground_truth, &data.split.train)?;
        write_prediction(self, &pred)?;
        self.write("metrics.json", metrics.to_json()?.as_bytes())?;
        let names = data.ground_truth.class_names().to_vec();
        let table = format_table(&names, &[(method_name(meta.alpha), &metrics)]);
        self.write("metrics.txt", table.as_bytes())?;
        log::info!("OA {:.4}, AA {:.4}", metrics.oa, metrics.aa);
        Ok(())
    }
}

fn write_prediction(ws: &mut Workspace<'_>, pred: &ClassMap) -> Result<()> {
    ws.write("prediction.bin", pred.labels())?;
    ws.write_png("prediction.png", &render_map(pred, &PALETTE)?)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Runs one stage (or all of them) against the configured output
/// directory, holding its lock for the duration.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.output)?;
    let fresh = matches!(stage, Stage::Prepare | Stage::RunAll);
    let mut ws = Workspace::open(cfg, fresh)?;
    let steps: &[Stage] = match stage {
        Stage::RunAll => &[
            Stage::Prepare,
            Stage::Segment,
            Stage::Pretrain,
            Stage::Train,
            Stage::Evaluate,
        ],
        _ => std::slice::from_ref(&stage),
    };
    for step in steps {
        match step {
            Stage::Prepare => ws.prepare()?,
            Stage::Segment => ws.segment()?,
            Stage::Pretrain => ws.pretrain()?,
            Stage::Train => ws.train()?,
            Stage::Evaluate => ws.evaluate()?,
            Stage::RunAll => unreachable!("expanded above"),
        }
        ws.save_manifest()?;
    }
    Ok(ws.manifest)
}
