//! PolSAR data model: coherency images, the 9-channel real feature vector,
//! Pauli RGB rendering, ground truth, label splits and a multi-look Wishart
//! scene generator for running the pipeline without real data.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of real channels per pixel.
pub const CHANNELS: usize = 9;

/// Channel names, in feature order.
pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "T11", "T22", "T33", "T12_real", "T12_imag", "T13_real", "T13_imag", "T23_real", "T23_imag",
];

pub const HEADER_FILE: &str = "header.json";
pub const LABELS_FILE: &str = "labels.bin";

/// 3x3 complex matrix, row-major.
pub type Mat3 = [[Complex64; 3]; 3];

/// Builds the Hermitian matrix whose upper triangle is given by the nine
/// feature channels; the lower triangle is filled by conjugation.
pub fn hermitian_from_channels(ch: &[f64; CHANNELS]) -> Mat3 {
    let t12 = Complex64::new(ch[3], ch[4]);
    let t13 = Complex64::new(ch[5], ch[6]);
    let t23 = Complex64::new(ch[7], ch[8]);
    [
        [Complex64::new(ch[0], 0.0), t12, t13],
        [t12.conj(), Complex64::new(ch[1], 0.0), t23],
        [t13.conj(), t23.conj(), Complex64::new(ch[2], 0.0)],
    ]
}

/// Reads the nine feature channels from the upper triangle of `t`.
pub fn channels_from_hermitian(t: &Mat3) -> [f64; CHANNELS] {
    [
        t[0][0].re,
        t[1][1].re,
        t[2][2].re,
        t[0][1].re,
        t[0][1].im,
        t[0][2].re,
        t[0][2].im,
        t[1][2].re,
        t[1][2].im,
    ]
}

fn check_coherency(t: &Mat3) -> std::result::Result<(), String> {
    let scale = t
        .iter()
        .flatten()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for i in 0..3 {
        for j in 0..3 {
            let z = t[i][j];
            if !(z.re.is_finite() && z.im.is_finite()) {
                return Err(format!("non-finite entry T{}{}", i + 1, j + 1));
            }
            if (z - t[j][i].conj()).norm() > 1e-9 * scale {
                return Err(format!("T{}{} is not Hermitian", i + 1, j + 1));
            }
        }
        if t[i][i].re < 0.0 {
            return Err(format!("negative diagonal T{}{}", i + 1, i + 1));
        }
    }
    Ok(())
}

/// Per-pixel 3x3 Hermitian coherency matrices, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherencyImage {
    height: usize,
    width: usize,
    data: Vec<Mat3>,
}

impl CoherencyImage {
    pub fn new(height: usize, width: usize, data: Vec<Mat3>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} matrices for a {height}x{width} image",
                data.len()
            )));
        }
        for (idx, t) in data.iter().enumerate() {
            check_coherency(t).map_err(|msg| {
                Error::CorruptData(format!("pixel ({}, {}): {msg}", idx / width, idx % width))
            })?;
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Same matrix at every pixel.
    pub fn constant(height: usize, width: usize, t: Mat3) -> Result<Self> {
        Self::new(height, width, vec![t; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> &Mat3 {
        &self.data[row * self.width + col]
    }

    pub fn pixels(&self) -> &[Mat3] {
        &self.data
    }
}

/// Per-channel statistics used by [`FeatureImage::normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

/// Nine real channels per pixel in the order of [`CHANNEL_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
    norm_stats: Option<NormStats>,
}

impl FeatureImage {
    pub fn from_raw(
        height: usize,
        width: usize,
        data: Vec<f64>,
        norm_stats: Option<NormStats>,
    ) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{CHANNELS} feature image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptData(format!(
                "non-finite feature at pixel {}",
                bad / CHANNELS
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            norm_stats,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.norm_stats.is_some()
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * CHANNELS;
        &self.data[start..start + CHANNELS]
    }

    /// Pixel-major values, `CHANNELS` per pixel.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Per-channel z-score over all pixels. Constant channels map to zero.
    /// An already normalized image is returned unchanged.
    pub fn normalize(&self) -> FeatureImage {
        if self.is_normalized() {
            return self.clone();
        }
        let n = (self.height * self.width) as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for ch in 0..CHANNELS {
            let values = self.data.iter().skip(ch).step_by(CHANNELS);
            let (lo, hi) = values
                .clone()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let m = values.clone().sum::<f64>() / n;
            mean[ch] = m;
            if lo < hi {
                std[ch] = (values.map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            }
        }
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|px| {
                (0..CHANNELS).map(move |ch| {
                    if std[ch] > 0.0 {
                        (px[ch] - mean[ch]) / std[ch]
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        FeatureImage {
            height: self.height,
            width: self.width,
            data,
            norm_stats: Some(NormStats { mean, std }),
        }
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self) -> FeatureImage {
        let Some(stats) = &self.norm_stats else {
            return self.clone();
        };
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|px| (0..CHANNELS).map(move |ch| stats.mean[ch] + stats.std[ch] * px[ch]))
            .collect();
        FeatureImage {
            height: self.height,
            width: self.width,
            data,
            norm_stats: None,
        }
    }

    /// Rebuilds the coherency matrices from the (denormalized) channels.
    pub fn to_coherency(&self) -> Result<CoherencyImage> {
        let raw = self.denormalize();
        let data = raw
            .data
            .chunks_exact(CHANNELS)
            .map(|px| hermitian_from_channels(px.try_into().expect("chunk of CHANNELS")))
            .collect();
        CoherencyImage::new(self.height, self.width, data)
    }
}

/// Splits each coherency matrix into the nine real feature channels.
pub fn extract_features(coh: &CoherencyImage) -> FeatureImage {
    let data = coh
        .pixels()
        .iter()
        .flat_map(channels_from_hermitian)
        .collect();
    FeatureImage {
        height: coh.height,
        width: coh.width,
        data,
        norm_stats: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

pub fn read_header(dir: &Path) -> Result<ImageHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_header(dir: &Path, header: &ImageHeader) -> Result<()> {
    let path = dir.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(header)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_f32_channel(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingChannel {
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{} is {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptData(format!(
            "non-finite value in {}",
            path.display()
        )));
    }
    Ok(values)
}

/// Loads a coherency image from a directory holding `header.json` and the
/// nine `f32` channel files named after [`CHANNEL_NAMES`].
pub fn load_coherency(dir: &Path) -> Result<CoherencyImage> {
    check_channel_files(dir)?;
    let header = read_header(dir)?;
    load_coherency_with_header(dir, &header)
}

fn check_channel_files(dir: &Path) -> Result<()> {
    match CHANNEL_NAMES
        .iter()
        .map(|name| dir.join(format!("{name}.bin")))
        .find(|p| !p.is_file())
    {
        Some(path) => Err(Error::MissingChannel { path }),
        None => Ok(()),
    }
}

pub fn load_coherency_with_header(dir: &Path, header: &ImageHeader) -> Result<CoherencyImage> {
    let n = header.height * header.width;
    check_channel_files(dir)?;
    let mut channels = Vec::with_capacity(CHANNELS);
    for name in CHANNEL_NAMES {
        channels.push(read_f32_channel(&dir.join(format!("{name}.bin")), n)?);
    }
    let data = (0..n)
        .map(|i| {
            let mut px = [0.0; CHANNELS];
            for (ch, values) in channels.iter().enumerate() {
                px[ch] = f64::from(values[i]);
            }
            hermitian_from_channels(&px)
        })
        .collect();
    CoherencyImage::new(header.height, header.width, data)
}

/// Writes the nine channel files (as `f32`) and a header. Any existing
/// class names in the header are kept.
pub fn save_coherency(dir: &Path, coh: &CoherencyImage) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ch, name) in CHANNEL_NAMES.iter().enumerate() {
        let bytes: Vec<u8> = coh
            .pixels()
            .iter()
            .flat_map(|t| (channels_from_hermitian(t)[ch] as f32).to_le_bytes())
            .collect();
        let path = dir.join(format!("{name}.bin"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let class_names = read_header(dir)
        .ok()
        .filter(|h| h.height == coh.height && h.width == coh.width)
        .map(|h| h.class_names)
        .unwrap_or_default();
    write_header(
        dir,
        &ImageHeader {
            height: coh.height,
            width: coh.width,
            class_names,
        },
    )
}

/// Per-pixel class ids: 0 is unlabeled, 1..=C index `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    class_names: Vec<String>,
}

impl GroundTruth {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        let classes = class_names.len();
        if classes == 0 || classes > u8::MAX as usize {
            return Err(Error::CorruptData(format!("{classes} class names")));
        }
        let mut seen = vec![false; classes + 1];
        for &l in &labels {
            if l as usize > classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=classes).find(|&c| !seen[c]) {
            return Err(Error::CorruptData(format!(
                "class {missing} ({}) has no labeled pixel",
                class_names[missing - 1]
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            class_names,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let header = read_header(dir)?;
    let path = dir.join(LABELS_FILE);
    let labels = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    GroundTruth::new(header.height, header.width, labels, header.class_names)
}

/// Writes `labels.bin` and records the class names in the header.
pub fn save_ground_truth(dir: &Path, gt: &GroundTruth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LABELS_FILE);
    fs::write(&path, &gt.labels).map_err(|e| Error::io(&path, e))?;
    write_header(
        dir,
        &ImageHeader {
            height: gt.height,
            width: gt.width,
            class_names: gt.class_names.clone(),
        },
    )
}

fn percentile_99(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    // nearest-rank
    let rank = ((0.99 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let (_, p, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *p
}

/// Pauli false-color composite: R from T22, G from T33, B from T11, each
/// clipped at its own 99th percentile and scaled to 0..=255.
pub fn pauli_rgb(coh: &CoherencyImage) -> image::RgbImage {
    let n = coh.height * coh.width;
    let mut scaled = [vec![0u8; n], vec![0u8; n], vec![0u8; n]];
    for (out, diag) in scaled.iter_mut().zip([1usize, 2, 0]) {
        let values: Vec<f64> = coh.data.iter().map(|t| t[diag][diag].re.max(0.0)).collect();
        let clip = percentile_99(&mut values.clone());
        if clip > 0.0 {
            for (o, v) in out.iter_mut().zip(&values) {
                *o = (255.0 * v.min(clip) / clip).round() as u8;
            }
        }
    }
    let buf: Vec<u8> = (0..n)
        .flat_map(|i| [scaled[0][i], scaled[1][i], scaled[2][i]])
        .collect();
    image::RgbImage::from_raw(coh.width as u32, coh.height as u32, buf)
        .expect("buffer sized to image")
}

/// A class of the synthetic scene: its name and mean coherency matrix,
/// given as the nine channels in feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub covariance: [f64; CHANNELS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Random Voronoi cells; cell `i` belongs to class `i % C + 1`.
    Voronoi { cells: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_looks")]
    pub looks: usize,
    pub classes: Vec<ClassSpec>,
    pub layout: Layout,
}

fn default_looks() -> usize {
    4
}

impl SceneSpec {
    /// A five-class scene whose classes differ in scattering mechanism and
    /// total power, laid out as 5 Voronoi cells per class.
    pub fn five_class(height: usize, width: usize) -> Self {
        let class = |name: &str, covariance| ClassSpec {
            name: name.to_string(),
            covariance,
        };
        SceneSpec {
            height,
            width,
            looks: default_looks(),
            classes: vec![
                class("water", [0.08, 0.006, 0.003, 0.004, 0.0, 0.0, 0.0, 0.0, 0.0]),
                class("bare soil", [1.0, 0.15, 0.05, 0.15, 0.05, 0.02, 0.0, 0.0, 0.0]),
                class("forest", [0.6, 0.5, 0.45, 0.05, 0.0, 0.0, 0.02, 0.03, 0.0]),
                class("building", [0.5, 1.6, 0.2, 0.3, -0.2, 0.0, 0.0, 0.05, 0.05]),
                class("crop", [0.3, 0.08, 0.25, 0.02, 0.01, 0.05, 0.0, 0.0, 0.01]),
            ],
            layout: Layout::Voronoi { cells: 25 },
        }
    }
}

/// Lower-triangular `L` with `L Lᴴ = sigma` for Hermitian PSD `sigma`.
/// Rank-deficient inputs get zero columns.
pub(crate) fn cholesky_psd(sigma: &Mat3) -> std::result::Result<Mat3, String> {
    let trace: f64 = (0..3).map(|i| sigma[i][i].re).sum();
    let tol = 1e-12 * trace.abs().max(f64::MIN_POSITIVE);
    for i in 0..3 {
        for j in 0..3 {
            if (sigma[i][j] - sigma[j][i].conj()).norm() > tol.max(1e-15) {
                return Err("covariance is not Hermitian".into());
            }
        }
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut l = [[zero; 3]; 3];
    for j in 0..3 {
        let d = sigma[j][j].re - (0..j).map(|k| l[j][k].norm_sqr()).sum::<f64>();
        if d < -tol {
            return Err("covariance is not positive semidefinite".into());
        }
        for i in j + 1..3 {
            let num = sigma[i][j] - (0..j).map(|k| l[i][k] * l[j][k].conj()).sum::<Complex64>();
            if d <= tol {
                if num.norm() > tol.sqrt().max(1e-12) {
                    return Err("covariance is not positive semidefinite".into());
                }
            } else {
                l[i][j] = num / d.sqrt();
            }
        }
        l[j][j] = Complex64::new(if d > tol { d.sqrt() } else { 0.0 }, 0.0);
    }
    Ok(l)
}

/// Samples an L-look Wishart scene: every pixel's matrix is the sample
/// covariance of `looks` zero-mean circular complex Gaussian vectors drawn
/// with its class covariance.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<(CoherencyImage, GroundTruth)> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(Error::InvalidSpec("empty image".into()));
    }
    if spec.looks == 0 {
        return Err(Error::InvalidSpec("looks must be at least 1".into()));
    }
    let classes = spec.classes.len();
    if classes == 0 || classes > u8::MAX as usize {
        return Err(Error::InvalidSpec(format!("{classes} classes")));
    }
    let factors = spec
        .classes
        .iter()
        .map(|c| {
            cholesky_psd(&hermitian_from_channels(&c.covariance))
                .map_err(|msg| Error::InvalidSpec(format!("class {}: {msg}", c.name)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = match spec.layout {
        Layout::Voronoi { cells } => {
            if cells < classes || cells > h * w {
                return Err(Error::InvalidSpec(format!(
                    "{cells} Voronoi cells for {classes} classes on {h}x{w}"
                )));
            }
            let sites: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, h * w, cells)
                .into_iter()
                .map(|i| (i / w, i % w))
                .collect();
            let mut labels = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let nearest = sites
                        .iter()
                        .enumerate()
                        .min_by_key(|(_, &(sr, sc))| {
                            let dr = r.abs_diff(sr);
                            let dc = c.abs_diff(sc);
                            dr * dr + dc * dc
                        })
                        .map(|(i, _)| i)
                        .expect("at least one site");
                    labels.push((nearest % classes + 1) as u8);
                }
            }
            labels
        }
    };

    let looks = spec.looks as f64;
    let zero = Complex64::new(0.0, 0.0);
    let mut data = Vec::with_capacity(h * w);
    for &label in &labels {
        let l = &factors[label as usize - 1];
        let mut t = [[zero; 3]; 3];
        for _ in 0..spec.looks {
            let mut z = [zero; 3];
            for zi in &mut z {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *zi = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
            }
            let mut k = [zero; 3];
            for (i, ki) in k.iter_mut().enumerate() {
                *ki = (0..=i).map(|j| l[i][j] * z[j]).sum();
            }
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] += k[i] * k[j].conj();
                }
            }
        }
        for row in &mut t {
            for v in row.iter_mut() {
                *v /= looks;
            }
        }
        // exact Hermitian symmetry and real diagonal
        for i in 0..3 {
            t[i][i] = Complex64::new(t[i][i].re, 0.0);
            for j in 0..i {
                t[i][j] = t[j][i].conj();
            }
        }
        data.push(t);
    }
    let names = spec.classes.iter().map(|c| c.name.clone()).collect();
    Ok((
        CoherencyImage::new(h, w, data)?,
        GroundTruth::new(h, w, labels, names)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledPixel {
    pub row: usize,
    pub col: usize,
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub train: Vec<LabeledPixel>,
    pub test: Vec<LabeledPixel>,
    pub seed: u64,
    /// Classes whose every labeled pixel went to training.
    #[serde(default)]
    pub empty_test_classes: Vec<u8>,
}

/// Samples exactly `per_class` training pixels from every class, uniformly
/// without replacement; all other labeled pixels become test pixels.
pub fn make_split(gt: &GroundTruth, per_class: usize, seed: u64) -> Result<LabelSplit> {
    let classes = gt.num_classes();
    let mut by_class: Vec<Vec<LabeledPixel>> = vec![Vec::new(); classes];
    for (idx, &class) in gt.labels.iter().enumerate() {
        if class > 0 {
            by_class[class as usize - 1].push(LabeledPixel {
                row: idx / gt.width,
                col: idx % gt.width,
                class,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(per_class * classes);
    let mut test = Vec::new();
    let mut empty_test_classes = Vec::new();
    for (c, mut pixels) in by_class.into_iter().enumerate() {
        if pixels.len() < per_class {
            return Err(Error::ClassTooSmall {
                class: (c + 1) as u8,
                available: pixels.len(),
                requested: per_class,
            });
        }
        let (chosen, rest) = pixels.partial_shuffle(&mut rng, per_class);
        train.extend_from_slice(chosen);
        if rest.is_empty() {
            empty_test_classes.push((c + 1) as u8);
        }
        test.extend_from_slice(rest);
    }
    test.sort_unstable_by_key(|p| (p.row, p.col));
    if !empty_test_classes.is_empty() {
        log::warn!("classes {empty_test_classes:?} have no test pixels");
    }
    Ok(LabelSplit {
        train,
        test,
        seed,
        empty_test_classes,
    })
}
