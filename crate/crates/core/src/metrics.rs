//! Accuracy metrics, confusion matrices and classification-map rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polsar::{GroundTruth, LabeledPixel};

/// Per-pixel class ids in raster order; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Raw `u8` raster, no header.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.labels).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: &Path, height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    /// `None` for classes without test pixels.
    pub per_class: Vec<Option<f64>>,
    /// Rows are true classes, columns predicted classes (both 1-based ids
    /// shifted to 0-based indices).
    pub confusion: Vec<Vec<u64>>,
    /// Class ids left out of AA for lack of support.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_support: Vec<u8>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let mut zero_support = Vec::new();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let support: u64 = row.iter().sum();
                if support == 0 {
                    zero_support.push((i + 1) as u8);
                    None
                } else {
                    Some(row[i] as f64 / support as f64)
                }
            })
            .collect();
        if !zero_support.is_empty() {
            log::warn!("classes {zero_support:?} have no test pixels and are left out of AA");
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(Self {
            oa: correct as f64 / total as f64,
            aa: defined.iter().sum::<f64>() / defined.len() as f64,
            per_class,
            confusion,
            zero_support,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores labeled pixels of `gt` that are not in `exclude`.
pub fn evaluate(pred: &ClassMap, gt: &GroundTruth, exclude: &[LabeledPixel]) -> Result<Metrics> {
    if pred.height != gt.height() || pred.width != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height(),
            gt.width()
        )));
    }
    let c = gt.num_classes();
    let mut skip = vec![false; pred.labels.len()];
    for p in exclude {
        if p.row >= gt.height() || p.col >= gt.width() {
            return Err(Error::OutOfBounds {
                row: p.row,
                col: p.col,
                height: gt.height(),
                width: gt.width(),
            });
        }
        skip[p.row * pred.width + p.col] = true;
    }
    let mut confusion = vec![vec![0u64; c]; c];
    for (i, (&t, &p)) in gt.labels().iter().zip(&pred.labels).enumerate() {
        if t == 0 || skip[i] {
            continue;
        }
        if p == 0 || p as usize > c {
            return Err(Error::LabelOutOfRange { label: p, classes: c });
        }
        confusion[t as usize - 1][p as usize - 1] += 1;
    }
    Metrics::from_confusion(confusion)
}

/// Index 0 is the unlabeled color; 1..=15 are classes.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [0, 0, 255],
    [255, 128, 0],
    [0, 160, 0],
    [255, 0, 0],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [128, 64, 0],
    [160, 255, 160],
    [128, 0, 255],
    [255, 192, 203],
    [128, 128, 0],
    [255, 255, 255],
    [0, 128, 128],
    [128, 128, 255],
];

pub fn render_map(map: &ClassMap, palette: &[[u8; 3]]) -> Result<RgbImage> {
    if let Some(&bad) = map.labels.iter().find(|&&l| l as usize >= palette.len()) {
        return Err(Error::PaletteMissing(bad));
    }
    Ok(RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(palette[map.get(y as usize, x as usize) as usize])
    }))
}

/// Inverse of [`render_map`] for palettes with distinct colors.
pub fn decode_map(img: &RgbImage, palette: &[[u8; 3]]) -> Result<ClassMap> {
    let labels = img
        .pixels()
        .map(|p| {
            palette
                .iter()
                .position(|c| *c == p.0)
                .map(|i| i as u8)
                .ok_or_else(|| Error::CorruptData(format!("color {:?} not in palette", p.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    ClassMap::new(img.height() as usize, img.width() as usize, labels)
}

/// Per-class accuracy table with one column per method, followed by OA
/// and AA rows.
pub fn format_table(class_names: &[String], columns: &[(&str, &Metrics)]) -> String {
    let name_w = class_names.iter().map(String::len).chain([5]).max().unwrap_or(5);
    let col_w = columns.iter().map(|(n, _)| n.len()).chain([6]).max().unwrap_or(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Class");
    for (name, _) in columns {
        let _ = write!(out, " | {name:>col_w$}");
    }
    out.push('\n');
    let rule = "-".repeat(name_w + columns.len() * (col_w + 3));
    out.push_str(&rule);
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for (i, name) in class_names.iter().enumerate() {
        let _ = write!(out, "{name:<name_w$}");
        for (_, m) in columns {
            let _ = write!(out, " | {:>col_w$}", cell(m.per_class.get(i).copied().flatten()));
        }
        out.push('\n');
    }
    out.push_str(&rule);
    out.push('\n');
    for (label, pick) in [("OA", 0usize), ("AA", 1)] {
        let _ = write!(out, "{label:<name_w$}");
        for (_, m) in columns {
            let v = if pick == 0 { m.oa } else { m.aa };
            let _ = write!(out, " | {:>col_w$}", format!("{v:.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(labels: Vec<u8>, w: usize, classes: usize) -> GroundTruth {
        let names = (1..=classes).map(|c| format!("c{c}")).collect();
        GroundTruth::new(labels.len() / w, w, labels, names).unwrap()
    }

    /// Confusion rows with the requested accuracy at a fixed support; the
    /// misses all go to the next class.
    fn confusion_with_accuracies(acc: &[f64], support: u64) -> Vec<Vec<u64>> {
        let c = acc.len();
        (0..c)
            .map(|i| {
                let hit = (acc[i] * support as f64).round() as u64;
                let mut row = vec![0; c];
                row[i] = hit;
                row[(i + 1) % c] += support - hit;
                row
            })
            .collect()
    }

    const DBGC_COLUMN: [f64; 15] = [
        0.9875, 0.9863, 1.0000, 0.9984, 0.9721, 0.9930, 0.9636, 0.9647, 0.9711, 0.9926, 0.9651, 0.9888, 0.9435,
        0.9825, 0.9905,
    ];
    const GNN_COLUMN: [f64; 15] = [
        0.9456, 0.9744, 0.9851, 0.9428, 0.8610, 0.9811, 0.9807, 0.6562, 0.3690, 0.9871, 0.9807, 0.9616, 0.3355,
        0.8760, 0.9943,
    ];

    #[test]
    fn table_columns_reproduce_reported_aa() {
        let m = Metrics::from_confusion(confusion_with_accuracies(&DBGC_COLUMN, 10_000)).unwrap();
        assert!((m.aa - 0.9800).abs() <= 1e-4, "{}", m.aa);
        for (got, want) in m.per_class.iter().zip(DBGC_COLUMN) {
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
        let m = Metrics::from_confusion(confusion_with_accuracies(&GNN_COLUMN, 10_000)).unwrap();
        assert!((m.aa - 0.8554).abs() <= 1e-4, "{}", m.aa);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let truth = gt(vec![1, 1, 2, 2], 2, 2);
        let perfect = ClassMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let m = evaluate(&perfect, &truth, &[]).unwrap();
        assert_eq!((m.oa, m.aa), (1.0, 1.0));
        assert_eq!(m.per_class, vec![Some(1.0), Some(1.0)]);
        let constant = ClassMap::new(2, 2, vec![1; 4]).unwrap();
        let m = evaluate(&constant, &truth, &[]).unwrap();
        assert_eq!((m.oa, m.aa), (0.5, 0.5));
        assert_eq!(m.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn exclusions_unlabeled_and_empty() {
        let truth = gt(vec![0, 1, 2, 2], 2, 2);
        let pred = ClassMap::new(2, 2, vec![2, 1, 1, 2]).unwrap();
        let train = [LabeledPixel { row: 1, col: 0, class: 2 }];
        let m = evaluate(&pred, &truth, &train).unwrap();
        assert_eq!(m.total(), 2);
        assert_eq!(m.oa, 1.0);
        let all = [
            LabeledPixel { row: 0, col: 1, class: 1 },
            LabeledPixel { row: 1, col: 0, class: 2 },
            LabeledPixel { row: 1, col: 1, class: 2 },
        ];
        assert!(matches!(evaluate(&pred, &truth, &all), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn zero_support_is_flagged_and_skipped() {
        let m = Metrics::from_confusion(vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(m.per_class[1], None);
        assert_eq!(m.zero_support, vec![2]);
        assert!((m.aa - (0.75 + 1.0) / 2.0).abs() < 1e-15);
        let json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert!(json["per_class"][1].is_null());
    }

    #[test]
    fn render_and_decode_roundtrip() {
        let map = ClassMap::new(3, 4, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 15, 14, 13]).unwrap();
        let img = render_map(&map, &PALETTE).unwrap();
        assert_eq!(img.dimensions(), (4, 3));
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        img.save(&path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decode_map(&back, &PALETTE).unwrap(), map);

        let single = render_map(&ClassMap::new(2, 2, vec![3; 4]).unwrap(), &PALETTE).unwrap();
        assert!(single.pixels().all(|p| p.0 == PALETTE[3]));
        let short = &PALETTE[..4];
        assert!(matches!(
            render_map(&ClassMap::new(1, 1, vec![4]).unwrap(), short),
            Err(Error::PaletteMissing(4))
        ));
    }

    #[test]
    fn palette_colors_are_distinct() {
        for i in 0..PALETTE.len() {
            for j in i + 1..PALETTE.len() {
                assert_ne!(PALETTE[i], PALETTE[j]);
            }
        }
    }

    #[test]
    fn table_layout() {
        let m = Metrics::from_confusion(vec![vec![1, 0], vec![1, 1]]).unwrap();
        let t = format_table(&["water".into(), "forest".into()], &[("A", &m), ("B", &m)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[2].starts_with("water") && lines[2].ends_with("1.0000"));
        assert!(lines[3].contains("0.5000"));
        assert!(lines[5].starts_with("OA") && lines[5].contains("0.6667"));
        assert!(lines[6].starts_with("AA") && lines[6].contains("0.7500"));
    }

    fn confusion_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..6).prop_flat_map(|c| proptest::collection::vec(proptest::collection::vec(1u64..50, c), c))
    }

    proptest! {
        #[test]
        fn invariants_hold(conf in confusion_strategy(), shift in 0usize..5) {
            let m = Metrics::from_confusion(conf.clone()).unwrap();
            let c = conf.len();
            let trace: u64 = (0..c).map(|i| conf[i][i]).sum();
            prop_assert_eq!(m.oa, trace as f64 / m.total() as f64);
            prop_assert!((0.0..=1.0).contains(&m.oa) && (0.0..=1.0).contains(&m.aa));

            // relabel classes by a cyclic shift applied to rows and columns
            let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
            let mut permuted = vec![vec![0; c]; c];
            for i in 0..c {
                for j in 0..c {
                    permuted[perm[i]][perm[j]] = conf[i][j];
                }
            }
            let mp = Metrics::from_confusion(permuted).unwrap();
            prop_assert_eq!(mp.oa, m.oa);
            prop_assert!((mp.aa - m.aa).abs() < 1e-12);
        }

        #[test]
        fn equal_support_means_oa_equals_aa(hits in proptest::collection::vec(0u64..=20, 2..8)) {
            let conf: Vec<Vec<u64>> = (0..hits.len())
                .map(|i| {
                    let mut row = vec![0; hits.len()];
                    row[i] = hits[i];
                    row[(i + 1) % hits.len()] += 20 - hits[i];
                    row
                })
                .collect();
            let m = Metrics::from_confusion(conf).unwrap();
            prop_assert!((m.oa - m.aa).abs() < 1e-12);
        }
    }
}
