//! Label color codec, confusion matrix and segmentation scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::netpbm::RgbImage;

/// Label value that is skipped by the loss and the confusion matrix.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}×{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Class indices as loss targets.
    pub fn targets(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let data = (y0..y0 + h)
            .flat_map(|y| self.data[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        LabelMap { height: h, width: w, data }
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let data = self
            .data
            .chunks(self.width.max(1))
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        LabelMap { height: self.height, width: self.width, data }
    }
}

/// Ordered `(name, color)` table; class index is the position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelCodec {
    classes: Vec<(String, [u8; 3])>,
}

pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

impl Default for LabelCodec {
    fn default() -> Self {
        Self::land_cover()
    }
}

impl LabelCodec {
    /// The seven land-cover categories.
    pub fn land_cover() -> Self {
        let classes = [
            ("background", [255, 255, 255]),
            ("building", [255, 0, 0]),
            ("road", [255, 255, 0]),
            ("water", [0, 0, 255]),
            ("barren", [159, 129, 183]),
            ("forest", [0, 255, 0]),
            ("agriculture", [255, 195, 128]),
        ];
        Self {
            classes: classes.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        }
    }

    pub fn new(classes: Vec<(String, [u8; 3])>) -> Result<Self> {
        for (i, (name, color)) in classes.iter().enumerate() {
            if *color == IGNORE_COLOR {
                return Err(Error::config(format!("class {name} uses the ignore color")));
            }
            if classes[..i].iter().any(|(_, c)| c == color) {
                return Err(Error::config(format!("class {name} repeats color {color:?}")));
            }
        }
        if classes.len() >= IGNORE_LABEL as usize {
            return Err(Error::config(format!("{} classes exceed the label range", classes.len())));
        }
        Ok(Self { classes })
    }

    /// The first `k` classes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.classes.len() {
            return Err(Error::config(format!(
                "{k} classes requested, palette has {}",
                self.classes.len()
            )));
        }
        Ok(Self { classes: self.classes[..k].to_vec() })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class].0
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.classes[class].1
    }

    pub fn class_of(&self, color: [u8; 3]) -> Option<u8> {
        if color == IGNORE_COLOR {
            return Some(IGNORE_LABEL);
        }
        self.classes.iter().position(|(_, c)| *c == color).map(|i| i as u8)
    }

    pub fn decode_rgb(&self, image: &RgbImage) -> Result<LabelMap> {
        let mut data = Vec::with_capacity(image.width * image.height);
        for (i, px) in image.data.chunks_exact(3).enumerate() {
            let color = [px[0], px[1], px[2]];
            let class = self.class_of(color).ok_or_else(|| {
                Error::data(format!(
                    "unknown label color {color:?} at pixel ({}, {})",
                    i % image.width.max(1),
                    i / image.width.max(1)
                ))
            })?;
            data.push(class);
        }
        LabelMap::new(image.height, image.width, data)
    }

    pub fn encode_rgb(&self, labels: &LabelMap) -> Result<RgbImage> {
        let mut data = Vec::with_capacity(labels.data.len() * 3);
        for (i, &v) in labels.data.iter().enumerate() {
            let color = match v {
                IGNORE_LABEL => IGNORE_COLOR,
                c if (c as usize) < self.len() => self.color(c as usize),
                c => {
                    return Err(Error::data(format!(
                        "class index {c} at pixel ({}, {}) outside {} classes",
                        i % labels.width.max(1),
                        i / labels.width.max(1),
                        self.len()
                    )))
                }
            };
            data.extend_from_slice(&color);
        }
        RgbImage::new(labels.width, labels.height, data)
    }
}

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::dim(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.k || p >= self.k {
                return Err(Error::data(format!(
                    "label pair ({g}, {p}) outside {} classes",
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(format!("merge {}-class into {}-class matrix", other.k, self.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        let k = self.k;
        let total = self.total();
        let mut m = Metrics {
            per_class_iou: vec![0.0; k],
            per_class_f1: vec![0.0; k],
            per_class_precision: vec![0.0; k],
            per_class_recall: vec![0.0; k],
            present: vec![false; k],
            ..Metrics::default()
        };
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut trace = 0;
        for c in 0..k {
            let tp = self.get(c, c);
            let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let (fp, fn_) = (col - tp, row - tp);
            trace += tp;
            m.present[c] = tp + fp + fn_ > 0;
            m.per_class_iou[c] = ratio(tp, tp + fp + fn_);
            m.per_class_precision[c] = ratio(tp, tp + fp);
            m.per_class_recall[c] = ratio(tp, tp + fn_);
            m.per_class_f1[c] = ratio(2 * tp, 2 * tp + fp + fn_);
        }
        let n = m.present.iter().filter(|&&p| p).count();
        let mean = |v: &[f64]| {
            if n == 0 {
                0.0
            } else {
                v.iter().zip(&m.present).filter(|(_, &p)| p).map(|(x, _)| x).sum::<f64>() / n as f64
            }
        };
        m.miou = mean(&m.per_class_iou);
        m.mean_f1 = mean(&m.per_class_f1);
        m.oa = ratio(trace, total);
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub oa: f64,
    pub mean_f1: f64,
    pub per_class_iou: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// Classes seen in the ground truth or the prediction.
    pub present: Vec<bool>,
}

impl Metrics {
    /// Human-readable table.
    pub fn table(&self, codec: &LabelCodec) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>11}{:>10}", "class", "IoU", "F1", "precision", "recall");
        for c in 0..self.per_class_iou.len() {
            let name = if c < codec.len() { codec.name(c).to_string() } else { format!("class{c}") };
            let mark = if self.present[c] { "" } else { " (absent)" };
            let _ = writeln!(
                out,
                "{:<14}{:>10.4}{:>10.4}{:>11.4}{:>10.4}{mark}",
                name,
                self.per_class_iou[c],
                self.per_class_f1[c],
                self.per_class_precision[c],
                self.per_class_recall[c]
            );
        }
        let _ = writeln!(out, "mIoU {:.4}  OA {:.4}  mF1 {:.4}", self.miou, self.oa, self.mean_f1);
        out
    }

    /// One `metric=value` line per score, six decimals.
    pub fn key_values(&self) -> String {
        let mut out = format!("miou={:.6}\noa={:.6}\nmean_f1={:.6}\n", self.miou, self.oa, self.mean_f1);
        for (name, values) in [
            ("iou", &self.per_class_iou),
            ("f1", &self.per_class_f1),
            ("precision", &self.per_class_precision),
            ("recall", &self.per_class_recall),
        ] {
            for (c, v) in values.iter().enumerate() {
                let _ = writeln!(out, "{name}_{c}={v:.6}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_counts(k: usize, counts: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix { k, counts: counts.to_vec() }
    }

    #[test]
    fn table_colors() {
        let codec = LabelCodec::land_cover();
        assert_eq!(codec.class_of([255, 0, 0]), Some(1));
        assert_eq!(codec.class_of([0, 0, 255]), Some(3));
        assert_eq!(codec.class_of([1, 2, 3]), None);
        assert_eq!(codec.color(6), [255, 195, 128]);
        let img = RgbImage::new(2, 1, vec![255, 0, 0, 1, 2, 3]).unwrap();
        let err = codec.decode_rgb(&img).unwrap_err().to_string();
        assert!(err.contains("(1, 0)") && err.contains("[1, 2, 3]"), "{err}");
    }

    #[test]
    fn rgb_roundtrip_and_ignore() {
        let codec = LabelCodec::land_cover();
        let m = LabelMap::new(2, 4, vec![0, 1, 2, 3, 4, 5, 6, IGNORE_LABEL]).unwrap();
        let rgb = codec.encode_rgb(&m).unwrap();
        assert_eq!(&rgb.data[21..24], &[0, 0, 0]);
        assert_eq!(codec.decode_rgb(&rgb).unwrap(), m);
        let bad = LabelMap::new(1, 1, vec![7]).unwrap();
        assert!(matches!(codec.encode_rgb(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn codec_rejects_duplicates() {
        let dup = vec![("a".into(), [1, 1, 1]), ("b".into(), [1, 1, 1])];
        assert!(LabelCodec::new(dup).is_err());
        assert!(LabelCodec::new(vec![("a".into(), IGNORE_COLOR)]).is_err());
    }

    #[test]
    fn accumulate_counts() {
        let mut conf = ConfusionMatrix::new(3);
        let empty = LabelMap::new(0, 0, vec![]).unwrap();
        conf.accumulate(&empty, &empty).unwrap();
        assert_eq!(conf.total(), 0);
        let gt = LabelMap::new(2, 2, vec![0, 1, 2, IGNORE_LABEL]).unwrap();
        conf.accumulate(&gt.clone(), &gt).unwrap();
        assert_eq!(conf.total(), 3);
        assert_eq!((conf.get(0, 0), conf.get(1, 1), conf.get(2, 2)), (1, 1, 1));
        let wrong = LabelMap::new(1, 4, vec![0; 4]).unwrap();
        assert!(conf.accumulate(&wrong, &gt).is_err());
    }

    #[test]
    fn hand_evaluated_binary_case() {
        let m = from_counts(2, &[3, 1, 1, 3]).metrics();
        assert!((m.oa - 0.75).abs() < 1e-15);
        for c in 0..2 {
            assert!((m.per_class_iou[c] - 0.6).abs() < 1e-15);
            assert!((m.per_class_f1[c] - 0.75).abs() < 1e-15);
        }
        let perfect = from_counts(2, &[5, 0, 0, 2]).metrics();
        assert_eq!((perfect.miou, perfect.oa, perfect.mean_f1), (1.0, 1.0, 1.0));
        let disjoint = from_counts(2, &[0, 4, 4, 0]).metrics();
        assert_eq!(disjoint.per_class_iou, vec![0.0, 0.0]);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = from_counts(3, &[2, 0, 0, 0, 2, 0, 0, 0, 0]).metrics();
        assert_eq!(m.present, vec![true, true, false]);
        assert_eq!(m.miou, 1.0);
        let empty = ConfusionMatrix::new(3).metrics();
        assert_eq!((empty.miou, empty.oa, empty.mean_f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn key_value_report_format() {
        let m = from_counts(2, &[3, 1, 1, 3]).metrics();
        let kv = m.key_values();
        assert!(kv.starts_with("miou=0.600000\noa=0.750000\nmean_f1=0.750000\n"));
        assert!(kv.contains("recall_1=0.750000"));
        assert!(m.table(&LabelCodec::land_cover()).contains("building"));
    }
}
