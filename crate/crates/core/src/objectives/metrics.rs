use serde::{Deserialize, Serialize};

use crate::tensor::LabelMap;

fn counts(pred: &LabelMap, truth: &LabelMap, k: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut a, mut b) = (0, 0);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (ip, it) = (p == k, t == k);
        a += ip as usize;
        b += it as usize;
        inter += (ip && it) as usize;
    }
    (inter, a, b)
}

/// `2|A∩B| / (|A| + |B|)` for the class-`k` pixel sets; 1 when both are empty.
pub fn dice_coefficient(pred: &LabelMap, truth: &LabelMap, k: u8) -> f64 {
    let (inter, a, b) = counts(pred, truth, k);
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// `|A∩B| / |A∪B|` for class `k`; 1 when both are empty.
pub fn iou(pred: &LabelMap, truth: &LabelMap, k: u8) -> f64 {
    let (inter, a, b) = counts(pred, truth, k);
    let union = a + b - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: &[u8]) -> f64 {
    if classes.is_empty() {
        return 1.0;
    }
    classes.iter().map(|&k| iou(pred, truth, k)).sum::<f64>() / classes.len() as f64
}

/// Precision/recall F1 of boundary pixels, where a pixel matches if the
/// other boundary has a pixel within Chebyshev distance `tolerance`.
pub fn boundary_f1_masks(pred: &[bool], truth: &[bool], width: usize, tolerance: usize) -> f64 {
    let height = if width == 0 { 0 } else { pred.len() / width };
    let np = pred.iter().filter(|&&v| v).count();
    let nt = truth.iter().filter(|&&v| v).count();
    if np == 0 && nt == 0 {
        return 1.0;
    }
    if np == 0 || nt == 0 {
        return 0.0;
    }
    let near = |mask: &[bool], y: usize, x: usize| {
        let (y0, y1) = (y.saturating_sub(tolerance), (y + tolerance).min(height - 1));
        let (x0, x1) = (x.saturating_sub(tolerance), (x + tolerance).min(width - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask[yy * width + xx]))
    };
    let matched = |from: &[bool], to: &[bool]| {
        (0..from.len())
            .filter(|&i| from[i] && near(to, i / width, i % width))
            .count()
    };
    let precision = matched(pred, truth) as f64 / np as f64;
    let recall = matched(truth, pred) as f64 / nt as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Boundary F1 over the union of all class boundaries.
pub fn boundary_f1(pred: &LabelMap, truth: &LabelMap, tolerance: usize) -> f64 {
    boundary_f1_masks(&pred.boundary(false), &truth.boundary(false), pred.width, tolerance)
}

/// Boundary F1 of the binary class-`k` masks.
pub fn boundary_f1_class(pred: &LabelMap, truth: &LabelMap, k: u8, tolerance: usize) -> f64 {
    let binarize = |m: &LabelMap| LabelMap {
        height: m.height,
        width: m.width,
        data: m.data.iter().map(|&v| (v == k) as u8).collect(),
    };
    boundary_f1_masks(
        &binarize(pred).boundary(false),
        &binarize(truth).boundary(false),
        pred.width,
        tolerance,
    )
}

/// Boundary matching tolerance used in reports.
pub const BOUNDARY_TOLERANCE: usize = 1;

/// Aggregate segmentation quality. Per-class vectors are indexed by class
/// (background included); means run over foreground classes `1..K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub iou: Vec<f64>,
    pub miou: f64,
    pub boundary_f1: f64,
    pub boundary_f1_per_class: Vec<f64>,
}

/// Per-sample, per-class scores behind a report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub class: u8,
    pub dice: f64,
    pub iou: f64,
}

impl MetricRow {
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.6}", self.sample_id, self.class, self.dice, self.iou)
    }
}

pub const TSV_HEADER: &str = "sample_id\tclass\tdice\tiou";

fn foreground_mean(v: &[f64]) -> f64 {
    if v.len() <= 1 {
        return v.first().copied().unwrap_or(0.0);
    }
    v[1..].iter().sum::<f64>() / (v.len() - 1) as f64
}

/// Accumulates per-sample scores; each metric is averaged over samples.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    classes: usize,
    dice: Vec<f64>,
    iou: Vec<f64>,
    bf1: f64,
    bf1_class: Vec<f64>,
    rows: Vec<MetricRow>,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        MetricAccumulator {
            classes,
            dice: vec![0.0; classes],
            iou: vec![0.0; classes],
            bf1: 0.0,
            bf1_class: vec![0.0; classes],
            rows: Vec::new(),
        }
    }

    pub fn add(&mut self, id: &str, pred: &LabelMap, truth: &LabelMap) {
        for k in 0..self.classes {
            let kk = k as u8;
            let (d, i) = (dice_coefficient(pred, truth, kk), iou(pred, truth, kk));
            self.dice[k] += d;
            self.iou[k] += i;
            self.bf1_class[k] += boundary_f1_class(pred, truth, kk, BOUNDARY_TOLERANCE);
            self.rows.push(MetricRow {
                sample_id: id.to_string(),
                class: kk,
                dice: d,
                iou: i,
            });
        }
        self.bf1 += boundary_f1(pred, truth, BOUNDARY_TOLERANCE);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn report(&self) -> MetricReport {
        let n = (self.rows.len() / self.classes.max(1)).max(1) as f64;
        let samples = self.rows.len() / self.classes.max(1);
        let avg = |v: &[f64]| v.iter().map(|x| x / n).collect::<Vec<_>>();
        let dice = avg(&self.dice);
        let iou = avg(&self.iou);
        MetricReport {
            samples,
            mean_dice: foreground_mean(&dice),
            miou: foreground_mean(&iou),
            dice,
            iou,
            boundary_f1: self.bf1 / n,
            boundary_f1_per_class: avg(&self.bf1_class),
        }
    }
}
