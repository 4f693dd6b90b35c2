//! Confusion-matrix accumulation and per-class IoU / F1.
//!
//! `IoU_i = tp / (tp + fp + fn)` and `F1_i = 2PR / (P + R)`, evaluated in the
//! equivalent integer form `2tp / (2tp + fp + fn)`. A class that never occurs
//! in either the ground truth or the prediction has no score; it is reported
//! as `n/a` and left out of the means.

use std::fmt::Write as _;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Build from a row-major `K x K` table.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(shape_err(format!(
                "{} counts do not form a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally `prediction` against `label` (equal length, flattened maps),
    /// skipping pixels whose label is `ignore_index`. Nothing is added if any
    /// id is out of range.
    pub fn accumulate(&mut self, prediction: &[u32], label: &[u32], ignore_index: u32) -> Result<()> {
        if prediction.len() != label.len() {
            return Err(shape_err(format!(
                "prediction has {} pixels, label {}",
                prediction.len(),
                label.len()
            )));
        }
        let k = self.num_classes as u32;
        for (&p, &l) in prediction.iter().zip(label) {
            if l != ignore_index && (l >= k || p >= k) {
                return Err(Error::InvalidArgument(format!(
                    "class id out of range 0..{k}: prediction {p}, label {l}"
                )));
            }
        }
        for (&p, &l) in prediction.iter().zip(label) {
            if l != ignore_index {
                self.counts[l as usize * self.num_classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err(format!(
                "cannot merge {0}x{0} and {1}x{1} confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.num_classes)
            .filter(|&t| t != class)
            .map(|t| self.get(t, class))
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.num_classes)
            .filter(|&p| p != class)
            .map(|p| self.get(class, p))
            .sum()
    }

    fn tally(&self, class: usize) -> (u64, u64, u64) {
        (
            self.true_positives(class),
            self.false_positives(class),
            self.false_negatives(class),
        )
    }
}

impl Add for ConfusionMatrix {
    type Output = Result<ConfusionMatrix>;

    fn add(mut self, rhs: ConfusionMatrix) -> Result<ConfusionMatrix> {
        self.merge(&rhs)?;
        Ok(self)
    }
}

/// `tp / (tp + fp + fn)`, `None` when the denominator is zero.
pub fn iou(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let (tp, fp, fn_) = cm.tally(class);
    let denom = tp + fp + fn_;
    (denom > 0).then(|| tp as f64 / denom as f64)
}

/// `2PR / (P + R)` written as `2tp / (2tp + fp + fn)`, `None` when the class
/// is absent from both maps.
pub fn f1(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let (tp, fp, fn_) = cm.tally(class);
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| (2 * tp) as f64 / denom as f64)
}

pub fn precision(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let (tp, fp, _) = cm.tally(class);
    (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
}

pub fn recall(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let (tp, _, fn_) = cm.tally(class);
    (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Ground-truth pixel count.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassScore>,
    /// Mean IoU over scored classes; `None` if no class is scored.
    pub miou: Option<f64>,
    /// Mean F1 over scored classes.
    pub mf1: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let scored: Vec<f64> = values.flatten().collect();
    (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
}

/// Per-class scores and their unweighted means. Missing names default to
/// `class<i>`.
pub fn summarize(cm: &ConfusionMatrix, class_names: &[String]) -> EvalReport {
    let classes: Vec<ClassScore> = (0..cm.num_classes())
        .map(|i| ClassScore {
            name: class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}")),
            iou: iou(cm, i),
            f1: f1(cm, i),
            precision: precision(cm, i),
            recall: recall(cm, i),
            support: (0..cm.num_classes()).map(|p| cm.get(i, p)).sum(),
        })
        .collect();
    let pixels = cm.total();
    let correct: u64 = (0..cm.num_classes()).map(|i| cm.get(i, i)).sum();
    EvalReport {
        miou: mean(classes.iter().map(|c| c.iou)),
        mf1: mean(classes.iter().map(|c| c.f1)),
        overall_accuracy: (pixels > 0).then(|| correct as f64 / pixels as f64),
        pixels,
        classes,
        confusion: cm.clone(),
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl EvalReport {
    /// Fixed-width table: one row per class with IoU and F1 in percent, then
    /// the means.
    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .chain(["mean".len()])
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>12}", "class", "IoU", "F1", "support");
        let _ = writeln!(out, "{}", "-".repeat(width + 34));
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>12}",
                c.name,
                pct(c.iou),
                pct(c.f1),
                c.support
            );
        }
        let _ = writeln!(out, "{}", "-".repeat(width + 34));
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>12}",
            "mean",
            pct(self.miou),
            pct(self.mf1),
            self.pixels
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
