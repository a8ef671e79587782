//! Patch-level confusion matrices and mIoU.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// `counts[truth * classes + pred]`
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dim("confusion", &[truth.len()], &[pred.len()]));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= self.classes || p >= self.classes {
                return Err(Error::Index {
                    what: "class",
                    index: t.max(p),
                    limit: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither labels nor predictions.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..self.classes).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..self.classes).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean over the classes that have an IoU.
pub fn mean_iou(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub domain: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl MetricsRecord {
    pub fn from_confusion(iteration: usize, domain: &str, cm: &ConfusionMatrix) -> Self {
        let per_class_iou = cm.per_class_iou();
        MetricsRecord {
            iteration,
            domain: domain.to_string(),
            miou: mean_iou(&per_class_iou),
            per_class_iou,
        }
    }
}

/// `iteration,domain,iou_0..iou_{C-1},miou`; absent classes are blank.
pub fn write_metrics_csv<W: Write>(w: &mut W, classes: usize, records: &[MetricsRecord]) -> Result<()> {
    let ious: Vec<String> = (0..classes).map(|c| format!("iou_{c}")).collect();
    writeln!(w, "iteration,domain,{},miou", ious.join(","))?;
    for r in records {
        let cells: Vec<String> = r
            .per_class_iou
            .iter()
            .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
            .collect();
        writeln!(w, "{},{},{},{}", r.iteration, r.domain, cells.join(","), r.miou)?;
    }
    Ok(())
}
