//! Confusion-matrix segmentation metrics.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pixels whose label equals `ignore_index` are skipped.
    pub fn update(&mut self, labels: &[u16], preds: &[u16], ignore_index: u16) -> Result<()> {
        if labels.len() != preds.len() {
            return Err(Error::shape("confusion_update", &[labels.len()], &[preds.len()]));
        }
        let k = self.num_classes;
        for (&t, &p) in labels.iter().zip(preds) {
            if t == ignore_index {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= k || p >= k {
                return Err(Error::InvalidArgument(format!("class id out of range: label {t}, prediction {p}, classes {k}")));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion_merge", &[self.num_classes], &[other.num_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` when the class occurs in neither ground truth
    /// nor predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn metrics(&self) -> Metrics {
        let iou = self.iou();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { 100.0 * present.iter().sum::<f64>() / present.len() as f64 };
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        let total = self.total();
        Metrics {
            per_class_iou: iou.iter().map(|v| v.map(|x| 100.0 * x)).collect(),
            miou,
            pixel_accuracy: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
            pixels: total,
        }
    }
}

/// All percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

impl Metrics {
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut header = String::from("metric");
        let mut row = String::from("iou");
        for (c, v) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            write!(header, ",{name}").unwrap();
            match v {
                Some(x) => write!(row, ",{x:.4}").unwrap(),
                None => row.push(','),
            }
        }
        write!(header, ",mIoU,pixel_accuracy").unwrap();
        write!(row, ",{:.4},{:.4}", self.miou, self.pixel_accuracy).unwrap();
        format!("{header}\n{row}\n")
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>9}", "class", "IoU (%)")?;
        for (c, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(x) => writeln!(f, "{c:<8} {x:>9.2}")?,
                None => writeln!(f, "{c:<8} {:>9}", "-")?,
            }
        }
        writeln!(f, "mIoU           {:.2}", self.miou)?;
        write!(f, "pixel_accuracy {:.2}", self.pixel_accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;
    use std::collections::HashSet;

    /// Per-class IoU from explicit pixel sets.
    fn brute_force(labels: &[u16], preds: &[u16], k: usize, ignore: u16) -> (Vec<Option<f64>>, f64) {
        let mut ious = Vec::new();
        for c in 0..k as u16 {
            let truth: HashSet<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let pred: HashSet<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore && preds[i] == c).collect();
            let union = truth.union(&pred).count();
            let inter = truth.intersection(&pred).count();
            ious.push((union > 0).then(|| inter as f64 / union as f64));
        }
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = 100.0 * present.iter().sum::<f64>() / present.len() as f64;
        (ious, miou)
    }

    #[test]
    fn perfect_prediction() {
        let labels = vec![0, 1, 2, 2, 255];
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&labels, &[0, 1, 2, 2, 3], 255).unwrap();
        let m = cm.metrics();
        assert_eq!(m.miou, 100.0);
        assert_eq!(m.per_class_iou[3], None);
        assert_eq!(m.pixels, 4);
    }

    #[test]
    fn half_missed_class() {
        // 4 pixels of class 1, two predicted as 0; 4 pixels of class 0 correct
        let labels = [1, 1, 1, 1, 0, 0, 0, 0];
        let preds = [1, 1, 0, 0, 0, 0, 0, 0];
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&labels, &preds, 255).unwrap();
        let iou = cm.iou();
        assert_eq!(iou[1], Some(0.5));
        assert_eq!(iou[0], Some(4.0 / 6.0));
        assert_eq!(cm.metrics().pixel_accuracy, 75.0);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let labels = [0, 255, 1, 255];
        let mut a = ConfusionMatrix::new(3);
        a.update(&labels, &[0, 2, 1, 0], 255).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.update(&labels, &[0, 1, 1, 2], 255).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_set_oracle() {
        let mut rng = seeded_rng(0);
        for _ in 0..100 {
            let k = rng.random_range(2..7usize);
            let labels: Vec<u16> = (0..256)
                .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k as u16) })
                .collect();
            let preds: Vec<u16> = (0..256).map(|_| rng.random_range(0..k as u16)).collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.update(&labels, &preds, 255).unwrap();
            let (ious, miou) = brute_force(&labels, &preds, k, 255);
            assert_eq!(cm.iou(), ious);
            assert_eq!(cm.metrics().miou, miou);
        }
    }

    #[test]
    fn merge_is_addition() {
        let mut a = ConfusionMatrix::new(2);
        a.update(&[0, 1], &[1, 1], 255).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.update(&[1, 0], &[0, 0], 255).unwrap();
        let mut both = ConfusionMatrix::new(2);
        both.update(&[0, 1, 1, 0], &[1, 1, 0, 0], 255).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, both);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn out_of_range_ids_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.update(&[2], &[0], 255).is_err());
        assert!(cm.update(&[0], &[5], 255).is_err());
        assert!(cm.update(&[0, 1], &[0], 255).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1], &[0, 1], 255).unwrap();
        let csv = cm.metrics().to_csv(&["bg".into(), "car".into()]);
        assert_eq!(csv, "metric,bg,car,class2,mIoU,pixel_accuracy\niou,100.0000,100.0000,,100.0000,100.0000\n");
    }
}
