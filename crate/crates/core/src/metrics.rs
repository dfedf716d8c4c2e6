//! Segmentation metrics from an accumulated confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[gt * n + pred]`; ignored ground-truth pixels are only counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub n: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
    pub ignore_index: u8,
}

impl ConfusionAccumulator {
    pub fn new(n: usize, ignore_index: u8) -> Self {
        ConfusionAccumulator { n, counts: vec![0; n * n], ignored: 0, ignore_index }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let n = self.n;
        let check = |v: u8| if (v as usize) < n { Ok(v as usize) } else { Err(Error::LabelOutOfRange { label: v, num_classes: n }) };
        for (&p, &g) in pred.iter().zip(gt) {
            if g == self.ignore_index {
                self.ignored += 1;
                continue;
            }
            let (g, p) = (check(g)?, check(p)?);
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!("merging {}-class and {}-class accumulators", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// Ground-truth pixel count per class (`t_i`).
    pub fn gt_totals(&self) -> Vec<u64> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).sum()).collect()
    }

    /// Predicted pixel count per class (`p_i`).
    pub fn pred_totals(&self) -> Vec<u64> {
        (0..self.n).map(|j| (0..self.n).map(|i| self.get(i, j)).sum()).collect()
    }

    /// Metrics restricted to `filter` (all classes when `None`).
    ///
    /// IoU averages over filtered classes present in ground truth or prediction;
    /// accuracy averages over filtered classes present in ground truth.
    pub fn finalize(&self, filter: Option<&[usize]>) -> Result<MetricsReport> {
        let classes: Vec<usize> = match filter {
            Some(f) => {
                if let Some(&bad) = f.iter().find(|&&c| c >= self.n) {
                    return Err(Error::LabelOutOfRange { label: bad.min(255) as u8, num_classes: self.n });
                }
                let mut f = f.to_vec();
                f.sort_unstable();
                f.dedup();
                f
            }
            None => (0..self.n).collect(),
        };
        let t = self.gt_totals();
        let p = self.pred_totals();
        let mut per_class = vec![None; self.n];
        let mut iou_sum = 0.0;
        let mut iou_n = 0usize;
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        let mut hits = 0u64;
        let mut gt_sum = 0u64;
        for &c in &classes {
            let nii = self.get(c, c);
            let union = t[c] + p[c] - nii;
            if union > 0 {
                let iou = nii as f64 / union as f64;
                per_class[c] = Some(iou);
                iou_sum += iou;
                iou_n += 1;
            }
            if t[c] > 0 {
                acc_sum += nii as f64 / t[c] as f64;
                acc_n += 1;
            }
            hits += nii;
            gt_sum += t[c];
        }
        if iou_n == 0 || gt_sum == 0 {
            return Err(Error::EmptyClassFilter);
        }
        let fwiou = classes.iter().filter_map(|&c| per_class[c].map(|iou| t[c] as f64 * iou)).sum::<f64>() / gt_sum as f64;
        Ok(MetricsReport {
            miou: iou_sum / iou_n as f64,
            fwiou,
            macc: acc_sum / acc_n as f64,
            pacc: hits as f64 / gt_sum as f64,
            per_class_iou: per_class,
            gt_pixels: t,
            pred_pixels: p,
            counted_pixels: self.total(),
            ignored_pixels: self.ignored,
            filter: classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub fwiou: f64,
    pub macc: f64,
    pub pacc: f64,
    /// `None` for classes outside the filter or absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
    pub gt_pixels: Vec<u64>,
    pub pred_pixels: Vec<u64>,
    pub counted_pixels: u64,
    pub ignored_pixels: u64,
    pub filter: Vec<usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
