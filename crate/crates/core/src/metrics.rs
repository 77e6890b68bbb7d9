//! Pixel confusion counts, the four change-detection scores, and
//! region-level recall per change size class.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use crate::data::{ChangeSample, SizeClass};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels, truth has {truth}")]
    ShapeMismatch { pred: usize, truth: usize },
    #[error("mask value {0} is not binary")]
    NotBinary(u8),
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(MetricsError::NotBinary(p.max(t))),
        }
    }
    Ok(c)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Any 0/0 ratio is reported as 0.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        precision,
        recall,
        f1,
        oa: ratio(c.tp + c.tn, c.total()),
    }
}

/// Fraction of a region's pixels that must be predicted for it to count as detected.
pub const DETECTION_OVERLAP: f64 = 0.5;

#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct RegionRecall {
    pub regions: usize,
    pub detected: usize,
}

impl RegionRecall {
    pub fn recall(&self) -> f64 {
        ratio(self.detected as u64, self.regions as u64)
    }
}

/// Region-level recall per size class over `samples`, with `preds[i]` the
/// predicted mask of `samples[i]`. Classes without regions are absent.
pub fn size_stratified_metrics(
    preds: &[Vec<u8>],
    samples: &[ChangeSample],
) -> Result<BTreeMap<SizeClass, RegionRecall>, MetricsError> {
    let mut out: BTreeMap<SizeClass, RegionRecall> = BTreeMap::new();
    for (pred, s) in preds.iter().zip(samples) {
        if pred.len() != s.pixels() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.len(),
                truth: s.pixels(),
            });
        }
        let mut hits = vec![0usize; s.regions.len() + 1];
        let mut sizes = vec![0usize; s.regions.len() + 1];
        for (&p, &l) in pred.iter().zip(&s.region_map) {
            if p > 1 {
                return Err(MetricsError::NotBinary(p));
            }
            sizes[l as usize] += 1;
            hits[l as usize] += p as usize;
        }
        for (k, r) in s.regions.iter().enumerate() {
            let e = out.entry(r.size_class).or_default();
            e.regions += 1;
            if hits[k + 1] as f64 >= DETECTION_OVERLAP * sizes[k + 1] as f64 {
                e.detected += 1;
            }
        }
    }
    Ok(out)
}
