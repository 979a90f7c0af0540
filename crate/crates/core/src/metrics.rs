//! Confusion-matrix evaluation: OA, precision, recall, F1 and mIoU.
//!
//! Counts accumulate over the whole dataset before any ratio is taken
//! (micro-averaging). Zero denominators yield 0 with the metric listed
//! in `undefined`; reports never contain NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Exact pixel counts; changed (1) is the positive class.
pub fn confusion_counts(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::dims("confusion counts", &[pred.len()], &[gt.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub counts: ConfusionCounts,
    pub oa: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub iou_c: f64,
    pub iou_u: f64,
    pub miou: f64,
    /// Metrics whose denominator was zero; their value is reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Ratios from accumulated counts. mIoU averages the changed and
/// unchanged IoU values; an undefined IoU enters that average as 0.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    let mut undefined = Vec::new();
    let oa = ratio(c.tp + c.tn, c.total(), "oa", &mut undefined);
    let pre = ratio(c.tp, c.tp + c.fp, "pre", &mut undefined);
    let rec = ratio(c.tp, c.tp + c.fn_, "rec", &mut undefined);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1", &mut undefined);
    let iou_c = ratio(c.tp, c.tp + c.fp + c.fn_, "iou_c", &mut undefined);
    let iou_u = ratio(c.tn, c.tn + c.fp + c.fn_, "iou_u", &mut undefined);
    let miou = (iou_c + iou_u) / 2.0;
    MetricReport {
        counts: *c,
        oa,
        pre,
        rec,
        f1,
        iou_c,
        iou_u,
        miou,
        undefined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = [0u8, 1, 1, 0, 1, 0];
        let c = confusion_counts(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let r = compute_metrics(&c);
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.miou, 1.0);
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn inverted_prediction_has_no_hits() {
        let gt = [0u8, 1, 1, 0];
        let pred = [1u8, 0, 0, 1];
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!((c.fp, c.fn_), (2, 2));
    }

    #[test]
    fn counts_match_a_per_pixel_loop_oracle() {
        let mut rng = SeededRng::new(51);
        let pred: Vec<u8> = (0..100).map(|_| (rng.uniform() > 0.4) as u8).collect();
        let gt: Vec<u8> = (0..100).map(|_| (rng.uniform() > 0.6) as u8).collect();
        let c = confusion_counts(&pred, &gt).unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..100 {
            match (pred[i], gt[i]) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (1, 0) => fp += 1,
                _ => fn_ += 1,
            }
        }
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_));
        assert_eq!(c.total(), 100);
    }

    #[test]
    fn worked_example() {
        let c = ConfusionCounts {
            tp: 50,
            tn: 40,
            fp: 5,
            fn_: 5,
        };
        let r = compute_metrics(&c);
        assert!((r.oa - 0.9).abs() < 1e-12);
        assert!((r.pre - 10.0 / 11.0).abs() < 1e-12);
        assert!((r.rec - 10.0 / 11.0).abs() < 1e-12);
        assert!((r.f1 - 10.0 / 11.0).abs() < 1e-12);
        assert!((r.iou_c - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.iou_u - 0.8).abs() < 1e-12);
        assert!((r.miou - (5.0 / 6.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_all_negative_case() {
        // No positives anywhere, everything predicted negative.
        let c = confusion_counts(&[0u8; 10], &[0u8; 10]).unwrap();
        let r = compute_metrics(&c);
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.pre, 0.0);
        assert_eq!(r.rec, 0.0);
        assert_eq!(r.iou_c, 0.0);
        assert!(r.undefined.contains(&"pre".to_string()));
        assert!(r.undefined.contains(&"rec".to_string()));
        assert!(r.undefined.contains(&"iou_c".to_string()));
        assert_eq!(r.miou, (0.0 + 1.0) / 2.0);
    }

    #[test]
    fn f1_is_harmonic_mean_when_defined() {
        let mut rng = SeededRng::new(52);
        for _ in 0..50 {
            let c = ConfusionCounts {
                tp: 1 + rng.below(100) as u64,
                tn: rng.below(100) as u64,
                fp: rng.below(100) as u64,
                fn_: rng.below(100) as u64,
            };
            let r = compute_metrics(&c);
            let hm = 2.0 * r.pre * r.rec / (r.pre + r.rec);
            assert!((r.f1 - hm).abs() < 1e-12);
        }
    }

    #[test]
    fn flipping_fp_to_tn_never_degrades() {
        let mut rng = SeededRng::new(53);
        for _ in 0..50 {
            let c = ConfusionCounts {
                tp: rng.below(50) as u64,
                tn: rng.below(50) as u64,
                fp: 1 + rng.below(50) as u64,
                fn_: rng.below(50) as u64,
            };
            let mut better = c;
            better.fp -= 1;
            better.tn += 1;
            let (a, b) = (compute_metrics(&c), compute_metrics(&better));
            assert!(b.oa >= a.oa);
            assert!(b.pre >= a.pre);
            assert!(b.iou_c >= a.iou_c);
            assert!(b.iou_u >= a.iou_u);
        }
    }

    #[test]
    fn every_metric_in_unit_interval() {
        let mut rng = SeededRng::new(54);
        for _ in 0..100 {
            let c = ConfusionCounts {
                tp: rng.below(40) as u64,
                tn: rng.below(40) as u64,
                fp: rng.below(40) as u64,
                fn_: rng.below(40) as u64,
            };
            if c.total() == 0 {
                continue;
            }
            let r = compute_metrics(&c);
            for v in [r.oa, r.pre, r.rec, r.f1, r.iou_c, r.iou_u, r.miou] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
