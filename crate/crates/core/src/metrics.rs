//! Pixel-level evaluation metrics from hard label maps.
//!
//! A class absent from both prediction and target scores IoU = Dice = 1
//! and still enters the mean. Precision with no predicted pixels is 1 when
//! nothing was missed and 0 otherwise; recall mirrors this.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP + FN)`.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, 1.0)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, 1.0)
    }

    pub fn precision(&self) -> f64 {
        ratio(
            self.tp,
            self.tp + self.fp,
            if self.fn_ == 0 { 1.0 } else { 0.0 },
        )
    }

    pub fn recall(&self) -> f64 {
        ratio(
            self.tp,
            self.tp + self.fn_,
            if self.fp == 0 { 1.0 } else { 0.0 },
        )
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl AddAssign for ClassCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// One-vs-rest counts for every class, mergeable across shards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            classes: vec![ClassCounts::default(); classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Add one prediction/target pair.
    pub fn add(&mut self, pred: &Mask, target: &Mask) -> Result<()> {
        if (pred.height, pred.width) != (target.height, target.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs target {}x{}",
                pred.height, pred.width, target.height, target.width
            )));
        }
        let k = self.classes.len();
        // k×k matrix of (target, pred) pairs, then one-vs-rest per class
        let mut joint = vec![0u64; k * k];
        for (&p, &t) in pred.labels.iter().zip(&target.labels) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Labeling(format!(
                    "label {} is not below {k}",
                    p.max(t)
                )));
            }
            joint[t * k + p] += 1;
        }
        let n = pred.len() as u64;
        for c in 0..k {
            let tp = joint[c * k + c];
            let target_c: u64 = joint[c * k..(c + 1) * k].iter().sum();
            let pred_c: u64 = (0..k).map(|t| joint[t * k + c]).sum();
            self.classes[c] += ClassCounts {
                tp,
                fp: pred_c - tp,
                fn_: target_c - tp,
                tn: n + tp - pred_c - target_c,
            };
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes.len() != self.classes.len() {
            return Err(Error::Dimension(
                "cannot merge counts over different class sets".into(),
            ));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            *a += *b;
        }
        Ok(())
    }

    /// Mean IoU over all classes.
    pub fn miou(&self) -> f64 {
        self.classes.iter().map(ClassCounts::iou).sum::<f64>() / self.classes.len() as f64
    }
}

/// Counts over paired masks. Single-channel models label pixels 0/1, so
/// pass `classes = 2` for them.
pub fn confusion(pred: &[Mask], target: &[Mask], classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut counts = ConfusionCounts::new(classes.max(2));
    for (p, t) in pred.iter().zip(target) {
        counts.add(p, t)?;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub miou: f64,
    /// IoU of class 1 alone, reported for two-class problems.
    pub foreground_iou: Option<f64>,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `foreground` (class 1) for two classes, `macro` (mean over all
    /// classes) otherwise. mIoU always averages every class.
    pub averaging: String,
    pub total_pixels: u64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let per_class: Vec<ClassMetrics> = counts
            .classes
            .iter()
            .enumerate()
            .map(|(class, c)| ClassMetrics {
                class,
                iou: c.iou(),
                dice: c.dice(),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                counts: *c,
            })
            .collect();
        let k = per_class.len();
        let binary = k == 2;
        let headline = |f: fn(&ClassMetrics) -> f64| {
            if binary {
                f(&per_class[1])
            } else {
                per_class.iter().map(f).sum::<f64>() / k as f64
            }
        };
        Self {
            classes: k,
            miou: counts.miou(),
            foreground_iou: binary.then(|| per_class[1].iou),
            dice: headline(|m| m.dice),
            precision: headline(|m| m.precision),
            recall: headline(|m| m.recall),
            f1: headline(|m| m.f1),
            averaging: if binary { "foreground" } else { "macro" }.into(),
            total_pixels: counts.classes.first().map_or(0, ClassCounts::total),
            per_class,
        }
    }

    /// Aligned table: one summary row, then one row per class.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12}{:>8}{:>10}{:>8}{:>11}\n",
            "", "mIoU", "Dice(F1)", "Recall", "Precision"
        );
        s += &format!(
            "{:<12}{:>8.4}{:>10.4}{:>8.4}{:>11.4}\n",
            self.averaging, self.miou, self.dice, self.recall, self.precision
        );
        for c in &self.per_class {
            s += &format!(
                "{:<12}{:>8.4}{:>10.4}{:>8.4}{:>11.4}\n",
                format!("class {}", c.class),
                c.iou,
                c.dice,
                c.recall,
                c.precision
            );
        }
        if let Some(f) = self.foreground_iou {
            s += &format!("foreground IoU {f:.4}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_mask(r: &mut ChaCha8Rng, k: u8, h: usize, w: usize) -> Mask {
        Mask::new(h, w, (0..h * w).map(|_| r.random_range(0..k)).collect()).unwrap()
    }

    /// Brute force straight from the definitions, one pixel at a time.
    fn oracle(pred: &Mask, target: &Mask, k: usize) -> Vec<ClassCounts> {
        (0..k as u8)
            .map(|c| {
                let mut out = ClassCounts::default();
                for (&p, &t) in pred.labels.iter().zip(&target.labels) {
                    match (p == c, t == c) {
                        (true, true) => out.tp += 1,
                        (true, false) => out.fp += 1,
                        (false, true) => out.fn_ += 1,
                        (false, false) => out.tn += 1,
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let m = Mask::new(2, 3, vec![0, 1, 1, 0, 2, 2]).unwrap();
        let c = confusion(&[m.clone()], &[m], 3).unwrap();
        assert!(c.classes.iter().all(|k| k.fp == 0 && k.fn_ == 0));
        let r = MetricsReport::from_counts(&c);
        for v in [r.miou, r.dice, r.precision, r.recall, r.f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn complement_has_no_true_hits() {
        let t = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let p = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let c = confusion(&[p], &[t], 2).unwrap();
        assert!(c.classes.iter().all(|k| k.tp == 0 && k.tn == 0));
    }

    #[test]
    fn hand_counted_overlap() {
        // prediction covers two pixels, target two, one shared
        let t = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let p = Mask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let c = confusion(&[p], &[t], 2).unwrap();
        assert_eq!(
            c.classes[1],
            ClassCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert!((c.classes[1].iou() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.classes[1].dice(), 0.5);
    }

    #[test]
    fn empty_class_conventions() {
        let none = ClassCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 9,
        };
        assert_eq!(
            (
                none.iou(),
                none.dice(),
                none.precision(),
                none.recall(),
                none.f1()
            ),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        let missed = ClassCounts {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 6,
        };
        assert_eq!(
            (missed.precision(), missed.recall(), missed.f1()),
            (0.0, 0.0, 0.0)
        );
        let spurious = ClassCounts {
            tp: 0,
            fp: 2,
            fn_: 0,
            tn: 7,
        };
        assert_eq!(
            (spurious.precision(), spurious.recall(), spurious.dice()),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn random_pairs_match_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let k = r.random_range(2..5u8);
            let (p, t) = (
                random_mask(&mut r, k, 16, 16),
                random_mask(&mut r, k, 16, 16),
            );
            let c = confusion(&[p.clone()], &[t.clone()], k as usize).unwrap();
            let want = oracle(&p, &t, k as usize);
            assert_eq!(c.classes, want);
            for cc in &c.classes {
                assert_eq!(cc.total(), 256);
                assert!((cc.f1() - cc.dice()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_accumulation_equals_one_pass() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let preds: Vec<Mask> = (0..6).map(|_| random_mask(&mut r, 3, 8, 8)).collect();
        let targets: Vec<Mask> = (0..6).map(|_| random_mask(&mut r, 3, 8, 8)).collect();
        let all = confusion(&preds, &targets, 3).unwrap();
        let mut merged = confusion(&preds[..2], &targets[..2], 3).unwrap();
        merged
            .merge(&confusion(&preds[2..], &targets[2..], 3).unwrap())
            .unwrap();
        assert_eq!(all, merged);
        // one concatenated mask
        let cat = |ms: &[Mask]| {
            Mask::new(48, 8, ms.iter().flat_map(|m| m.labels.clone()).collect()).unwrap()
        };
        assert_eq!(confusion(&[cat(&preds)], &[cat(&targets)], 3).unwrap(), all);
    }

    #[test]
    fn relabeling_permutes_classes_and_keeps_miou() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (p, t) = (
            random_mask(&mut r, 3, 10, 10),
            random_mask(&mut r, 3, 10, 10),
        );
        let perm = [2u8, 0, 1];
        let relabel = |m: &Mask| {
            Mask::new(
                m.height,
                m.width,
                m.labels.iter().map(|&l| perm[l as usize]).collect(),
            )
            .unwrap()
        };
        let a = confusion(&[p.clone()], &[t.clone()], 3).unwrap();
        let b = confusion(&[relabel(&p)], &[relabel(&t)], 3).unwrap();
        for c in 0..3 {
            assert_eq!(a.classes[c], b.classes[perm[c] as usize]);
        }
        assert!((a.miou() - b.miou()).abs() < 1e-15);
    }

    #[test]
    fn binary_report_uses_foreground_headline() {
        let t = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let p = Mask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let r = MetricsReport::from_counts(&confusion(&[p], &[t], 1).unwrap());
        assert_eq!(r.classes, 2);
        assert_eq!(r.dice, 0.5);
        assert_eq!(r.foreground_iou, Some(1.0 / 3.0));
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["per_class"][1]["counts"]["fn"], 1);
        assert!(r.to_text().contains("Dice(F1)"));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = Mask::filled(2, 2, 0);
        let b = Mask::filled(2, 3, 0);
        assert!(confusion(&[a.clone()], &[b], 2).is_err());
        assert!(confusion(&[Mask::filled(2, 2, 3)], &[a], 2).is_err());
    }

    proptest! {
        #[test]
        fn metric_invariants(labels in proptest::collection::vec((0u8..3, 0u8..3), 1..80)) {
            let n = labels.len();
            let p = Mask::new(1, n, labels.iter().map(|l| l.0).collect()).unwrap();
            let t = Mask::new(1, n, labels.iter().map(|l| l.1).collect()).unwrap();
            let c = confusion(&[p], &[t], 3).unwrap();
            for k in &c.classes {
                prop_assert_eq!(k.total(), n as u64);
                for v in [k.iou(), k.dice(), k.precision(), k.recall(), k.f1()] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!((k.f1() - k.dice()).abs() < 1e-12);
                if k.tp + k.fp + k.fn_ > 0 {
                    prop_assert!(k.iou() <= k.dice());
                }
            }
        }
    }
}
