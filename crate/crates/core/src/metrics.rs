//! Segmentation scores against a binary ground-truth mask.
//!
//! Only the predicted cluster with the largest overlap with the ground truth
//! is scored, which keeps large background clusters out of the evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{BinaryMask, LabelMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        check_shapes(pred, gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn dsc(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn hammoude(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            0.0
        } else {
            (self.fp + self.fn_) as f64 / union as f64
        }
    }

    pub fn xor(&self) -> Result<f64> {
        let gt = self.tp + self.fn_;
        if gt == 0 {
            return Err(Error::EmptyGroundTruth);
        }
        Ok((self.fp + self.fn_) as f64 / gt as f64)
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height() != b.height() {
        return Err(Error::ShapeMismatch { op: "metrics", dim: "height", expected: b.height(), found: a.height() });
    }
    if a.width() != b.width() {
        return Err(Error::ShapeMismatch { op: "metrics", dim: "width", expected: b.width(), found: a.width() });
    }
    Ok(())
}

/// Dice similarity `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dsc())
}

/// Hammoude distance `(|A u B| - |A n B|) / |A u B|`; 0 when both are empty.
pub fn hammoude(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.hammoude())
}

/// XOR measure `(fp + fn) / |gt|`. Exceeds 1 when the prediction covers
/// much more than the ground truth.
pub fn xor_measure(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Confusion::of(pred, gt)?.xor()
}

/// Picks the cluster with the largest ground-truth overlap. Ties go to the
/// smaller cluster, then to the smaller id.
pub fn match_largest_overlap(labels: &LabelMap, gt: &BinaryMask) -> Result<(usize, BinaryMask)> {
    if labels.height() != gt.height() {
        return Err(Error::ShapeMismatch { op: "match_largest_overlap", dim: "height", expected: gt.height(), found: labels.height() });
    }
    if labels.width() != gt.width() {
        return Err(Error::ShapeMismatch { op: "match_largest_overlap", dim: "width", expected: gt.width(), found: labels.width() });
    }
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    // (overlap, size) per label
    let mut stats = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for (&l, &g) in labels.data().iter().zip(gt.data()) {
        let e = stats.entry(l).or_default();
        e.1 += 1;
        if g {
            e.0 += 1;
        }
    }
    let (&best, _) = stats
        .iter()
        .max_by(|(ia, (oa, sa)), (ib, (ob, sb))| {
            oa.cmp(ob).then(sb.cmp(sa)).then(ib.cmp(ia))
        })
        .expect("non-empty label map");
    Ok((best, labels.mask_of(best)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matched_cluster_id: usize,
    pub dsc: f64,
    pub hm: f64,
    pub xor: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn evaluate(labels: &LabelMap, gt: &BinaryMask) -> Result<EvalReport> {
    let (id, pred) = match_largest_overlap(labels, gt)?;
    let c = Confusion::of(&pred, gt)?;
    Ok(EvalReport {
        matched_cluster_id: id,
        dsc: c.dsc(),
        hm: c.hammoude(),
        xor: c.xor()?,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        let mut d = vec![false; h * w];
        for &i in on {
            d[i] = true;
        }
        BinaryMask::new(h, w, d).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = mask(2, 4, &[0, 1, 2, 3]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(2, 4, &[4, 5])).unwrap(), 0.0);
        assert_eq!(dsc(&a, &mask(2, 4, &[2, 3, 4, 5])).unwrap(), 0.5);
        assert_eq!(dsc(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
    }

    #[test]
    fn hammoude_examples() {
        let a = mask(4, 4, &[0, 1, 2]);
        assert_eq!(hammoude(&a, &a).unwrap(), 0.0);
        assert_eq!(hammoude(&a, &mask(4, 4, &[5])).unwrap(), 1.0);
        // union 10, intersection 4
        let p = mask(4, 4, &[0, 1, 2, 3, 4, 5, 6]);
        let g = mask(4, 4, &[3, 4, 5, 6, 7, 8, 9]);
        assert!((hammoude(&p, &g).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(hammoude(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 0.0);
    }

    #[test]
    fn xor_examples() {
        let g = mask(5, 5, &(0..10).collect::<Vec<_>>());
        assert_eq!(xor_measure(&g, &g).unwrap(), 0.0);
        assert_eq!(xor_measure(&mask(5, 5, &[]), &g).unwrap(), 1.0);
        // tp 5, fn 5, fp 8
        let p = mask(5, 5, &(5..18).collect::<Vec<_>>());
        assert!((xor_measure(&p, &g).unwrap() - 1.3).abs() < 1e-15);
        assert!(matches!(xor_measure(&g, &mask(5, 5, &[])), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn overlap_matching() {
        let gt = BinaryMask::from_fn(10, 10, |y, _| y < 7);
        // label 1 covers 31 gt pixels, label 2 covers 30 (plus 9 non-gt)
        let labels: Vec<usize> = (0..100)
            .map(|i| if i < 31 { 1 } else if i < 61 { 2 } else if i < 70 { 0 } else { 2 })
            .collect();
        let labels = LabelMap::new(10, 10, labels).unwrap();
        assert_eq!(match_largest_overlap(&labels, &gt).unwrap().0, 1);

        let inside = LabelMap::new(10, 10, vec![4; 100]).unwrap();
        assert_eq!(match_largest_overlap(&inside, &gt).unwrap().0, 4);
    }

    #[test]
    fn overlap_tie_prefers_smaller_cluster_then_id() {
        let gt = mask(1, 6, &[0, 1, 2, 3]);
        // label 5: 2 overlap, size 3; label 3: 2 overlap, size 2
        let labels = LabelMap::new(1, 6, vec![5, 5, 3, 3, 5, 9]).unwrap();
        assert_eq!(match_largest_overlap(&labels, &gt).unwrap().0, 3);
        let labels = LabelMap::new(1, 6, vec![5, 5, 3, 3, 0, 9]).unwrap();
        assert_eq!(match_largest_overlap(&labels, &gt).unwrap().0, 3);
    }

    #[test]
    fn empty_gt_is_rejected() {
        let labels = LabelMap::filled(3, 3, 0);
        assert!(matches!(evaluate(&labels, &mask(3, 3, &[])), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn shifted_square() {
        let gt = BinaryMask::from_fn(20, 20, |y, x| y < 10 && x < 10);
        let labels: Vec<usize> = (0..400)
            .map(|i| {
                let (y, x) = (i / 20, i % 20);
                usize::from(y < 10 && (5..15).contains(&x))
            })
            .collect();
        let r = evaluate(&LabelMap::new(20, 20, labels).unwrap(), &gt).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (50, 50, 50));
        assert_eq!(r.dsc, 0.5);
        assert!((r.hm - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.xor, 1.0);
    }
}
