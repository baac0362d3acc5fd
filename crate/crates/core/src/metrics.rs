//! Pixel-level confusion counts and the five overlap scores.
//!
//! A score whose denominator is zero is reported as 1: with an empty ground
//! truth and an empty prediction there is nothing to disagree about.

use std::fmt::Write as _;

use crate::tensor::{Scalar, Tensor};
use crate::Error;

/// Default binarisation threshold on sigmoid probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Header of the evaluation report CSV.
pub const REPORT_HEADER: &str = "image_id,tp,tn,fp,fn,di,ja,ac,se,sp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub counts: Confusion,
    pub di: f64,
    pub ja: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
}

/// Count agreement between `pred_prob >= threshold` and a binary ground truth.
pub fn confusion<T: Scalar>(
    pred_prob: &Tensor<T>,
    gt: &Tensor<T>,
    threshold: f64,
) -> Result<Confusion, Error> {
    if pred_prob.shape() != gt.shape() {
        return Err(Error::Invalid(format!(
            "prediction shape {} differs from ground truth {}",
            pred_prob.shape(),
            gt.shape()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred_prob.data().iter().zip(gt.data()) {
        let g = if g == T::one() {
            true
        } else if g == T::zero() {
            false
        } else {
            return Err(Error::Invalid(format!("ground truth value {g} is not binary")));
        };
        match (p.as_f64() >= threshold, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice, Jaccard, accuracy, sensitivity and specificity.
pub fn metrics(c: Confusion) -> MetricReport {
    MetricReport {
        counts: c,
        di: ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp),
        ja: ratio(c.tp, c.tp + c.fn_ + c.fp),
        ac: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
    }
}

/// Arithmetic means of per-image scores (and counts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanReport {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    pub fn_: f64,
    pub di: f64,
    pub ja: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
}

pub fn mean_report(rows: &[(String, MetricReport)]) -> Option<MeanReport> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
    Some(MeanReport {
        tp: mean(&|r| r.counts.tp as f64),
        tn: mean(&|r| r.counts.tn as f64),
        fp: mean(&|r| r.counts.fp as f64),
        fn_: mean(&|r| r.counts.fn_ as f64),
        di: mean(&|r| r.di),
        ja: mean(&|r| r.ja),
        ac: mean(&|r| r.ac),
        se: mean(&|r| r.se),
        sp: mean(&|r| r.sp),
    })
}

/// Render the per-image rows (sorted by id) and a trailing `MEAN` row.
pub fn report_csv(rows: &[(String, MetricReport)]) -> Result<String, Error> {
    let mean = mean_report(rows).ok_or(Error::EmptyDataset)?;
    let mut sorted: Vec<&(String, MetricReport)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    writeln!(out, "{REPORT_HEADER}").unwrap();
    for (id, r) in sorted {
        let c = r.counts;
        writeln!(
            out,
            "{id},{},{},{},{},{:.17},{:.17},{:.17},{:.17},{:.17}",
            c.tp, c.tn, c.fp, c.fn_, r.di, r.ja, r.ac, r.se, r.sp
        )
        .unwrap();
    }
    writeln!(
        out,
        "MEAN,{},{},{},{},{:.17},{:.17},{:.17},{:.17},{:.17}",
        mean.tp, mean.tn, mean.fp, mean.fn_, mean.di, mean.ja, mean.ac, mean.se, mean.sp
    )
    .unwrap();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mask(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn eight_pixel_example() {
        let gt = mask(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let pred = mask(&[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let c = confusion(&pred, &gt, 0.5).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 2,
                tn: 4,
                fp: 1,
                fn_: 1
            }
        );
        let r = metrics(c);
        assert_eq!(r.di, 4.0 / 6.0);
        assert_eq!(r.ja, 0.5);
        assert_eq!(r.ac, 0.75);
        assert_eq!(r.se, 2.0 / 3.0);
        assert_eq!(r.sp, 0.8);
    }

    #[test]
    fn perfect_and_inverted() {
        let gt = mask(&[1.0, 0.0, 1.0, 1.0]);
        let r = metrics(confusion(&gt, &gt, 0.5).unwrap());
        assert_eq!((r.di, r.ja, r.ac, r.se, r.sp), (1.0, 1.0, 1.0, 1.0, 1.0));
        let inv = gt.map(|v| 1.0 - v);
        let c = confusion(&inv, &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn empty_sets_score_one_and_threshold_zero_is_all_positive() {
        let z = mask(&[0.0; 5]);
        let r = metrics(confusion(&z, &z, 0.5).unwrap());
        assert_eq!((r.di, r.ja, r.se), (1.0, 1.0, 1.0));
        let gt = mask(&[1.0, 0.0, 1.0]);
        let low = mask(&[0.0, 0.0, 0.0]);
        let r = metrics(confusion(&low, &gt, 0.0).unwrap());
        assert_eq!(r.se, 1.0);
        assert_eq!(r.counts.fp, 1);
    }

    #[test]
    fn non_binary_truth_is_rejected() {
        assert!(confusion(&mask(&[0.2]), &mask(&[0.5]), 0.5).is_err());
    }

    #[test]
    fn csv_has_mean_row() {
        let a = metrics(Confusion { tp: 1, tn: 1, fp: 0, fn_: 0 });
        let b = metrics(Confusion { tp: 1, tn: 0, fp: 1, fn_: 0 });
        let csv = report_csv(&[("b".into(), b), ("a".into(), a)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert!(lines[1].starts_with("a,"));
        assert!(lines[3].starts_with("MEAN,1,0.5,0.5,0,"));
        assert!(report_csv(&[]).is_err());
    }
}
