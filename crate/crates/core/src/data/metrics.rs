//! Confusion counts and the derived binary change metrics.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

/// 1 where `p >= threshold`.
pub fn binarize<T: Real>(p: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::lit(threshold);
    Tensor::new(
        p.shape(),
        p.data()
            .iter()
            .map(|&v| if v >= t { T::one() } else { T::zero() })
            .collect(),
    )
    .expect("same shape")
}

/// Counts over two binary maps of equal shape (nonzero means changed).
pub fn confusion<T: Real>(p_bin: &Tensor<T>, mask: &Tensor<T>) -> Result<Confusion> {
    if p_bin.len() != mask.len() {
        return Err(Error::shape("confusion", p_bin.shape(), mask.shape()));
    }
    let mut c = Confusion::default();
    for (&p, &m) in p_bin.data().iter().zip(mask.data()) {
        match (p != T::zero(), m != T::zero()) {
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
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1, IoU and overall accuracy. With nothing to find
/// and nothing found the first four are 1; otherwise a zero denominator
/// gives 0.
pub fn metrics(c: Confusion) -> MetricsReport {
    let (precision, recall, f1, iou) = if c.tp + c.fp + c.fn_ == 0 {
        (1.0, 1.0, 1.0, 1.0)
    } else {
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1, ratio(c.tp, c.tp + c.fp + c.fn_))
    };
    MetricsReport {
        tp: c.tp,
        tn: c.tn,
        fp: c.fp,
        fn_: c.fn_,
        precision,
        recall,
        f1,
        iou,
        oa: ratio(c.tp + c.tn, c.total()),
    }
}

impl MetricsReport {
    pub fn counts(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            tn: self.tn,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Confusion {
        Confusion { tp, tn, fp, fn_ }
    }

    #[test]
    fn worked_example() {
        let m = metrics(counts(50, 100, 50, 50));
        assert_eq!((m.precision, m.recall, m.f1, m.oa), (0.5, 0.5, 0.5, 0.6));
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn conventions() {
        let perfect = metrics(counts(10, 5, 0, 0));
        assert_eq!([perfect.precision, perfect.recall, perfect.f1, perfect.iou, perfect.oa], [1.0; 5]);
        let nothing = metrics(counts(0, 9, 0, 0));
        assert_eq!([nothing.precision, nothing.recall, nothing.f1, nothing.iou], [1.0; 4]);
        let missed = metrics(counts(0, 9, 0, 4));
        assert_eq!([missed.precision, missed.recall, missed.f1, missed.iou], [0.0; 4]);
    }

    #[test]
    fn confusion_cases() {
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let inv = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let c = confusion(&mask, &mask).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&inv, &mask).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&mask, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn binarize_uses_ge() {
        let b = binarize(&Tensor::full(&[2, 2], 0.6f64), 0.5);
        assert!(b.data().iter().all(|&v| v == 1.0));
        let b = binarize(&Tensor::full(&[2, 2], 0.5f64), 0.5);
        assert!(b.data().iter().all(|&v| v == 1.0));
        let b = binarize(&Tensor::full(&[1], 0.49f64), 0.5);
        assert_eq!(b.data(), &[0.0]);
    }

    #[test]
    fn json_field_names() {
        let j = metrics(counts(1, 2, 3, 4)).to_json();
        for k in ["\"tp\"", "\"tn\"", "\"fp\"", "\"fn\"", "\"precision\"", "\"recall\"", "\"f1\"", "\"iou\"", "\"oa\""] {
            assert!(j.contains(k), "{j}");
        }
    }
}
