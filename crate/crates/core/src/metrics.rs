//! Evaluation metrics: accuracy, precision, recall, F1 over the binary
//! fake/real decision. Fake (label 1) is the positive class; 0/0 ratios
//! collapse to 0.

use std::fmt::Write as _;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn observe(&mut self, predicted: u8, actual: u8) {
        match (predicted, actual) {
            (1, 1) => self.tp += 1,
            (1, 0) => self.fp += 1,
            (0, 0) => self.tn += 1,
            (0, 1) => self.fn_ += 1,
            _ => panic!("labels must be binary"),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Mean classification loss over the evaluated split.
    pub mean_loss: f64,
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion, mean_loss: f64) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let accuracy = ratio(c.tp + c.tn, c.total());
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            confusion: c,
            mean_loss,
        }
    }

    /// `metric,value` CSV rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            let _ = writeln!(out, "{name},{v:.6}");
        }
        let c = self.confusion;
        let _ = writeln!(out, "tp,{}", c.tp);
        let _ = writeln!(out, "fp,{}", c.fp);
        let _ = writeln!(out, "tn,{}", c.tn);
        let _ = writeln!(out, "fn,{}", c.fn_);
        out
    }

    pub fn table(&self) -> String {
        format!(
            "accuracy  {:.4}\nprecision {:.4}\nrecall    {:.4}\nf1        {:.4}\n(tp {} fp {} tn {} fn {})\n",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.confusion.tp,
            self.confusion.fp,
            self.confusion.tn,
            self.confusion.fn_,
        )
    }
}
