//! Nested evaluation: train a forest on a (possibly synthetic) training set,
//! sweep decision thresholds on real test data and report per-class and
//! macro-averaged F1.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FlowDataset, Label, Lineage};
use crate::forest::{train_forest, ForestConfig, ForestError};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.2, 0.4, 0.5, 0.6, 0.8];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("test set is empty")]
    EmptyTest,
    #[error("thresholds must be strictly increasing and within [0, 1]")]
    BadThresholds,
    #[error("{0} probabilities for {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rows are the true label, columns the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

/// Predicts class 1 iff `prob > t`.
pub fn confusion_at_threshold(
    probs: &[f64],
    labels: &[Label],
    t: f64,
) -> Result<ConfusionMatrix, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch(probs.len(), labels.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in probs.iter().zip(labels) {
        match (l, p > t) {
            (Label::Normal, false) => cm.tn += 1,
            (Label::Normal, true) => cm.fp += 1,
            (Label::Mining, false) => cm.fn_ += 1,
            (Label::Mining, true) => cm.tp += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassScores {
    fn from_counts(hit: u64, false_pos: u64, false_neg: u64) -> Self {
        let precision = ratio(hit, hit + false_pos);
        let recall = ratio(hit, hit + false_neg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub class0: ClassScores,
    pub class1: ClassScores,
    pub macro_f1: f64,
}

/// Per-class scores and their unweighted mean F1.
pub fn macro_f1(cm: &ConfusionMatrix) -> F1Scores {
    let class1 = ClassScores::from_counts(cm.tp, cm.fp, cm.fn_);
    let class0 = ClassScores::from_counts(cm.tn, cm.fn_, cm.fp);
    F1Scores {
        class0,
        class1,
        macro_f1: (class0.f1 + class1.f1) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub scores: F1Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Checkpoints or datasets that produced the training set.
    pub ids: Vec<String>,
    pub train_counts: [usize; 2],
    pub test_size: usize,
    pub lineage: Lineage,
    pub results: Vec<ThresholdResult>,
    /// Warnings such as a collapsed generator.
    #[serde(default)]
    pub flags: Vec<String>,
}

impl EvalReport {
    /// Highest macro-F1; ties go to the lower threshold.
    pub fn best(&self) -> &ThresholdResult {
        let mut best = &self.results[0];
        for r in &self.results[1..] {
            if r.scores.macro_f1 > best.scores.macro_f1 {
                best = r;
            }
        }
        best
    }

    pub fn best_macro_f1(&self) -> f64 {
        self.best().scores.macro_f1
    }

    pub const CSV_HEADER: &'static str =
        "ids,threshold,tn,fp,fn,tp,p0,r0,f0,p1,r1,f1,macro_f1";

    /// One row per threshold, ids joined by `+`.
    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "{}", Self::CSV_HEADER)?;
        }
        let ids = self.ids.join("+");
        for r in &self.results {
            let (c, s) = (&r.confusion, &r.scores);
            writeln!(
                out,
                "{ids},{},{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.threshold,
                c.tn,
                c.fp,
                c.fn_,
                c.tp,
                s.class0.precision,
                s.class0.recall,
                s.class0.f1,
                s.class1.precision,
                s.class1.recall,
                s.class1.f1,
                s.macro_f1
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub forest: ForestConfig,
    pub thresholds: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            forest: ForestConfig::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl EvalOptions {
    pub fn with_trees(mut self, n_trees: usize, seed: u64) -> Self {
        self.forest = ForestConfig { n_trees, seed };
        self
    }

    fn validate(&self) -> Result<(), EvalError> {
        let t = &self.thresholds;
        if t.is_empty()
            || t.iter().any(|v| !(0.0..=1.0).contains(v))
            || t.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EvalError::BadThresholds);
        }
        Ok(())
    }
}

/// Threshold sweep for given probabilities.
pub fn sweep(
    probs: &[f64],
    labels: &[Label],
    thresholds: &[f64],
) -> Result<Vec<ThresholdResult>, EvalError> {
    thresholds
        .iter()
        .map(|&t| {
            let confusion = confusion_at_threshold(probs, labels, t)?;
            Ok(ThresholdResult {
                threshold: t,
                confusion,
                scores: macro_f1(&confusion),
            })
        })
        .collect()
}

/// Trains a forest on `train` and scores it on `test`.
pub fn evaluate_training_set(
    train: &FlowDataset,
    test: &FlowDataset,
    options: &EvalOptions,
    ids: Vec<String>,
) -> Result<EvalReport, EvalError> {
    options.validate()?;
    if train.is_empty() {
        return Err(EvalError::EmptyTraining);
    }
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let forest = train_forest(train, options.forest)?;
    let probs = forest.predict_proba(test)?;
    Ok(EvalReport {
        ids,
        train_counts: [
            train.class_count(Label::Normal),
            train.class_count(Label::Mining),
        ],
        test_size: test.len(),
        lineage: train.lineage().clone(),
        results: sweep(&probs, test.labels(), &options.thresholds)?,
        flags: Vec::new(),
    })
}

/// True when every row is the same point up to a relative `1e-9` spread.
pub fn is_degenerate(ds: &FlowDataset) -> bool {
    if ds.len() < 2 {
        return false;
    }
    (0..ds.dimension()).all(|j| {
        let (lo, hi) = ds
            .column(j)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                (a.min(x), b.max(x))
            });
        hi - lo <= 1e-9 * hi.abs().max(lo.abs()).max(1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_two_matrices() {
        let s = macro_f1(&ConfusionMatrix::new(399817, 183, 459, 3929));
        assert!((s.macro_f1 - 0.962).abs() <= 0.001);
        assert!((s.class1.f1 - 0.925).abs() <= 0.001);
        assert!((s.class0.f1 - 0.999).abs() <= 0.001);
        let s = macro_f1(&ConfusionMatrix::new(399877, 123, 1008, 3380));
        assert!((s.macro_f1 - 0.928).abs() <= 0.001);
    }

    #[test]
    fn perfect_matrix() {
        assert_eq!(macro_f1(&ConfusionMatrix::new(10, 0, 0, 3)).macro_f1, 1.0);
    }

    #[test]
    fn empty_denominators_are_zero() {
        let s = macro_f1(&ConfusionMatrix::new(5, 0, 3, 0));
        assert_eq!(s.class1.precision, 0.0);
        assert_eq!(s.class1.recall, 0.0);
        assert_eq!(s.class1.f1, 0.0);
        assert_eq!(macro_f1(&ConfusionMatrix::default()).macro_f1, 0.0);
    }

    #[test]
    fn zero_threshold_predicts_all_positive() {
        let labels = [Label::Normal, Label::Mining, Label::Normal];
        let cm = confusion_at_threshold(&[0.1, 0.5, 0.9], &labels, 0.0).unwrap();
        assert_eq!((cm.tn, cm.fn_), (0, 0));
        let cm = confusion_at_threshold(&[0.0, 1.0, 0.0], &labels, 0.5).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
    }

    #[test]
    fn best_prefers_lower_threshold_on_tie() {
        let labels = [Label::Normal, Label::Mining];
        let r = sweep(&[0.0, 1.0], &labels, &DEFAULT_THRESHOLDS).unwrap();
        let report = EvalReport {
            ids: vec![],
            train_counts: [1, 1],
            test_size: 2,
            lineage: Lineage::real("t"),
            results: r,
            flags: vec![],
        };
        assert_eq!(report.best().threshold, 0.2);
    }

    #[test]
    fn csv_row_per_threshold() {
        let labels = [Label::Normal, Label::Mining];
        let report = EvalReport {
            ids: vec!["a".into(), "b".into()],
            train_counts: [1, 1],
            test_size: 2,
            lineage: Lineage::real("t"),
            results: sweep(&[0.3, 0.7], &labels, &DEFAULT_THRESHOLDS).unwrap(),
            flags: vec![],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().starts_with("a+b,0.2,"));
    }

    #[test]
    fn degenerate_detection() {
        let ds = FlowDataset::single_class(2, vec![1.0, 2.0, 1.0, 2.0], Label::Normal, Lineage::real("x"))
            .unwrap();
        assert!(is_degenerate(&ds));
        let ds = FlowDataset::single_class(2, vec![1.0, 2.0, 1.0, 2.5], Label::Normal, Lineage::real("x"))
            .unwrap();
        assert!(!is_degenerate(&ds));
    }
}
