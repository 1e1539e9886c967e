//! Confusion matrices and precision/recall/F1 reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Intent, NUM_CLASSES};
use crate::error::{Error, Result};

/// Counts indexed `[actual][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Domain(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Domain("no labels to compare".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::Domain(format!("label pair ({t}, {p}) outside 0..=5")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Relabels classes: old class `c` becomes `perm[c]`.
    pub fn permuted(&self, perm: &[usize; NUM_CLASSES]) -> ConfusionMatrix {
        let mut out = ConfusionMatrix::default();
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                out.counts[perm[t]][perm[p]] = self.counts[t][p];
            }
        }
        out
    }

    /// Parses six lines of six whitespace- or comma-separated counts.
    /// Blank lines and `#` comments are ignored.
    pub fn parse_grid(text: &str) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::default();
        let mut row = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: n + 1, message };
            if row == NUM_CLASSES {
                return Err(parse_err("more than six rows".into()));
            }
            let cells: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .collect();
            if cells.len() != NUM_CLASSES {
                return Err(parse_err(format!("expected 6 counts, found {}", cells.len())));
            }
            for (col, cell) in cells.iter().enumerate() {
                cm.counts[row][col] = cell
                    .parse()
                    .map_err(|_| parse_err(format!("{cell:?} is not a non-negative integer")))?;
            }
            row += 1;
        }
        if row != NUM_CLASSES {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: format!("expected 6 rows, found {row}"),
            });
        }
        Ok(cm)
    }

    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Intent,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero and the metric defaulted to 0.
    pub zero_division: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(cm: &ConfusionMatrix) -> MetricReport {
    let classes = Intent::ALL
        .iter()
        .map(|&label| {
            let c = label.index();
            let tp = cm.counts[c][c];
            let p = ratio(tp, cm.col_sum(c));
            let r = ratio(tp, cm.row_sum(c));
            let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label,
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
                zero_division: p.is_none() || r.is_none() || precision + recall == 0.0,
            }
        })
        .collect();
    MetricReport { classes }
}

/// Support-weighted averages of the per-class metrics.
pub fn weighted_metrics(report: &MetricReport) -> Result<Aggregate> {
    let total: u64 = report.classes.iter().map(|c| c.support).sum();
    if total == 0 {
        return Err(Error::Domain("weighted metrics need nonzero total support".into()));
    }
    let avg = |f: fn(&ClassMetrics) -> f64| {
        report.classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
    };
    Ok(Aggregate {
        precision: avg(|c| c.precision),
        recall: avg(|c| c.recall),
        f1: avg(|c| c.f1),
    })
}

/// Unweighted means over all six classes.
pub fn macro_metrics(report: &MetricReport) -> Aggregate {
    let n = report.classes.len().max(1) as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| report.classes.iter().map(f).sum::<f64>() / n;
    Aggregate {
        precision: avg(|c| c.precision),
        recall: avg(|c| c.recall),
        f1: avg(|c| c.f1),
    }
}

/// Everything printed by an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassMetrics>,
    pub weighted: Aggregate,
    #[serde(rename = "macro")]
    pub macro_average: Aggregate,
    pub accuracy: f64,
    pub total: u64,
}

impl EvaluationReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let report = class_metrics(&cm);
        let weighted = weighted_metrics(&report)?;
        Ok(EvaluationReport {
            confusion: cm,
            macro_average: macro_metrics(&report),
            classes: report.classes,
            weighted,
            accuracy: cm.accuracy(),
            total: cm.total(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for c in &self.classes {
            let flag = if c.zero_division { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}",
                c.label.name(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        for (name, a) in [("weighted avg", self.weighted), ("macro avg", self.macro_average)] {
            let _ = writeln!(
                out,
                "{name:<20} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                a.precision, a.recall, a.f1, self.total
            );
        }
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy);
        if self.classes.iter().any(|c| c.zero_division) {
            let _ = writeln!(out, "* zero denominator, metric reported as 0");
        }
        let _ = writeln!(out, "confusion (rows actual, columns predicted):");
        out.push_str(&self.confusion.to_grid());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PERICITE: [[u64; 6]; 6] = [
        [280, 13, 5, 1, 9, 27],
        [46, 21, 1, 0, 3, 3],
        [25, 0, 3, 1, 2, 3],
        [9, 1, 0, 2, 0, 0],
        [28, 3, 1, 1, 17, 5],
        [30, 5, 0, 1, 0, 59],
    ];

    /// Printed class-wise precision, recall and F1 for the matrix above.
    const CLASSWISE: [[f64; 3]; 6] = [
        [0.67, 0.83, 0.74],
        [0.49, 0.28, 0.36],
        [0.30, 0.09, 0.14],
        [0.33, 0.17, 0.22],
        [0.55, 0.31, 0.40],
        [0.61, 0.61, 0.62],
    ];

    #[test]
    fn identity_pairs_fill_the_diagonal() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2]).unwrap();
        let mut want = [[0; 6]; 6];
        for c in 0..3 {
            want[c][c] = 1;
        }
        assert_eq!(cm.counts, want);
    }

    #[test]
    fn off_diagonal_counts() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!((cm.counts[0][0], cm.counts[0][1], cm.counts[1][1]), (1, 1, 1));
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn bad_inputs() {
        assert!(confusion_matrix(&[0, 1], &[0]).is_err());
        assert!(confusion_matrix(&[6], &[0]).is_err());
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn reproduces_published_class_metrics() {
        let report = class_metrics(&ConfusionMatrix::from_counts(PERICITE));
        for (c, want) in report.classes.iter().zip(CLASSWISE) {
            for (k, (got, want)) in [c.precision, c.recall, c.f1].into_iter().zip(want).enumerate() {
                if c.label == Intent::Uses && k == 1 {
                    // printed 0.61 is 59/95 = 0.6211 rounded down; F1 0.62 needs R above 0.61
                    assert!((got - 0.62).abs() <= 0.01);
                    assert!((got - want).abs() < 0.012);
                    continue;
                }
                assert!((got - want).abs() <= 0.01, "{}: {got} vs {want}", c.label);
            }
        }
        let bg = report.classes[0];
        assert!((bg.recall - 280.0 / 335.0).abs() < 1e-12);
    }

    #[test]
    fn reproduces_published_weighted_scores() {
        let report = class_metrics(&ConfusionMatrix::from_counts(PERICITE));
        let w = weighted_metrics(&report).unwrap();
        for (got, want) in [(w.precision, 0.60), (w.recall, 0.63), (w.f1, 0.60)] {
            assert!((got - want).abs() <= 0.01, "{got} vs {want}");
        }
        // the macro reading does not match the published aggregate
        assert!((macro_metrics(&report).f1 - 0.41).abs() < 0.01);
    }

    #[test]
    fn perfect_predictions() {
        let cm = confusion_matrix(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5]).unwrap();
        let report = class_metrics(&cm);
        assert!(report.classes.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
    }

    #[test]
    fn uniform_support_weighted_equals_macro() {
        let cm = confusion_matrix(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5], &[0, 0, 2, 1, 4, 4, 5, 1, 2, 3, 0, 5]).unwrap();
        let report = class_metrics(&cm);
        let (w, m) = (weighted_metrics(&report).unwrap(), macro_metrics(&report));
        assert!((w.precision - m.precision).abs() < 1e-12);
        assert!((w.recall - m.recall).abs() < 1e-12);
        assert!((w.f1 - m.f1).abs() < 1e-12);
    }

    #[test]
    fn single_class_support() {
        let cm = confusion_matrix(&[3, 3, 3, 3], &[3, 3, 0, 1]).unwrap();
        let report = class_metrics(&cm);
        let w = weighted_metrics(&report).unwrap();
        let c = report.classes[3];
        assert_eq!((w.precision, w.recall, w.f1), (c.precision, c.recall, c.f1));
    }

    #[test]
    fn zero_support_is_an_error() {
        let report = class_metrics(&ConfusionMatrix::default());
        assert!(weighted_metrics(&report).is_err());
        assert!(report.classes.iter().all(|c| c.zero_division && c.f1 == 0.0));
    }

    #[test]
    fn grid_round_trip() {
        let cm = ConfusionMatrix::from_counts(PERICITE);
        assert_eq!(ConfusionMatrix::parse_grid(&cm.to_grid()).unwrap(), cm);
        let commented = format!("# pericite\n\n{}", cm.to_grid().replace(' ', ", "));
        assert_eq!(ConfusionMatrix::parse_grid(&commented).unwrap(), cm);
        assert!(matches!(
            ConfusionMatrix::parse_grid("1 2 3\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(ConfusionMatrix::parse_grid("1 2 3 4 5 6\n").is_err());
    }

    #[test]
    fn report_renders() {
        let r = EvaluationReport::from_confusion(ConfusionMatrix::from_counts(PERICITE)).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["classes"][0]["label"], 0);
        assert!(json["macro"]["f1"].is_number());
        assert!(r.to_text().contains("BACKGROUND"));
    }

    fn labels() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..6, n),
                proptest::collection::vec(0usize..6, n),
            )
        })
    }

    proptest! {
        #[test]
        fn row_sums_match_truth_histogram((truth, pred) in labels()) {
            let cm = confusion_matrix(&truth, &pred).unwrap();
            for c in 0..6 {
                prop_assert_eq!(cm.row_sum(c), truth.iter().filter(|&&t| t == c).count() as u64);
            }
        }

        #[test]
        fn weighted_recall_is_accuracy((truth, pred) in labels()) {
            let cm = confusion_matrix(&truth, &pred).unwrap();
            let w = weighted_metrics(&class_metrics(&cm)).unwrap();
            prop_assert!((w.recall - cm.accuracy()).abs() < 1e-12);
        }

        #[test]
        fn metrics_follow_label_permutation(
            (truth, pred) in labels(),
            perm in Just([0usize, 1, 2, 3, 4, 5]).prop_shuffle(),
        ) {
            let cm = confusion_matrix(&truth, &pred).unwrap();
            let perm: [usize; 6] = perm;
            let pt: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
            let pp: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let moved = confusion_matrix(&pt, &pp).unwrap();
            prop_assert_eq!(moved, cm.permuted(&perm));
            let (a, b) = (class_metrics(&cm), class_metrics(&moved));
            for c in 0..6 {
                let (x, y) = (a.classes[c], b.classes[perm[c]]);
                prop_assert_eq!((x.precision, x.recall, x.f1, x.support), (y.precision, y.recall, y.f1, y.support));
            }
            let (wa, wb) = (weighted_metrics(&a).unwrap(), weighted_metrics(&b).unwrap());
            prop_assert!((wa.f1 - wb.f1).abs() < 1e-12);
        }

        #[test]
        fn values_in_unit_interval((truth, pred) in labels()) {
            let report = class_metrics(&confusion_matrix(&truth, &pred).unwrap());
            for c in &report.classes {
                for v in [c.precision, c.recall, c.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                let hm = if c.precision + c.recall > 0.0 {
                    2.0 * c.precision * c.recall / (c.precision + c.recall)
                } else { 0.0 };
                prop_assert_eq!(c.f1, hm);
            }
        }
    }
}
