//! Accuracy, confusion matrices and per-class precision/recall/F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{LabeledSample, MaterialClass};
use crate::error::{Error, Result};
use crate::mlp::Model;

/// Counts indexed `[true][predicted]` over an ordered class list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<MaterialClass>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<MaterialClass>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn column_total(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Each row as percentages of its true-class count.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// The unordered class pair with the most mutual confusions
    /// (`counts[a][b] + counts[b][a]`); ties go to the earliest pair.
    pub fn most_confused_pair(&self) -> Option<(MaterialClass, MaterialClass, u64)> {
        let mut best: Option<(usize, usize, u64)> = None;
        for a in 0..self.size() {
            for b in a + 1..self.size() {
                let n = self.counts[a][b] + self.counts[b][a];
                if best.is_none_or(|(_, _, m)| n > m) {
                    best = Some((a, b, n));
                }
            }
        }
        best.map(|(a, b, n)| (self.classes[a], self.classes[b], n))
    }

    /// `true\predicted` header row plus one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(c.name());
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table of raw counts.
    pub fn render_counts(&self) -> String {
        self.render(|i, j| self.counts[i][j].to_string())
    }

    /// Aligned text table of row-normalized percentages.
    pub fn render_percent(&self) -> String {
        let pct = self.row_normalized();
        self.render(|i, j| format!("{:.1}", pct[i][j]))
    }

    fn render(&self, cell: impl Fn(usize, usize) -> String) -> String {
        let label_w = self.classes.iter().map(|c| c.name().len()).max().unwrap_or(0).max(4);
        let col_w = self.classes.iter().map(|c| c.name().len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:label_w$}", "true");
        for c in &self.classes {
            write!(out, " {:>col_w$}", c.name()).unwrap();
        }
        out.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            write!(out, "{:label_w$}", c.name()).unwrap();
            for j in 0..self.size() {
                write!(out, " {:>col_w$}", cell(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: MaterialClass,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the metric was 0/0 and reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn per_class_report(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.size())
        .map(|i| {
            let tp = cm.counts[i][i] as f64;
            let (precision, precision_undefined) = ratio(tp, cm.column_total(i) as f64);
            let (recall, recall_undefined) = ratio(tp, cm.row_total(i) as f64);
            let (f1, f1_undefined) = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                class: cm.classes[i],
                support: cm.row_total(i),
                precision,
                recall,
                f1,
                precision_undefined,
                recall_undefined,
                f1_undefined,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
}

impl Evaluation {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Evaluation {
            accuracy: confusion.accuracy(),
            per_class: per_class_report(&confusion),
            confusion,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable summary: accuracy, both confusion tables, per-class metrics.
    pub fn render(&self) -> String {
        let mut out = format!(
            "accuracy: {:.4} ({}/{})\n\nconfusion (counts, rows = true class):\n{}\nconfusion (row %):\n{}\n",
            self.accuracy,
            self.confusion.trace(),
            self.confusion.total(),
            self.confusion.render_counts(),
            self.confusion.render_percent()
        );
        writeln!(out, "{:14} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support").unwrap();
        for m in &self.per_class {
            let flag = |v: f64, undefined: bool| {
                if undefined {
                    format!("{:>8}*", "0.000")
                } else {
                    format!("{v:>9.3}")
                }
            };
            writeln!(
                out,
                "{:14} {} {} {} {:>8}",
                m.class.name(),
                flag(m.precision, m.precision_undefined),
                flag(m.recall, m.recall_undefined),
                flag(m.f1, m.f1_undefined),
                m.support
            )
            .unwrap();
        }
        if self.per_class.iter().any(|m| m.precision_undefined || m.recall_undefined || m.f1_undefined) {
            out.push_str("* undefined (0/0), reported as 0\n");
        }
        out
    }
}

/// Classifies every test sample with `model` and tallies the results.
pub fn evaluate(model: &Model, test: &[LabeledSample]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::domain("test set is empty"));
    }
    let mut cm = ConfusionMatrix::new(model.classes.clone());
    for s in test {
        let truth = model.class_position(s.label).ok_or_else(|| {
            Error::domain(format!("test label {} is not one of the model's classes", s.label))
        })?;
        let (predicted, _, _) = model.classify(&s.features)?;
        let predicted = model.class_position(predicted).expect("model predicts its own classes");
        cm.record(truth, predicted);
    }
    Ok(Evaluation::from_confusion(cm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        let classes = MaterialClass::ALL[..counts.len()].to_vec();
        ConfusionMatrix { classes, counts }
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = cm(vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]);
        assert_eq!(m.accuracy(), 1.0);
        for r in per_class_report(&m) {
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
            assert!(!r.precision_undefined);
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let mut m = ConfusionMatrix::new(MaterialClass::ALL.to_vec());
        for t in 0..7 {
            for _ in 0..10 {
                m.record(t, 0);
            }
        }
        assert!((m.accuracy() - 1.0 / 7.0).abs() < 1e-15);
        let report = per_class_report(&m);
        assert!(report[3].precision_undefined);
        assert_eq!(report[3].precision, 0.0);
        assert!(!report[0].precision_undefined);
    }

    #[test]
    fn hand_matrix() {
        let m = cm(vec![vec![5, 1], vec![2, 4]]);
        let r = per_class_report(&m);
        assert!((r[0].recall - 5.0 / 6.0).abs() < 1e-15);
        assert!((r[0].precision - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!(r[0].support, 6);
        assert_eq!(m.most_confused_pair(), Some((MaterialClass::Control, MaterialClass::PlasticBox, 3)));
    }

    #[test]
    fn balanced_accuracy_equals_mean_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let k = rng.random_range(2..=7);
            let per_row = rng.random_range(1..50u64);
            let mut m = ConfusionMatrix::new(MaterialClass::ALL[..k].to_vec());
            for t in 0..k {
                for _ in 0..per_row {
                    m.record(t, rng.random_range(0..k));
                }
            }
            let mean_recall = per_class_report(&m).iter().map(|r| r.recall).sum::<f64>() / k as f64;
            assert!((m.accuracy() - mean_recall).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_and_tables() {
        let m = cm(vec![vec![5, 1], vec![2, 4]]);
        assert_eq!(m.to_csv(), "true\\predicted,control,plastic_box\ncontrol,5,1\nplastic_box,2,4\n");
        let pct = m.row_normalized();
        assert!((pct[1][0] - 100.0 / 3.0).abs() < 1e-12);
        let table = m.render_percent();
        assert!(table.contains("83.3"));
        let ev = Evaluation::from_confusion(m);
        assert!(ev.render().contains("accuracy: 0.7500"));
    }

    /// A 2→2 linear model that predicts class 0 when x0 > x1, else class 1.
    fn linear_model() -> Model {
        use crate::domain::FeatureMode;
        use crate::features::{PhaseStats, StandardizationParams};
        use crate::mlp::{Dense, Network, NetworkSpec};
        let spec = NetworkSpec::new(2, vec![], 2, 0).unwrap();
        let layer = Dense {
            inputs: 2,
            outputs: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            biases: vec![0.0, 0.0],
        };
        let net = Network::from_parts(spec, vec![layer]).unwrap();
        let std = StandardizationParams {
            mode: FeatureMode::SinglePoint,
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        Model::new(net, vec![MaterialClass::Control, MaterialClass::Backpack], std, PhaseStats::Circular).unwrap()
    }

    fn point(a: f64, b: f64, label: MaterialClass) -> LabeledSample {
        use crate::domain::{FeatureMode, FeatureVector};
        LabeledSample::new(FeatureVector::new(FeatureMode::SinglePoint, vec![a, b]).unwrap(), label)
    }

    #[test]
    fn evaluate_with_model() {
        let model = linear_model();
        let mut test = vec![
            point(2.0, 1.0, MaterialClass::Control),
            point(0.0, 1.0, MaterialClass::Backpack),
            point(3.0, 1.0, MaterialClass::Backpack),
            point(0.5, 0.1, MaterialClass::Control),
        ];
        let ev = evaluate(&model, &test).unwrap();
        assert_eq!(ev.confusion.counts, vec![vec![2, 0], vec![1, 1]]);
        assert_eq!(ev.accuracy, 0.75);
        assert_eq!(ev.confusion.row_total(1), 2);
        test.reverse();
        assert_eq!(evaluate(&model, &test).unwrap(), ev);

        assert!(evaluate(&model, &[]).is_err());
        assert!(evaluate(&model, &[point(1.0, 0.0, MaterialClass::FabricBag)]).is_err());
    }
}
