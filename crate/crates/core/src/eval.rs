//! Confusion matrices and macro-averaged metrics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::{Axis, MbtiLabel};
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::heads::{classifier_forward, head_forward, ClassifierTask, HeadParams, Mode, TrainedTask};
use crate::linalg::argmax;

/// `counts[true][predicted]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Shape(format!(
                "class index ({truth}, {predicted}) outside [0, {})",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let c = self.classes;
        let mut out = ConfusionMatrix::new(c);
        for t in 0..c {
            for p in 0..c {
                out.counts[p * c + t] = self.get(t, p);
            }
        }
        out
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// Tallies `(label, prediction)` pairs into a `classes × classes` matrix.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy plus unweighted class means of precision, recall and F1.
/// Any 0/0 is taken as 0.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let c = cm.classes();
    let (mut p_sum, mut r_sum, mut f_sum, mut trace) = (0.0, 0.0, 0.0, 0u64);
    for k in 0..c {
        let tp = cm.get(k, k);
        let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
        let actual: u64 = (0..c).map(|p| cm.get(k, p)).sum();
        let precision = ratio(tp as f64, predicted as f64);
        let recall = ratio(tp as f64, actual as f64);
        p_sum += precision;
        r_sum += recall;
        f_sum += ratio(2.0 * precision * recall, precision + recall);
        trace += tp;
    }
    let c = c as f64;
    Ok(MacroMetrics {
        accuracy: trace as f64 / total as f64,
        precision: p_sum / c,
        recall: r_sum / c,
        f1: f_sum / c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimReport {
    pub axis: &'static str,
    #[serde(flatten)]
    pub metrics: MacroMetrics,
}

/// Evaluation summary. For the dims task the top-level metrics are the means
/// over the four axes and `avg_f1` is the mean of the per-axis macro-F1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: String,
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<DimReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_f1: Option<f64>,
}

impl MetricsReport {
    /// The number model selection looks at: Avg for dims, macro-F1 for type16.
    pub fn headline_f1(&self) -> f64 {
        self.avg_f1.unwrap_or(self.f1)
    }

    /// Flat `name -> value` view used for multi-run aggregation.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("accuracy".to_string(), self.accuracy),
            ("precision".to_string(), self.precision),
            ("recall".to_string(), self.recall),
            ("f1".to_string(), self.f1),
        ];
        if let Some(dims) = &self.dims {
            for d in dims {
                out.push((format!("f1_{}", d.axis), d.metrics.f1));
            }
        }
        if let Some(avg) = self.avg_f1 {
            out.push(("avg_f1".to_string(), avg));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table; dims reports use the column order E/I, S/N, T/F, J/P, Avg.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        match &self.dims {
            Some(dims) => {
                let _ = writeln!(s, "{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}", "metric", "E/I", "S/N", "T/F", "J/P", "Avg");
                let rows: [(&str, fn(&MacroMetrics) -> f64); 4] = [
                    ("Macro-F1", |m| m.f1),
                    ("ACC", |m| m.accuracy),
                    ("P", |m| m.precision),
                    ("R", |m| m.recall),
                ];
                for (name, get) in rows {
                    let _ = write!(s, "{name:<10}");
                    let values: Vec<f64> = dims.iter().map(|d| get(&d.metrics)).collect();
                    for v in &values {
                        let _ = write!(s, "{:>8.2}", 100.0 * v);
                    }
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    let _ = writeln!(s, "{:>8.2}", 100.0 * mean);
                }
            }
            None => {
                let _ = writeln!(s, "{:<10}{:>8}{:>8}{:>8}{:>8}", "task", "ACC", "P", "R", "F1");
                let _ = writeln!(
                    s,
                    "{:<10}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
                    self.task,
                    100.0 * self.accuracy,
                    100.0 * self.precision,
                    100.0 * self.recall,
                    100.0 * self.f1
                );
            }
        }
        let _ = writeln!(s, "n = {}", self.samples);
        s
    }
}

/// Builds a report from predicted and true labels.
pub fn report_from_labels(task: TrainedTask, predicted: &[MbtiLabel], truth: &[MbtiLabel]) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    match task {
        TrainedTask::Type16 => {
            let p: Vec<usize> = predicted.iter().map(MbtiLabel::type_index).collect();
            let t: Vec<usize> = truth.iter().map(MbtiLabel::type_index).collect();
            let m = macro_metrics(&confusion_matrix(&p, &t, 16)?)?;
            Ok(MetricsReport {
                task: task.to_string(),
                samples: truth.len(),
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                dims: None,
                avg_f1: None,
            })
        }
        TrainedTask::Dims => {
            let mut dims = Vec::with_capacity(4);
            for axis in Axis::ALL {
                let p: Vec<usize> = predicted.iter().map(|l| l.pole(axis)).collect();
                let t: Vec<usize> = truth.iter().map(|l| l.pole(axis)).collect();
                dims.push(DimReport {
                    axis: axis.header(),
                    metrics: macro_metrics(&confusion_matrix(&p, &t, 2)?)?,
                });
            }
            let mean = |f: fn(&MacroMetrics) -> f64| dims.iter().map(|d| f(&d.metrics)).sum::<f64>() / 4.0;
            let f1 = mean(|m| m.f1);
            Ok(MetricsReport {
                task: task.to_string(),
                samples: truth.len(),
                accuracy: mean(|m| m.accuracy),
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1,
                avg_f1: Some(f1),
                dims: Some(dims),
            })
        }
    }
}

/// Eval-mode prediction for one user.
pub fn predict(params: &HeadParams, sequence: &[Embedding], task: TrainedTask) -> Result<MbtiLabel> {
    let (h, _) = head_forward(params, sequence, Mode::Eval)?;
    match task {
        TrainedTask::Type16 => {
            let logits = classifier_forward(params, &h, ClassifierTask::Type16)?;
            MbtiLabel::from_type_index(argmax(&logits))
        }
        TrainedTask::Dims => {
            let mut poles = [false; 4];
            for axis in Axis::ALL {
                let logits = classifier_forward(params, &h, ClassifierTask::Dim(axis))?;
                poles[axis.index()] = argmax(&logits) == 1;
            }
            Ok(MbtiLabel::from_poles(poles))
        }
    }
}

/// Runs the head over every user and scores its predictions.
pub fn evaluate(params: &HeadParams, users: &[(MbtiLabel, Vec<Embedding>)], task: TrainedTask) -> Result<MetricsReport> {
    if users.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut predicted = Vec::with_capacity(users.len());
    let mut truth = Vec::with_capacity(users.len());
    for (label, seq) in users {
        predicted.push(predict(params, seq, task)?);
        truth.push(*label);
    }
    report_from_labels(task, &predicted, &truth)
}
