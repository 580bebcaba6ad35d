//! Accuracy-matrix bookkeeping, the summary metrics derived from it, and
//! scenario-aware evaluation of a trained state.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datio::{check_label_structure, EmbeddingDataset, Scenario};
use crate::engine::{predict, predict_given_task, predict_marginal, tii_probs, ModelState};
use crate::error::{Error, Result};
use crate::numerics::argmax;

/// Lower-triangular grid: row `t` (0-based) holds the accuracy on tasks
/// `0..=t` measured right after learning task `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<RawMatrix> for AccuracyMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Self::from_rows(raw.rows)
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let want = self.rows.len() + 1;
        if row.len() != want {
            return Err(Error::Dimension(format!("row {} needs {want} entries, got {}", self.rows.len(), row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of tasks learned, `T`.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracy on task `i` after learning task `t` (both 0-based, `i <= t`).
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }
}

/// Mean accuracy over the first `t` tasks after learning the `t`-th
/// (`1 <= t <= T`).
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t == 0 || t > m.tasks() {
        return Err(Error::Index { index: t, len: m.tasks() });
    }
    let row = &m.rows[t - 1];
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// Final average accuracy, `AA_T`.
pub fn faa(m: &AccuracyMatrix) -> Result<f64> {
    if m.tasks() == 0 {
        return Err(Error::UndefinedMetric("FAA of an empty matrix".into()));
    }
    average_accuracy(m, m.tasks())
}

/// Cumulative average accuracy, the mean of `AA_1..AA_T`.
pub fn caa(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::UndefinedMetric("CAA of an empty matrix".into()));
    }
    let mut sum = 0.0;
    for k in 1..=t {
        sum += average_accuracy(m, k)?;
    }
    Ok(sum / t as f64)
}

/// Final forgetting measure: for each task but the last, the largest drop
/// from any earlier measurement to the final one, averaged.
pub fn ffm(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric("forgetting needs at least two tasks".into()));
    }
    let last = &m.rows[t - 1];
    let mut sum = 0.0;
    for i in 0..t - 1 {
        let drop = (i..t - 1).map(|k| m.rows[k][i] - last[i]).fold(f64::NEG_INFINITY, f64::max);
        sum += drop;
    }
    Ok(sum / (t - 1) as f64)
}

pub(crate) fn check_test_sets(state: &ModelState, test_sets: &[&EmbeddingDataset], scenario: Scenario) -> Result<()> {
    if test_sets.is_empty() {
        return Err(Error::Data("no test sets".into()));
    }
    if test_sets.len() > state.tasks() {
        return Err(Error::State(format!("{} test sets but only {} trained tasks", test_sets.len(), state.tasks())));
    }
    check_label_structure(scenario, &state.task_labels[..test_sets.len()])?;
    for (i, ds) in test_sets.iter().enumerate() {
        if ds.is_empty() {
            return Err(Error::Data(format!("test set {i} is empty")));
        }
        if let Some(s) = ds.samples.iter().find(|s| state.task_labels[i].binary_search(&s.class_id).is_err()) {
            return Err(Error::Scenario(format!("test set {i} holds class {} outside task {i}'s labels", s.class_id)));
        }
    }
    Ok(())
}

/// Top-1 accuracy on each test set (set `i` belongs to task `i`). CIL uses
/// two-stage prediction, DIL the task-marginalised class distribution and
/// TIL the given task's adapter and classes.
pub fn evaluate_scenario(state: &ModelState, test_sets: &[&EmbeddingDataset], scenario: Scenario) -> Result<Vec<f64>> {
    check_test_sets(state, test_sets, scenario)?;
    let mut out = Vec::with_capacity(test_sets.len());
    for (i, ds) in test_sets.iter().enumerate() {
        let mut correct = 0usize;
        for s in &ds.samples {
            let y = match scenario {
                Scenario::Cil => predict(state, &s.features)?.class_id,
                Scenario::Dil => predict_marginal(state, &s.features)?.0,
                Scenario::Til => predict_given_task(state, &s.features, i)?.0,
            };
            correct += usize::from(y == s.class_id);
        }
        out.push(correct as f64 / ds.len() as f64);
    }
    Ok(out)
}

/// Fraction of samples whose predicted task matches the set they came from.
pub fn tii_accuracy(state: &ModelState, test_sets: &[&EmbeddingDataset]) -> Result<f64> {
    if test_sets.is_empty() || test_sets.len() > state.tasks() {
        return Err(Error::Data("test sets must cover 1..=T trained tasks".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, ds) in test_sets.iter().enumerate() {
        for s in &ds.samples {
            let p = tii_probs(state, &s.features)?;
            correct += usize::from(argmax(&p) == Some(i));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("test sets are empty".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// The matrix and its summary metrics as written by `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub matrix: AccuracyMatrix,
    pub faa: f64,
    pub caa: f64,
    /// Absent for single-task runs.
    pub ffm: Option<f64>,
    pub tii_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn from_matrix(scenario: Scenario, matrix: AccuracyMatrix, tii_accuracy: Option<f64>) -> Result<Self> {
        let faa = faa(&matrix)?;
        let caa = caa(&matrix)?;
        let ffm = match ffm(&matrix) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { scenario, matrix, faa, caa, ffm, tii_accuracy })
    }
}

/// Plain-text rendering: one line per learned task, then the metrics.
pub fn render_table(report: &MetricsReport) -> String {
    let t = report.matrix.tasks();
    let mut s = String::new();
    let _ = write!(s, "{:>8}", "after");
    for i in 0..t {
        let _ = write!(s, " {:>7}", format!("T{}", i + 1));
    }
    s.push('\n');
    for (k, row) in report.matrix.rows().iter().enumerate() {
        let _ = write!(s, "{:>8}", format!("T{}", k + 1));
        for v in row {
            let _ = write!(s, " {:>7.4}", v);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "scenario {}", report.scenario);
    let _ = writeln!(s, "FAA {:.4}", report.faa);
    let _ = writeln!(s, "CAA {:.4}", report.caa);
    match report.ffm {
        Some(v) => {
            let _ = writeln!(s, "FFM {v:.4}");
        }
        None => s.push_str("FFM undefined (single task)\n"),
    }
    if let Some(v) = report.tii_accuracy {
        let _ = writeln!(s, "TII accuracy {v:.4}");
    }
    s
}

/// Heatmap of the matrix as a standalone SVG document.
pub fn render_svg(m: &AccuracyMatrix) -> String {
    let cell = 40;
    let margin = 50;
    let t = m.tasks();
    let size = margin + cell * t + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    );
    for (k, row) in m.rows().iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            // white at 0, dark blue at 1
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let x = margin + cell * i;
            let y = margin + cell * k;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#888"/>"##
            );
            let text_fill = if *v > 0.6 { "#fff" } else { "#000" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{text_fill}">{:.2}</text>"#,
                x + cell / 2,
                y + cell / 2 + 4,
                v
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">T{}</text>"#, margin - 6, margin + cell * k + cell / 2 + 4, k + 1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">T{}</text>"#, margin + cell * k + cell / 2, margin - 8, k + 1);
    }
    s.push_str("</svg>\n");
    s
}
