//! CSV and JSON artifacts.
//!
//! Every writer returns the document as a `String` so it can be shown in a
//! browser as well as written to disk with [`write_text`].

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::analysis::{EcsComparison, EcsReport, InterventionMatrix, NullDependency, SufficiencyHistogram};
use crate::error::{Error, Result};
use crate::modmetrics::BiClustering;
use crate::numerics::Matrix;
use crate::trainer::TrainHistory;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(header.iter().map(|h| h.as_ref()))
            .expect("in-memory write");
        Self { writer }
    }

    fn row(&mut self, fields: Vec<String>) {
        self.writer.write_record(&fields).expect("in-memory write");
    }

    fn finish(self) -> String {
        let bytes = self.writer.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("csv output is UTF-8")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `step, ce_loss, eff_loss, clusterability_layer{l}…, train_acc, test_acc`.
/// Clusterability cells are empty before clusterings are selected.
pub fn history_csv(history: &TrainHistory) -> String {
    let mut header = vec!["step".to_string(), "ce_loss".into(), "eff_loss".into()];
    header.extend(history.clustered_layers.iter().map(|l| format!("clusterability_layer{l}")));
    header.extend(["train_acc".into(), "test_acc".into()]);
    let mut t = Table::new(&header);
    for r in &history.records {
        let mut row = vec![r.step.to_string(), r.ce_loss.to_string(), r.eff_loss.to_string()];
        row.extend(r.clusterability.iter().map(|&c| opt(c)));
        row.extend([r.train_acc.to_string(), r.test_acc.to_string()]);
        t.row(row);
    }
    t.finish()
}

/// `mode, layer, cluster, class, accuracy`; classes without samples have an
/// empty accuracy.
pub fn interventions_csv(matrices: &[InterventionMatrix]) -> String {
    let mut t = Table::new(&["mode", "layer", "cluster", "class", "accuracy"]);
    for m in matrices {
        for (c, row) in m.accuracy.iter().enumerate() {
            for (y, &a) in row.iter().enumerate() {
                t.row(vec![m.mode.to_string(), m.layer.to_string(), c.to_string(), y.to_string(), opt(a)]);
            }
        }
    }
    t.finish()
}

/// `layer, s, not_sufficient, count, fraction` with `not_sufficient = k - s`.
pub fn sufficiency_csv(histograms: &[SufficiencyHistogram]) -> String {
    let mut t = Table::new(&["layer", "s", "not_sufficient", "count", "fraction"]);
    for h in histograms {
        for (s, &count) in h.counts.iter().enumerate() {
            t.row(vec![
                h.layer.to_string(),
                s.to_string(),
                (h.k - s).to_string(),
                count.to_string(),
                h.fraction(s).to_string(),
            ]);
        }
    }
    t.finish()
}

/// `layer, modules_on, eligible, unsolved, fraction`.
pub fn null_dependency_csv(rows: &[(usize, NullDependency)]) -> String {
    let mut t = Table::new(&["layer", "modules_on", "eligible", "unsolved", "fraction"]);
    for (layer, n) in rows {
        t.row(vec![
            layer.to_string(),
            n.modules_on.to_string(),
            n.eligible_count.to_string(),
            n.unsolved.to_string(),
            n.fraction.to_string(),
        ]);
    }
    t.finish()
}

pub fn ecs_csv(reports: &[EcsReport]) -> String {
    let mut t = Table::new(&["label", "ecs", "nonzero", "total"]);
    for r in reports {
        t.row(vec![r.label.to_string(), r.ecs.to_string(), r.nonzero.to_string(), r.total.to_string()]);
    }
    t.finish()
}

/// One row per label plus a final `mean` row.
pub fn ecs_compare_csv(cmp: &EcsComparison) -> String {
    let mut t = Table::new(&["label", "pct_increase", "ecs_a", "ecs_b"]);
    for r in &cmp.rows {
        t.row(vec![r.label.to_string(), r.pct_increase.to_string(), r.ecs_a.to_string(), r.ecs_b.to_string()]);
    }
    t.row(vec!["mean".into(), cmp.mean_pct_increase.to_string(), String::new(), String::new()]);
    t.finish()
}

/// Long-format weight heatmap with each entry's module membership.
pub fn heatmap_csv(w: &Matrix, clustering: Option<&BiClustering>) -> String {
    let mut t = Table::new(&["row", "col", "weight", "row_cluster", "col_cluster", "same_module"]);
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let (rc, cc, same) = match clustering {
                Some(c) => (
                    c.row_assign()[i].to_string(),
                    c.col_assign()[j].to_string(),
                    u8::from(c.same_module(i, j)).to_string(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            t.row(vec![i.to_string(), j.to_string(), w[(i, j)].to_string(), rc, cc, same]);
        }
    }
    t.finish()
}

/// One calculator evaluation for `theory.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    pub calculator: String,
    pub inputs: String,
    /// Exact decimal value, when the calculator produces an integer.
    pub exact: Option<String>,
    pub log2: f64,
    pub ln: f64,
}

pub fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut t = Table::new(&["calculator", "inputs", "exact", "log2", "ln"]);
    for r in rows {
        t.row(vec![
            r.calculator.clone(),
            r.inputs.clone(),
            r.exact.clone().unwrap_or_default(),
            r.log2.to_string(),
            r.ln.to_string(),
        ]);
    }
    t.finish()
}

/// Clusterability of one layer under one clustering choice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepRow {
    pub layer: usize,
    pub k: usize,
    pub source: String,
    pub clusterability: f64,
    /// Expected clusterability of a random clustering with the same `k`.
    pub baseline: f64,
}

pub fn clusterability_vs_k_csv(rows: &[KSweepRow]) -> String {
    let mut t = Table::new(&["layer", "k", "source", "clusterability", "baseline"]);
    for r in rows {
        t.row(vec![
            r.layer.to_string(),
            r.k.to_string(),
            r.source.clone(),
            r.clusterability.to_string(),
            r.baseline.to_string(),
        ]);
    }
    t.finish()
}

/// Pretty JSON followed by a newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EvalRecord;

    #[test]
    fn history_header_and_empty_warmup_cells() {
        let h = TrainHistory {
            clustered_layers: vec![1, 2],
            lambda: 20.0,
            records: vec![EvalRecord {
                step: 0,
                ce_loss: 2.5,
                eff_loss: 2.5,
                clusterability: vec![None, Some(0.5)],
                train_acc: 0.1,
                test_acc: 0.125,
            }],
        };
        let csv = history_csv(&h);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,ce_loss,eff_loss,clusterability_layer1,clusterability_layer2,train_acc,test_acc"
        );
        assert_eq!(lines.next().unwrap(), "0,2.5,2.5,,0.5,0.1,0.125");
    }

    #[test]
    fn floats_round_trip_through_csv() {
        let x = 0.1 + 0.2;
        let rows = [KSweepRow {
            layer: 0,
            k: 2,
            source: "weight".into(),
            clusterability: x,
            baseline: 0.5,
        }];
        let csv = clusterability_vs_k_csv(&rows);
        let cell = csv.lines().nth(1).unwrap().split(',').nth(3).unwrap();
        assert_eq!(cell.parse::<f64>().unwrap(), x);
    }
}
