//! Mean final error, per-path conditional entropy, and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSequence;
use crate::error::{Error, Result};
use crate::model::DibModel;
use crate::nn::softmax;

/// Row `i` holds test errors (%) on tasks `0..=i` after training task `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl ErrorMatrix {
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "row {} has {} entries, expected {}",
                self.rows.len(),
                row.len(),
                self.rows.len() + 1
            )));
        }
        if let Some(bad) = row.iter().find(|e| !(0.0..=100.0).contains(*e)) {
            return Err(Error::InvalidArgument(format!("error {bad} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> Option<f64> {
        self.rows.get(after_task).and_then(|r| r.get(on_task)).copied()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(i, r)| r[i]).collect()
    }
}

/// Mean of the last row. Every row must be complete.
pub fn mean_final_error(matrix: &ErrorMatrix) -> Result<f64> {
    let Some(last) = matrix.rows.last() else {
        return Err(Error::IncompleteMatrix("no rows".into()));
    };
    for (i, row) in matrix.rows.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "row {i} has {} entries, expected {}",
                row.len(),
                i + 1
            )));
        }
    }
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Natural-log entropy of each row of a probability matrix, with
/// `p ln p = 0` at `p = 0`.
pub fn row_entropies(probs: &crate::tensor::Tensor2D) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| {
            -probs
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntropy {
    pub module: usize,
    /// `None` when no sample was routed to the module.
    pub mean_cond_entropy: Option<f64>,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEntropy {
    pub cell: usize,
    pub modules: Vec<ModuleEntropy>,
    /// Average of the module means over modules that received samples.
    pub module_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEntropyReport {
    pub cells: Vec<CellEntropy>,
    pub sample_count: usize,
}

impl PathEntropyReport {
    /// Module-mean entropy averaged over cells.
    pub fn mean_path_entropy(&self) -> f64 {
        self.cells.iter().map(|c| c.module_mean).sum::<f64>() / self.cells.len() as f64
    }
}

/// Builds a report from per-sample entropies and per-cell module choices.
pub fn attribute_entropy(
    entropies: &[f64],
    actions: &[Vec<usize>],
    modules_per_cell: usize,
) -> Result<PathEntropyReport> {
    let mut cells = Vec::with_capacity(actions.len());
    for (c, acts) in actions.iter().enumerate() {
        if acts.len() != entropies.len() {
            return Err(Error::InvalidArgument(format!(
                "cell {c}: {} actions for {} samples",
                acts.len(),
                entropies.len()
            )));
        }
        let mut sums = vec![0.0; modules_per_cell];
        let mut counts = vec![0usize; modules_per_cell];
        for (&a, &h) in acts.iter().zip(entropies) {
            if a >= modules_per_cell {
                return Err(Error::InvalidArgument(format!("module {a} out of range")));
            }
            sums[a] += h;
            counts[a] += 1;
        }
        let modules: Vec<ModuleEntropy> = (0..modules_per_cell)
            .map(|k| ModuleEntropy {
                module: k,
                mean_cond_entropy: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
                sample_count: counts[k],
            })
            .collect();
        let present: Vec<f64> = modules.iter().filter_map(|m| m.mean_cond_entropy).collect();
        let module_mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        cells.push(CellEntropy {
            cell: c,
            modules,
            module_mean,
        });
    }
    Ok(PathEntropyReport {
        cells,
        sample_count: entropies.len(),
    })
}

/// Routes every test sample of every task through that task's MemNets and
/// attributes the entropy of the output distribution to the module used in
/// each cell.
pub fn cond_entropy_per_path(model: &DibModel, tasks: &TaskSequence) -> Result<PathEntropyReport> {
    let mut entropies = Vec::new();
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); model.cells.len()];
    for (t, task) in tasks.tasks.iter().enumerate() {
        let routes = model.route_infer(&task.test.inputs, t)?;
        let logits = model.forward_routed(&task.test.inputs, &routes)?;
        entropies.extend(row_entropies(&softmax(&logits)));
        for (c, r) in routes.into_iter().enumerate() {
            actions[c].extend(r);
        }
    }
    attribute_entropy(&entropies, &actions, model.config.modules_per_cell)
}

/// One finished sequential run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: String,
    pub dataset: String,
    pub lambda: f64,
    pub trial: usize,
    pub mean_final_error: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

impl TableFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => TableFormat::Json,
            _ => TableFormat::Csv,
        }
    }
}

const CSV_HEADER: [&str; 6] = ["condition", "dataset", "lambda", "trial", "mean_final_error", "wall_seconds"];

pub fn write_results(rows: &[ResultRow], path: &Path, format: TableFormat) -> Result<()> {
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            if rows.is_empty() {
                w.write_record(CSV_HEADER)?;
            }
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        TableFormat::Json => {
            let mut text = serde_json::to_string_pretty(rows)?;
            text.push('\n');
            fs::write(path, text)?;
        }
    }
    Ok(())
}

pub fn read_results(path: &Path, format: TableFormat) -> Result<Vec<ResultRow>> {
    match format {
        TableFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
        }
        TableFormat::Json => Ok(serde_json::from_str(&fs::read_to_string(path)?)?),
    }
}

/// Aggregate for one condition at its best hyperparameter value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub dataset: String,
    pub best_lambda: f64,
    pub mean: f64,
    /// Population standard deviation across trials.
    pub stdev: f64,
    pub trials: usize,
}

fn mean_and_pstdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by (condition, dataset), picks the lambda with the lowest
/// mean error, and reports mean and population stdev at that lambda.
/// Output order follows first appearance in `rows`.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let key = (row.condition.clone(), row.dataset.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let members = &groups[&key];
        let mut lambdas: Vec<f64> = members.iter().map(|r| r.lambda).collect();
        lambdas.sort_by(f64::total_cmp);
        lambdas.dedup();
        let mut best: Option<SummaryRow> = None;
        for lambda in lambdas {
            let errs: Vec<f64> = members
                .iter()
                .filter(|r| r.lambda == lambda)
                .map(|r| r.mean_final_error)
                .collect();
            let (mean, stdev) = mean_and_pstdev(&errs);
            if best.as_ref().is_none_or(|b| mean < b.mean) {
                best = Some(SummaryRow {
                    condition: key.0.clone(),
                    dataset: key.1.clone(),
                    best_lambda: lambda,
                    mean,
                    stdev,
                    trials: errs.len(),
                });
            }
        }
        out.extend(best);
    }
    out
}

/// Plain-text table, one line per condition, percentages with two decimals.
pub fn render_summary(summary: &[SummaryRow]) -> String {
    let width = summary
        .iter()
        .map(|s| s.condition.len())
        .chain(std::iter::once("condition".len()))
        .max()
        .unwrap_or(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:<9}  {:>8}  {:>16}  {:>6}",
        "condition", "dataset", "lambda", "mean error (%)", "trials"
    );
    for s in summary {
        let _ = writeln!(
            out,
            "{:<width$}  {:<9}  {:>8}  {:>16}  {:>6}",
            s.condition,
            s.dataset,
            s.best_lambda,
            format!("{:.2} ± {:.2}", s.mean, s.stdev),
            s.trials
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2D;

    fn row(cond: &str, lambda: f64, trial: usize, err: f64) -> ResultRow {
        ResultRow {
            condition: cond.into(),
            dataset: "split".into(),
            lambda,
            trial,
            mean_final_error: err,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn final_error_examples() {
        let mut m = ErrorMatrix::default();
        m.push_row(vec![1.0]).unwrap();
        assert_eq!(mean_final_error(&m).unwrap(), 1.0);
        m.push_row(vec![3.0, 5.0]).unwrap();
        m.push_row(vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(mean_final_error(&m).unwrap(), 4.0);
        assert!(mean_final_error(&ErrorMatrix::default()).is_err());
        let ragged = ErrorMatrix {
            rows: vec![vec![1.0], vec![2.0]],
        };
        assert!(matches!(mean_final_error(&ragged), Err(Error::IncompleteMatrix(_))));
        assert!(m.push_row(vec![1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let p = Tensor2D::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]);
        let h = row_entropies(&p);
        assert!((h[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(h[1], 0.0);
    }

    #[test]
    fn attribution_counts_and_absent_modules() {
        let h = [0.2, 0.4, 0.6];
        let acts = vec![vec![0, 0, 2], vec![1, 1, 1]];
        let rep = attribute_entropy(&h, &acts, 3).unwrap();
        let c0 = &rep.cells[0];
        assert_eq!(c0.modules[0].mean_cond_entropy, Some(0.30000000000000004));
        assert_eq!(c0.modules[1].mean_cond_entropy, None);
        assert_eq!(c0.modules.iter().map(|m| m.sample_count).sum::<usize>(), 3);
        assert!((c0.module_mean - 0.45).abs() < 1e-12);
        assert!((rep.cells[1].module_mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("DIB+EWC", 100.0, 0, 4.123456789012), row("MLP", 0.0, 1, 44.5)];
        for (name, fmt) in [("r.csv", TableFormat::Csv), ("r.json", TableFormat::Json)] {
            let p = dir.path().join(name);
            write_results(&rows, &p, fmt).unwrap();
            assert_eq!(read_results(&p, fmt).unwrap(), rows);
            assert_eq!(TableFormat::from_path(&p), fmt);
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_results(&[], &p, TableFormat::Csv).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "condition,dataset,lambda,trial,mean_final_error,wall_seconds\n"
        );
        assert!(read_results(&p, TableFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn summary_picks_best_lambda() {
        let rows = vec![
            row("DIB+EWC", 10.0, 0, 8.0),
            row("DIB+EWC", 10.0, 1, 10.0),
            row("DIB+EWC", 100.0, 0, 4.0),
            row("DIB+EWC", 100.0, 1, 6.0),
            row("MLP", 0.0, 0, 40.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].best_lambda, 100.0);
        assert_eq!(s[0].mean, 5.0);
        assert_eq!(s[0].stdev, 1.0);
        assert_eq!(s[1].condition, "MLP");
        let text = render_summary(&s);
        assert!(text.contains("5.00 ± 1.00"));
        assert_eq!(text.lines().count(), 3);
    }
}
