//! Metrics reports and prediction/trace files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Evaluation, TaskEval};
use crate::heads::Prediction;
use crate::metrics::compute_cost;
use crate::task::TaskKind;
use crate::training::StageEntry;

/// Lowest and highest similarity written to STS prediction files.
pub const STS_RANGE: (f64, f64) = (0.0, 5.0);

/// Serialized field order is the declaration order below; keep it stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub sst_accuracy: Option<f64>,
    pub para_accuracy: Option<f64>,
    pub sts_pearson: Option<f64>,
    pub dev_score: Option<f64>,
    pub num_layers: usize,
    pub avg_exit_layer: BTreeMap<String, f64>,
    pub layers_saved_fraction: Option<f64>,
    pub constant_predictions: BTreeMap<String, bool>,
    pub degenerate_metrics: BTreeMap<String, String>,
    pub stage_log: Vec<StageEntry>,
    pub dev_history: Vec<f64>,
    pub steps: u64,
    pub wall_seconds: f64,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Summarize an evaluation. Training fields start empty.
    pub fn from_evaluation(
        split: &str,
        eval: &Evaluation,
        num_layers: usize,
        config: &[(String, String)],
    ) -> Result<Self> {
        let mut avg_exit_layer = BTreeMap::new();
        let mut constant_predictions = BTreeMap::new();
        let mut degenerate_metrics = BTreeMap::new();
        let mut all_traces = Vec::new();
        for t in &eval.tasks {
            let name = t.task.name().to_string();
            avg_exit_layer.insert(name.clone(), compute_cost(&t.traces, num_layers)?.0);
            constant_predictions.insert(name.clone(), t.constant);
            if let Some(why) = &t.degenerate {
                degenerate_metrics.insert(name, why.clone());
            }
            all_traces.extend(t.traces.iter().cloned());
        }
        let layers_saved_fraction = if all_traces.is_empty() {
            None
        } else {
            Some(compute_cost(&all_traces, num_layers)?.1)
        };
        Ok(Self {
            split: split.to_string(),
            sst_accuracy: eval.score(TaskKind::Sst),
            para_accuracy: eval.score(TaskKind::Para),
            sts_pearson: eval.score(TaskKind::Sts),
            dev_score: eval.dev_score,
            num_layers,
            avg_exit_layer,
            layers_saved_fraction,
            constant_predictions,
            degenerate_metrics,
            stage_log: Vec::new(),
            dev_history: Vec::new(),
            steps: 0,
            wall_seconds: 0.0,
            config: config.iter().cloned().collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn prediction_text(task: TaskKind, p: Prediction) -> String {
    match p {
        Prediction::Class(c) => c.to_string(),
        Prediction::Score(s) if task == TaskKind::Sts => s.clamp(STS_RANGE.0, STS_RANGE.1).to_string(),
        Prediction::Score(s) => s.to_string(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `id,prediction` rows for one task.
pub fn write_predictions(path: &Path, eval: &TaskEval) -> Result<()> {
    let rows = eval
        .ids
        .iter()
        .zip(&eval.predictions)
        .map(|(id, &p)| vec![id.clone(), prediction_text(eval.task, p)]);
    write_csv(path, &["id", "prediction"], rows)
}

/// One row per executed layer. Under a policy without statistics only the
/// exit layer is listed, with an empty statistic.
pub fn write_traces(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut rows = Vec::new();
    for t in &eval.tasks {
        for (id, trace) in t.ids.iter().zip(&t.traces) {
            if trace.statistics.is_empty() {
                rows.push(vec![
                    id.clone(),
                    trace.exit_layer.to_string(),
                    String::new(),
                    "1".into(),
                ]);
                continue;
            }
            for (i, s) in trace.statistics.iter().enumerate() {
                let exited = i + 1 == trace.exit_layer;
                rows.push(vec![
                    id.clone(),
                    (i + 1).to_string(),
                    s.to_string(),
                    u8::from(exited).to_string(),
                ]);
            }
        }
    }
    write_csv(path, &["example_id", "layer", "statistic", "exited"], rows)
}

/// Write `metrics.json`, one predictions file per task and, when asked,
/// `traces.csv` into `outdir`. Returns the written paths.
pub fn emit_reports(report: &MetricsReport, eval: &Evaluation, outdir: &Path, traces: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut written = Vec::new();
    let metrics = outdir.join("metrics.json");
    std::fs::write(&metrics, report.to_json() + "\n").map_err(|e| Error::io(&metrics, e))?;
    written.push(metrics);
    for t in &eval.tasks {
        let path = outdir.join(format!("predictions_{}.csv", t.task));
        write_predictions(&path, t)?;
        written.push(path);
    }
    if traces {
        let path = outdir.join("traces.csv");
        write_traces(&path, eval)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::early_exit::ExitTrace;

    fn sample_eval() -> Evaluation {
        let trace = |stats: Vec<f64>, exit| ExitTrace {
            statistics: stats,
            exit_layer: exit,
            layers_executed: exit,
        };
        Evaluation {
            tasks: vec![
                TaskEval {
                    task: TaskKind::Sst,
                    ids: vec!["a".into(), "b".into()],
                    predictions: vec![Prediction::Class(1), Prediction::Class(3)],
                    golds: vec![1.0, 2.0],
                    traces: vec![trace(vec![0.95], 1), trace(vec![0.5, 0.6], 2)],
                    score: Some(0.5),
                    constant: false,
                    degenerate: None,
                },
                TaskEval {
                    task: TaskKind::Sts,
                    ids: vec!["c".into(), "d".into()],
                    predictions: vec![Prediction::Score(6.2), Prediction::Score(6.2)],
                    golds: vec![1.0, 2.0],
                    traces: vec![trace(vec![], 2), trace(vec![], 2)],
                    score: None,
                    constant: true,
                    degenerate: Some("zero variance".into()),
                },
            ],
            dev_score: Some(0.5),
        }
    }

    #[test]
    fn report_round_trips_and_flags_degenerate_tasks() {
        let eval = sample_eval();
        let report = MetricsReport::from_evaluation("dev", &eval, 2, &[("train.seed".into(), "1".into())]).unwrap();
        assert_eq!(report.sts_pearson, None);
        assert!(report.constant_predictions["sts"]);
        assert!(report.degenerate_metrics.contains_key("sts"));
        assert_eq!(report.avg_exit_layer["sst"], 1.5);
        assert_eq!(report.layers_saved_fraction, Some(1.0 - 1.75 / 2.0));
        assert_eq!(MetricsReport::from_json(&report.to_json()).unwrap(), report);
    }

    #[test]
    fn files_have_headers_and_clamped_scores() {
        let eval = sample_eval();
        let report = MetricsReport::from_evaluation("dev", &eval, 2, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = emit_reports(&report, &eval, dir.path(), true).unwrap();
        assert_eq!(written.len(), 4);
        let sts = std::fs::read_to_string(dir.path().join("predictions_sts.csv")).unwrap();
        assert_eq!(sts, "id,prediction\nc,5\nd,5\n");
        let traces = std::fs::read_to_string(dir.path().join("traces.csv")).unwrap();
        let lines: Vec<&str> = traces.lines().collect();
        assert_eq!(lines[0], "example_id,layer,statistic,exited");
        assert_eq!(lines[1], "a,1,0.95,1");
        assert_eq!(lines[2], "b,1,0.5,0");
        assert_eq!(lines[5], "d,2,,1");
    }

    #[test]
    fn metrics_json_keys_are_pinned() {
        const GOLDEN: [&str; 15] = [
            "split",
            "sst_accuracy",
            "para_accuracy",
            "sts_pearson",
            "dev_score",
            "num_layers",
            "avg_exit_layer",
            "layers_saved_fraction",
            "constant_predictions",
            "degenerate_metrics",
            "stage_log",
            "dev_history",
            "steps",
            "wall_seconds",
            "config",
        ];
        let report = MetricsReport::from_evaluation("dev", &sample_eval(), 2, &[]).unwrap();
        let text = report.to_json();
        let top: Vec<&str> = text
            .lines()
            .filter_map(|l| l.strip_prefix("  \""))
            .filter_map(|l| l.split_once('"').map(|(k, _)| k))
            .collect();
        assert_eq!(top, GOLDEN);
    }
}
