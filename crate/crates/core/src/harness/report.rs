//! Result files of a run.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{Experiment, RunReport};
use crate::error::{Error, Result};
use crate::mask::export_csr;
use crate::nn::Checkpoint;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: usize,
    pub class_il: f64,
    pub task_il: f64,
}

/// Headline numbers written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub class_il_avg: f64,
    pub task_il_avg: f64,
    pub per_task: Vec<TaskAccuracy>,
    pub train_flops_forward: u64,
    pub train_flops_backward: u64,
    pub memory_footprint_bytes: u64,
}

impl MetricsSummary {
    pub fn from_report(r: &RunReport) -> Self {
        MetricsSummary {
            class_il_avg: r.class_il.average,
            task_il_avg: r.task_il.average,
            per_task: r
                .class_il
                .per_task
                .iter()
                .zip(&r.task_il.per_task)
                .enumerate()
                .map(|(i, (&c, &t))| TaskAccuracy {
                    task: i + 1,
                    class_il: c,
                    task_il: t,
                })
                .collect(),
            train_flops_forward: r.flops.forward,
            train_flops_backward: r.flops.backward,
            memory_footprint_bytes: r.memory_footprint_bytes,
        }
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const STAGES_FILE: &str = "stages.csv";
pub const REMOVAL_FILE: &str = "removal.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CSR_FILE: &str = "csr.json";
pub const BUFFER_FILE: &str = "buffer.jsonl";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_writer(create(path)?);
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes report, metrics, stage and removal logs, the final checkpoint and
/// the CSR export of the maskable layers into `out_dir`.
pub fn emit_report<F: Scalar>(exp: &Experiment<F>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let r = &exp.report;
    write_json(&out_dir.join(REPORT_FILE), r)?;
    write_json(&out_dir.join(METRICS_FILE), &MetricsSummary::from_report(r))?;
    write_csv(
        &out_dir.join(STAGES_FILE),
        &r.stages,
        &[
            "task",
            "epoch",
            "event",
            "sparsity",
            "removed_count",
            "grown_count",
            "gradient_sparsity",
            "examples_removed",
            "active_examples",
            "flops",
        ],
    )?;
    write_csv(
        &out_dir.join(REMOVAL_FILE),
        &r.removals,
        &["task", "stage", "quota", "remaining_count"],
    )?;
    Checkpoint::new(exp.model.clone()).save(&out_dir.join(CHECKPOINT_FILE))?;
    write_json(&out_dir.join(CSR_FILE), &export_csr(&exp.model, &exp.weight_mask)?)?;
    if r.config.dump_buffer {
        let path = out_dir.join(BUFFER_FILE);
        exp.buffer.dump_jsonl(create(&path)?, false)?;
    }
    Ok(())
}

/// Parses a `report.json` written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
