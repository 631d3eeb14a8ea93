//! Newline-delimited JSON metrics: one `{"step", "name", "value"}` record
//! per line. Terms that were not computed carry `"value": null`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::align::LossParts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub name: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub parts: LossParts,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |name: &str, value| MetricRecord {
            step: self.step,
            name: name.to_string(),
            value,
        };
        let mut out = vec![rec("lr", Some(self.lr)), rec("loss_total", Some(self.total))];
        for (name, v) in LossParts::NAMES.iter().zip(self.parts.values()) {
            out.push(rec(name, v));
        }
        out.push(rec("grad_norm", Some(self.grad_norm)));
        out
    }
}

pub trait MetricsSink {
    fn record(&mut self, report: &StepReport) -> std::io::Result<()>;
}

/// Writes records to any `Write`.
pub struct NdjsonSink<W: Write> {
    out: W,
}

impl<W: Write> NdjsonSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for NdjsonSink<W> {
    fn record(&mut self, report: &StepReport) -> std::io::Result<()> {
        for r in report.records() {
            serde_json::to_writer(&mut self.out, &r)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()
    }
}

/// Keeps every report in memory.
#[derive(Default)]
pub struct VecSink(pub Vec<StepReport>);

impl MetricsSink for VecSink {
    fn record(&mut self, report: &StepReport) -> std::io::Result<()> {
        self.0.push(report.clone());
        Ok(())
    }
}
