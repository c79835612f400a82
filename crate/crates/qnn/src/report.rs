//! JSON output: evaluation reports, protocol reports and the training
//! metrics stream (one JSON object per line).

use std::io::{self, Write};

use qnn_core::task::{
    format_relative, frame_error, relative_loss, Condition, ProtocolReport, Split,
};
use qnn_core::train::{Metric, MetricsSink};
use serde::Serialize;

/// Result of evaluating one model under one condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub accuracy: f64,
    /// `(err − err_match) / err_match` against the baseline; `null` without
    /// a baseline or when the baseline makes no errors.
    pub relative_loss: Option<f64>,
    pub frame_error: f64,
    pub baseline_accuracy: Option<f64>,
    pub split: Split,
    pub task_seed: u64,
    pub frames: usize,
}

impl EvalReport {
    pub fn new(
        condition: Condition,
        accuracy: f64,
        baseline: Option<f64>,
        split: Split,
        task_seed: u64,
        frames: usize,
    ) -> Self {
        Self {
            condition,
            accuracy,
            relative_loss: baseline
                .and_then(|b| relative_loss(frame_error(b), frame_error(accuracy))),
            frame_error: frame_error(accuracy),
            baseline_accuracy: baseline,
            split,
            task_seed,
            frames,
        }
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "condition      {}\nsplit          {}\nframes         {}\naccuracy       {:.4}\nframe error    {:.2}%\n",
            self.condition,
            self.split.name(),
            self.frames,
            self.accuracy,
            self.frame_error * 100.0
        );
        if let Some(b) = self.baseline_accuracy {
            let rel = self
                .relative_loss
                .map_or_else(|| "n/a".to_string(), format_relative);
            s.push_str(&format!(
                "match error    {:.2}%\nrelative loss  {rel}\n",
                frame_error(b) * 100.0
            ));
        }
        s
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    // Serializing plain data structs cannot fail.
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

pub fn protocol_json(report: &ProtocolReport) -> String {
    to_json(report)
}

/// Writes each metric as one JSON line. The first I/O error stops output
/// and is kept for [`JsonLinesSink::finish`].
pub struct JsonLinesSink<W: Write> {
    out: W,
    error: Option<io::Error>,
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> MetricsSink for JsonLinesSink<W> {
    fn record(&mut self, metric: &Metric) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(metric).expect("serializable metric");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }
}
