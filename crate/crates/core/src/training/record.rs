use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = ["run_seed", "epoch", "split", "loss", "metric_name", "metric_value"];

/// Loss and metric values of one split at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_seed: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    run_seed: u64,
    epoch: usize,
    split: String,
    loss: f64,
    metric_name: String,
    metric_value: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

/// Writes one CSV row per metric. The header is written when `header` is set.
pub fn write_metrics_csv(out: impl Write, records: &[MetricsRecord], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in records {
        for (name, value) in &r.metrics {
            w.serialize(Row {
                run_seed: r.run_seed,
                epoch: r.epoch,
                split: r.split.clone(),
                loss: r.loss,
                metric_name: name.clone(),
                metric_value: *value,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format(format!("metrics csv: {e}")))
}

/// Groups consecutive rows sharing seed, epoch and split back into records.
pub fn read_metrics_csv(input: impl Read) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out: Vec<MetricsRecord> = Vec::new();
    for row in rd.deserialize::<Row>() {
        let row = row.map_err(csv_err)?;
        match out.last_mut() {
            Some(r) if r.run_seed == row.run_seed && r.epoch == row.epoch && r.split == row.split => {
                r.metrics.push((row.metric_name, row.metric_value))
            }
            _ => out.push(MetricsRecord {
                run_seed: row.run_seed,
                epoch: row.epoch,
                split: row.split,
                loss: row.loss,
                metrics: vec![(row.metric_name, row.metric_value)],
            }),
        }
    }
    Ok(out)
}
