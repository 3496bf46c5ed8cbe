//! Per-epoch metric rows and their CSV form.

use std::io::{Read, Write};

use crate::error::{HarnessError, Result};

pub const HEADER: [&str; 9] = [
    "epoch",
    "split",
    "loss_total",
    "loss_ori",
    "loss_fea",
    "loss_logit",
    "tau",
    "xi",
    "pck",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_ori: f64,
    pub loss_fea: f64,
    pub loss_logit: f64,
    pub tau: f64,
    pub xi: f64,
    pub pck: f64,
}

impl MetricRow {
    fn fields(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.split.clone(),
            self.loss_total.to_string(),
            self.loss_ori.to_string(),
            self.loss_fea.to_string(),
            self.loss_logit.to_string(),
            self.tau.to_string(),
            self.xi.to_string(),
            self.pck.to_string(),
        ]
    }
}

/// Streams rows to a CSV sink, header first. Rows are flushed as written so
/// a crashed run still leaves its history behind.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        self.inner.write_record(row.fields())?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Parses a metrics file, reporting the line of the first bad row.
pub fn read_metrics<R: Read>(source: R) -> Result<Vec<MetricRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(source);
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| HarnessError::Metrics("line 1: empty file".into()))?
        .map_err(|e| HarnessError::Metrics(format!("line 1: {e}")))?;
    if header.iter().ne(HEADER) {
        return Err(HarnessError::Metrics(format!(
            "line 1: expected header {}",
            HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let bad = |what: String| HarnessError::Metrics(format!("line {line}: {what}"));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", HEADER.len(), rec.len())));
        }
        let num = |idx: usize| -> Result<f64> {
            rec[idx]
                .parse::<f64>()
                .map_err(|_| bad(format!("{} `{}` is not a number", HEADER[idx], &rec[idx])))
        };
        rows.push(MetricRow {
            epoch: rec[0]
                .parse()
                .map_err(|_| bad(format!("epoch `{}` is not an integer", &rec[0])))?,
            split: rec[1].to_string(),
            loss_total: num(2)?,
            loss_ori: num(3)?,
            loss_fea: num(4)?,
            loss_logit: num(5)?,
            tau: num(6)?,
            xi: num(7)?,
            pck: num(8)?,
        });
    }
    Ok(rows)
}
