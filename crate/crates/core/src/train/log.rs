//! Per-evaluation metric rows as CSV.

use std::fs::File;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::train::metrics;

pub const METRICS_HEADER: &str = "epoch,step,split,nll,ppl,bpc,wallclock_s";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub nll: f64,
    pub ppl: f64,
    pub bpc: f64,
    pub wallclock_s: f64,
}

impl MetricsRow {
    pub fn new(epoch: usize, step: usize, split: &str, nll: f64, wallclock_s: f64) -> Self {
        let m = metrics(nll);
        Self {
            epoch,
            step,
            split: split.to_owned(),
            nll,
            ppl: m.ppl,
            bpc: m.bpc,
            wallclock_s,
        }
    }
}

pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let mut log = MetricsLog::create(&p).unwrap();
        log.append(&MetricsRow::new(1, 40, "valid", std::f64::consts::LN_2, 0.5)).unwrap();
        log.append(&MetricsRow::new(2, 80, "valid", 0.5, 1.0)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..3], &["1", "40", "valid"]);
        assert_eq!(first[5].parse::<f64>().unwrap(), 1.0);
        assert_eq!(lines.count(), 1);
    }
}
