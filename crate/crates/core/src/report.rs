//! Per-view metrics reports as CSV: `name,psnr,ssim,cost_ratio,wall_ms`, one row per view and
//! a final `aggregate` row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AGGREGATE: &str = "aggregate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub cost_ratio: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn views(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.name != AGGREGATE)
    }

    /// Means over the view rows; wall time is summed.
    pub fn aggregate(&self) -> Option<ReportRow> {
        let views: Vec<&ReportRow> = self.views().collect();
        if views.is_empty() {
            return None;
        }
        let n = views.len() as f64;
        let mean = |f: fn(&ReportRow) -> f64| views.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(ReportRow {
            name: AGGREGATE.into(),
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            cost_ratio: mean(|r| r.cost_ratio),
            wall_ms: views.iter().map(|r| r.wall_ms).sum(),
        })
    }

    /// View rows followed by a freshly computed aggregate row.
    pub fn finalized(&self) -> MetricsReport {
        let mut rows: Vec<ReportRow> = self.views().cloned().collect();
        rows.extend(self.aggregate());
        MetricsReport { rows }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::Data(format!("report encoding: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("report encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::Data(format!("metrics report: {e}")))?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut rep = MetricsReport::default();
        for i in 0..3 {
            rep.push(ReportRow {
                name: format!("view_{i:04}"),
                psnr: 20.0 + 0.1 * i as f64 + 1e-13,
                ssim: 0.9 / 7.0,
                cost_ratio: 0.7538054,
                wall_ms: 12.5,
            });
        }
        let rep = rep.finalized();
        assert_eq!(rep.rows.last().unwrap().name, AGGREGATE);
        let back = MetricsReport::from_csv(&rep.to_csv().unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.to_csv().unwrap().starts_with("name,psnr,ssim,cost_ratio,wall_ms\n"));
    }
}
