//! Metrics rows and the append-only CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::{HarnessError, Result};

pub const HEADER: &str = "run,iter,loss_det,loss_aux_idf,loss_aux_reg,loss_distill,toy_ap";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub iter: usize,
    pub loss_det: f64,
    pub loss_aux_idf: f64,
    pub loss_aux_reg: f64,
    pub loss_distill: f64,
    pub toy_ap: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.run, self.iter, self.loss_det, self.loss_aux_idf, self.loss_aux_reg, self.loss_distill, self.toy_ap
        )
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| HarnessError::io(path, e))?;
    let fresh = f.metadata().map_err(|e| HarnessError::io(path, e))?.len() == 0;
    let mut text = String::new();
    if fresh {
        text.push_str(HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

/// Running means of the loss terms between two reports.
#[derive(Clone, Debug, Default)]
pub struct LossWindow {
    sums: [f64; 4],
    n: usize,
}

impl LossWindow {
    pub fn push(&mut self, det: f64, idf: f64, reg: f64, distill: f64) {
        for (s, v) in self.sums.iter_mut().zip([det, idf, reg, distill]) {
            *s += v;
        }
        self.n += 1;
    }

    pub fn take(&mut self, run: &str, iter: usize, toy_ap: f64) -> MetricsRow {
        let n = self.n.max(1) as f64;
        let [d, i, r, k] = self.sums.map(|s| s / n);
        *self = Self::default();
        MetricsRow { run: run.into(), iter, loss_det: d, loss_aux_idf: i, loss_aux_reg: r, loss_distill: k, toy_ap }
    }
}
