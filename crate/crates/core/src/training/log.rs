use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        format!("{}\t{:.6e}\t{}", self.step, self.lr, self.loss.tsv())
    }
}

pub fn log_header() -> String {
    format!("step\tlr\t{}", LossBreakdown::TSV_HEADER)
}

/// Writes `header_lines` as `#` comments, then the tab-separated log.
pub fn write_log(path: &Path, header_lines: &[String], records: &[StepRecord]) -> Result<()> {
    let mut out = String::new();
    for l in header_lines {
        out.push_str("# ");
        out.push_str(l);
        out.push('\n');
    }
    out.push_str(&log_header());
    out.push('\n');
    for r in records {
        out.push_str(&r.tsv());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trailing moving average of the total loss.
pub fn moving_average(records: &[StepRecord], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(records.len());
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        acc += r.loss.total;
        if i >= window {
            acc -= records[i - window].loss.total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_lines_have_one_field_per_header_column() {
        let r = StepRecord {
            step: 3,
            lr: 0.002,
            loss: LossBreakdown::default(),
        };
        assert_eq!(r.tsv().split('\t').count(), log_header().split('\t').count());
    }

    #[test]
    fn moving_average_of_constant_is_constant() {
        let mut loss = LossBreakdown::default();
        loss.total = 2.0;
        let recs: Vec<_> = (0..10).map(|step| StepRecord { step, lr: 0.1, loss }).collect();
        assert!(moving_average(&recs, 4).iter().all(|&v| v == 2.0));
    }
}
