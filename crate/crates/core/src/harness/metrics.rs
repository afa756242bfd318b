use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RoutingMode;
use crate::error::{Error, Result};

/// Lower-triangular `a[j][i]`: accuracy on task `i` right after task `j`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub n_tasks: usize,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let j = self.rows.len();
        if j >= self.n_tasks || row.len() != j + 1 {
            return Err(Error::Contract(format!(
                "row {j} must hold {} entries, got {}",
                j + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Contract(format!("row {j} has accuracies outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.rows.get(j).and_then(|r| r.get(i)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n_tasks
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "accuracy matrix has {} of {} rows",
                self.rows.len(),
                self.n_tasks
            )))
        }
    }
}

/// Average drop from immediate to final accuracy over all but the last task.
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let n = m.n_tasks;
    if n < 2 {
        return Err(Error::Contract("backward transfer needs at least 2 tasks".into()));
    }
    let last = &m.rows[n - 1];
    Ok((0..n - 1).map(|i| last[i] - m.rows[i][i]).sum::<f64>() / (n - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    Immediate,
    Last,
}

pub fn mean_accuracy(m: &AccuracyMatrix, setting: Setting) -> Result<f64> {
    m.require_complete()?;
    let n = m.n_tasks as f64;
    Ok(match setting {
        Setting::Immediate => (0..m.n_tasks).map(|i| m.rows[i][i]).sum::<f64>() / n,
        Setting::Last => m.rows[m.n_tasks - 1].iter().sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mean_immediate: f64,
    pub mean_last: f64,
    pub bwt: f64,
}

pub fn summarize(m: &AccuracyMatrix) -> Result<ModeSummary> {
    Ok(ModeSummary {
        mean_immediate: mean_accuracy(m, Setting::Immediate)?,
        mean_last: mean_accuracy(m, Setting::Last)?,
        bwt: bwt(m)?,
    })
}

pub const CSV_HEADER: &str = "record,routing,after_task,eval_task,value";

/// Flat metrics table: accuracy records then per-mode summaries, then the
/// run-level parameter ratio. Accuracies and BWT are fractions.
pub fn metrics_csv(matrices: &BTreeMap<RoutingMode, AccuracyMatrix>, param_ratio: Option<f64>) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for (mode, m) in matrices {
        for (j, row) in m.rows.iter().enumerate() {
            for (i, a) in row.iter().enumerate() {
                writeln!(out, "accuracy,{mode},{j},{i},{a}").unwrap();
            }
        }
    }
    for (mode, m) in matrices {
        let s = summarize(m)?;
        writeln!(out, "mean_immediate,{mode},,,{}", s.mean_immediate).unwrap();
        writeln!(out, "mean_last,{mode},,,{}", s.mean_last).unwrap();
        writeln!(out, "bwt,{mode},,,{}", s.bwt).unwrap();
    }
    if let Some(r) = param_ratio {
        writeln!(out, "param_ratio,,,,{r}").unwrap();
    }
    Ok(out)
}
