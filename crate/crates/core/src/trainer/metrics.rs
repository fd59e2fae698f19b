//! Per-epoch metrics and their CSV form.
//!
//! `metrics.csv` starts with the resolved configuration as `# key = value`
//! comment lines followed by a header row with [`COLUMNS`]. Empty fields
//! mean "not applicable" (an inactive loss, a disabled branch). Wall-clock
//! timings go to a separate `timing.csv` so the metrics file of a seeded
//! run is reproducible byte for byte.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::plm::LossReport;

pub const COLUMNS: [&str; 15] = [
    "epoch",
    "stage",
    "lr_cnn",
    "lr_trans",
    "ce_cnn",
    "ce_trans",
    "cl",
    "kl",
    "total",
    "top1_cnn",
    "top5_cnn",
    "top1_trans",
    "top5_trans",
    "eval_weights",
    "optimizer_steps",
];

pub const TIMING_COLUMNS: [&str; 3] = ["epoch", "train_seconds", "eval_seconds"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: u8,
    pub lr_cnn: Option<f64>,
    pub lr_trans: Option<f64>,
    /// Epoch means of the per-step loss components.
    pub losses: LossReport,
    pub eval_cnn: Option<Accuracy>,
    pub eval_trans: Option<Accuracy>,
    /// `ema` or `raw`.
    pub eval_weights: &'static str,
    pub optimizer_steps: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        [
            self.epoch.to_string(),
            self.stage.to_string(),
            opt(self.lr_cnn),
            opt(self.lr_trans),
            opt(l.ce_cnn),
            opt(l.ce_trans),
            opt(l.cl),
            opt(l.kl),
            l.total.to_string(),
            opt(self.eval_cnn.map(|a| a.top1)),
            opt(self.eval_cnn.map(|a| a.top5)),
            opt(self.eval_trans.map(|a| a.top1)),
            opt(self.eval_trans.map(|a| a.top5)),
            self.eval_weights.to_string(),
            self.optimizer_steps.to_string(),
        ]
        .join(",")
    }

    pub fn timing_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.train_seconds, self.eval_seconds)
    }
}

/// Running mean of loss components over the steps of one epoch.
#[derive(Clone, Debug, Default)]
pub struct LossMeter {
    sums: [f64; 5],
    counts: [usize; 5],
}

impl LossMeter {
    pub fn add(&mut self, r: &LossReport) {
        for (i, v) in [r.ce_cnn, r.ce_trans, r.cl, r.kl, Some(r.total)].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    pub fn mean(&self) -> LossReport {
        let m = |i: usize| (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64);
        LossReport {
            ce_cnn: m(0),
            ce_trans: m(1),
            cl: m(2),
            kl: m(3),
            total: m(4).unwrap_or(0.0),
        }
    }
}

/// Appends rows to `metrics.csv` and `timing.csv` in a run directory,
/// flushing after every epoch.
pub struct MetricsWriter {
    metrics: File,
    timing: File,
}

impl MetricsWriter {
    /// Start fresh files, or append to existing ones when `resume` is set
    /// and the files are present.
    pub fn open(dir: &Path, config_text: &str, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mpath = dir.join("metrics.csv");
        let tpath = dir.join("timing.csv");
        if resume && mpath.exists() && tpath.exists() {
            let append = |p: &Path| OpenOptions::new().append(true).open(p);
            return Ok(MetricsWriter {
                metrics: append(&mpath)?,
                timing: append(&tpath)?,
            });
        }
        let mut metrics = File::create(&mpath)?;
        for line in config_text.lines() {
            writeln!(metrics, "# {line}")?;
        }
        writeln!(metrics, "{}", COLUMNS.join(","))?;
        let mut timing = File::create(&tpath)?;
        writeln!(timing, "{}", TIMING_COLUMNS.join(","))?;
        Ok(MetricsWriter { metrics, timing })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.csv_line())?;
        writeln!(self.timing, "{}", row.timing_line())?;
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

/// Data rows of a metrics CSV as column-name → field maps, with the
/// embedded configuration text.
pub struct MetricsTable {
    pub config_text: String,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut config_text = String::new();
        let mut header: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if let Some(c) = line.strip_prefix("# ") {
                config_text.push_str(c);
                config_text.push('\n');
            } else if header.is_none() {
                header = Some(line.split(',').map(str::to_string).collect());
            } else if !line.is_empty() {
                rows.push(line.split(',').map(str::to_string).collect());
            }
        }
        let header = header.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing header row".into(),
        })?;
        if header != COLUMNS {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unexpected columns {header:?}"),
            });
        }
        Ok(MetricsTable { config_text, rows })
    }

    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        let i = COLUMNS.iter().position(|&c| c == name).expect("known column");
        self.rows.iter().map(|r| r.get(i).and_then(|v| v.parse().ok())).collect()
    }
}
