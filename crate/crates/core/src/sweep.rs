//! Grid sweeps over run configurations.
//!
//! A sweep file is a run configuration plus:
//!
//! ```text
//! sweep.seeds = 0, 1, 2
//! axis.plm.routing = restricted, bidirectional
//! # linked keys
//! axis.stage.x_percent+stage.y_percent = 0, 20, 40
//! # bundle axis
//! axis.pairing = conv_vit, vit_conv
//! bundle.pairing.conv_vit.cnn.kind = conv
//! bundle.pairing.conv_vit.trans.kind = transformer
//! ...
//! ```
//!
//! Cells are the Cartesian product of the axes, the first axis varying
//! slowest. Each (cell, seed) run writes `cell-NNN/seed-S/` and the
//! aggregate is always recomputed from those directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::trainer::{parse_pairs, MetricsTable, Role, RunConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
    /// Keys set to the axis value; empty for a bundle axis.
    pub keys: Vec<String>,
    /// Per value, the keys a bundle axis sets.
    pub bundles: IndexMap<String, IndexMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub coords: Vec<(String, String)>,
    pub pairs: IndexMap<String, String>,
}

impl Cell {
    pub fn label(&self) -> String {
        self.coords
            .iter()
            .map(|(a, v)| format!("{a}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(format!("cell-{:03}", self.index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base: IndexMap<String, String>,
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = parse_pairs(text)?;
        let seeds = match base.shift_remove("sweep.seeds") {
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::config("sweep.seeds", format!("cannot parse `{s}`: {e}")))
                })
                .collect::<Result<Vec<u64>>>()?,
            None => vec![base.get("seed").map_or(Ok(0), |s| {
                s.parse().map_err(|e| Error::config("seed", format!("{e}")))
            })?],
        };
        if seeds.is_empty() {
            return Err(Error::config("sweep.seeds", "need at least one seed"));
        }
        let mut axes = Vec::new();
        let mut bundle_keys: IndexMap<String, IndexMap<String, IndexMap<String, String>>> = IndexMap::new();
        for (k, v) in base.clone() {
            if let Some(name) = k.strip_prefix("axis.") {
                base.shift_remove(&k);
                let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if values.is_empty() {
                    return Err(Error::config(k, "axis needs at least one value"));
                }
                axes.push(Axis {
                    name: name.to_string(),
                    values,
                    keys: name.split('+').map(str::to_string).collect(),
                    bundles: IndexMap::new(),
                });
            } else if let Some(rest) = k.strip_prefix("bundle.") {
                base.shift_remove(&k);
                let mut parts = rest.splitn(3, '.');
                let (axis, value, key) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(Error::config(k, "expected bundle.<axis>.<value>.<key>")),
                };
                bundle_keys
                    .entry(axis.to_string())
                    .or_default()
                    .entry(value.to_string())
                    .or_default()
                    .insert(key.to_string(), v);
            }
        }
        for (axis, bundles) in bundle_keys {
            let a = axes
                .iter_mut()
                .find(|a| a.name == axis)
                .ok_or_else(|| Error::config(format!("bundle.{axis}"), "no matching axis"))?;
            for v in &a.values {
                if !bundles.contains_key(v) {
                    return Err(Error::config(format!("bundle.{axis}.{v}"), "value has no bundle"));
                }
            }
            a.keys.clear();
            a.bundles = bundles;
        }
        Ok(SweepSpec { base, axes, seeds })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Vec::<(usize, usize)>::new()];
        for (ai, axis) in self.axes.iter().enumerate() {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    (0..axis.values.len()).map(move |vi| {
                        let mut c = c.clone();
                        c.push((ai, vi));
                        c
                    })
                })
                .collect();
        }
        cells
            .into_iter()
            .enumerate()
            .map(|(index, picks)| {
                let mut pairs = self.base.clone();
                let mut coords = Vec::new();
                for (ai, vi) in picks {
                    let axis = &self.axes[ai];
                    let value = &axis.values[vi];
                    coords.push((axis.name.clone(), value.clone()));
                    if axis.bundles.is_empty() {
                        for k in &axis.keys {
                            pairs.insert(k.clone(), value.clone());
                        }
                    } else {
                        for (k, v) in &axis.bundles[value] {
                            pairs.insert(k.clone(), v.clone());
                        }
                    }
                }
                Cell { index, coords, pairs }
            })
            .collect()
    }

    pub fn config(&self, cell: &Cell, seed: u64) -> Result<RunConfig> {
        let mut pairs = cell.pairs.clone();
        pairs.insert("seed".into(), seed.to_string());
        RunConfig::from_pairs(pairs)
    }
}

/// Outcome of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub cell: usize,
    pub seed: u64,
    pub error: Option<String>,
}

/// Run every (cell, seed) in order. Failures are recorded in
/// `out/runs.csv` and the sweep moves on.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<RunRecord>> {
    fs::create_dir_all(out)?;
    let cells = spec.cells();
    write_manifest(spec, &cells, out)?;
    let mut records = Vec::new();
    for cell in &cells {
        for &seed in &spec.seeds {
            let dir = cell.dir(out).join(format!("seed-{seed}"));
            let result = spec
                .config(cell, seed)
                .and_then(Trainer::new)
                .and_then(|mut t| t.run_to_dir(&dir, false).map(|_| ()));
            if let Err(e) = &result {
                log::warn!("cell {} ({}) seed {seed} failed: {e}", cell.index, cell.label());
            }
            records.push(RunRecord {
                cell: cell.index,
                seed,
                error: result.err().map(|e| e.to_string()),
            });
        }
    }
    let mut log = String::from("cell,seed,status,message\n");
    for r in &records {
        let (status, msg) = match &r.error {
            None => ("ok", String::new()),
            Some(m) => ("failed", m.replace([',', '\n'], ";")),
        };
        let _ = writeln!(log, "{},{},{status},{msg}", r.cell, r.seed);
    }
    fs::write(out.join("runs.csv"), log)?;
    Ok(records)
}

fn write_manifest(spec: &SweepSpec, cells: &[Cell], out: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# seeds = {}",
        spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
    );
    let names: Vec<&str> = spec.axes.iter().map(|a| a.name.as_str()).collect();
    let _ = writeln!(s, "cell,{}", names.join(","));
    for c in cells {
        let vals: Vec<&str> = c.coords.iter().map(|(_, v)| v.as_str()).collect();
        let _ = writeln!(s, "{},{}", c.index, vals.join(","));
    }
    fs::write(out.join("cells.csv"), s)?;
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchAggregate {
    pub role: Role,
    pub kind: String,
    pub top1: Stat,
    pub top5: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub cell: usize,
    pub coords: Vec<(String, String)>,
    pub mode: String,
    pub epochs: usize,
    pub completed: usize,
    pub failed: usize,
    pub branches: Vec<BranchAggregate>,
}

/// Final-epoch accuracies of one finished run directory; `None` when the
/// run is missing or incomplete.
fn final_accuracies(dir: &Path) -> Option<(RunConfig, Vec<(Role, f64, f64)>)> {
    let table = MetricsTable::read(&dir.join("metrics.csv")).ok()?;
    let config = RunConfig::parse(&table.config_text).ok()?;
    if table.rows.len() != config.epochs {
        return None;
    }
    let mut out = Vec::new();
    for role in Role::BOTH {
        let t1 = table.column(&format!("top1_{role}")).last().copied().flatten();
        let t5 = table.column(&format!("top5_{role}")).last().copied().flatten();
        if let (Some(a), Some(b)) = (t1, t5) {
            out.push((role, a, b));
        }
    }
    Some((config, out))
}

/// Recompute per-cell statistics from the run directories under `out`.
pub fn aggregate(out: &Path) -> Result<Vec<AggregateRow>> {
    let manifest = fs::read_to_string(out.join("cells.csv"))?;
    let mut lines = manifest.lines();
    let seeds: Vec<u64> = lines
        .next()
        .and_then(|l| l.strip_prefix("# seeds = "))
        .ok_or_else(|| Error::Format {
            path: out.join("cells.csv"),
            message: "missing seeds line".into(),
        })?
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let header: Vec<String> = lines.next().unwrap_or("cell").split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut fields = line.split(',');
        let cell: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format {
                path: out.join("cells.csv"),
                message: format!("bad row `{line}`"),
            })?;
        let coords = header.iter().cloned().zip(fields.map(str::to_string)).collect();
        let mut mode = String::new();
        let mut epochs = 0;
        let mut kinds: IndexMap<Role, String> = IndexMap::new();
        let mut acc: IndexMap<Role, (Vec<f64>, Vec<f64>)> = IndexMap::new();
        let mut completed = 0;
        for seed in &seeds {
            let dir = out.join(format!("cell-{cell:03}/seed-{seed}"));
            let Some((config, finals)) = final_accuracies(&dir) else {
                continue;
            };
            completed += 1;
            mode = config.mode.to_string();
            epochs = config.epochs;
            for (role, t1, t5) in finals {
                kinds.insert(role, config.branch(role).backbone.kind.to_string());
                let e = acc.entry(role).or_default();
                e.0.push(t1);
                e.1.push(t5);
            }
        }
        let branches = acc
            .into_iter()
            .map(|(role, (t1, t5))| BranchAggregate {
                role,
                kind: kinds[&role].clone(),
                top1: Stat::of(&t1).expect("non-empty"),
                top5: Stat::of(&t5).expect("non-empty"),
            })
            .collect();
        rows.push(AggregateRow {
            cell,
            coords,
            mode,
            epochs,
            completed,
            failed: seeds.len() - completed,
            branches,
        });
    }
    Ok(rows)
}

pub const AGGREGATE_COLUMNS: [&str; 14] = [
    "cell",
    "coordinates",
    "mode",
    "epochs",
    "completed",
    "failed",
    "top1_cnn_mean",
    "top1_cnn_std",
    "top5_cnn_mean",
    "top5_cnn_std",
    "top1_trans_mean",
    "top1_trans_std",
    "top5_trans_mean",
    "top5_trans_std",
];

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = AGGREGATE_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let coords = r
            .coords
            .iter()
            .map(|(a, v)| format!("{a}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = write!(s, "{},{},{},{},{},{}", r.cell, coords, r.mode, r.epochs, r.completed, r.failed);
        for role in Role::BOTH {
            match r.branches.iter().find(|b| b.role == role) {
                Some(b) => {
                    let _ = write!(s, ",{},{},{},{}", b.top1.mean, b.top1.std, b.top5.mean, b.top5.std);
                }
                None => s.push_str(",,,,"),
            }
        }
        s.push('\n');
    }
    s
}

/// Text table grouped by branch: one row per (branch, cell) with the
/// framework, epochs, top-1 and top-5 as `mean ± std` percentages.
pub fn summary_table(rows: &[AggregateRow]) -> String {
    let mut s = format!(
        "{:<8} {:<12} {:<12} {:<40} {:>6} {:>16} {:>16}\n",
        "branch", "backbone", "framework", "setting", "epochs", "top-1 (%)", "top-5 (%)"
    );
    for role in Role::BOTH {
        for r in rows {
            let Some(b) = r.branches.iter().find(|b| b.role == role) else {
                continue;
            };
            let setting = r
                .coords
                .iter()
                .map(|(a, v)| format!("{a}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            let pct = |st: Stat| format!("{:.2} ± {:.2}", 100.0 * st.mean, 100.0 * st.std);
            let _ = writeln!(
                s,
                "{:<8} {:<12} {:<12} {:<40} {:>6} {:>16} {:>16}",
                role.key(),
                b.kind,
                r.mode,
                if setting.is_empty() { "-".into() } else { setting },
                r.epochs,
                pct(b.top1),
                pct(b.top5)
            );
        }
    }
    s
}
