use super::evaluate::{evaluate, latest_checkpoint};
use super::train::train;
use super::{ExperimentConfig, HarnessError, CONFIG_KEYS};
use crate::metrics::{bar_chart, Aggregate, Bar, MetricReport};
use crate::scalar::Scalar;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    /// `base`, or `key=value` for a one-factor variation.
    pub name: String,
    pub axis: Option<(String, String)>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub enum GridOutcome {
    Completed(Box<MetricReport>),
    Failed { kind: String, message: String },
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub cells: Vec<(GridCell, GridOutcome)>,
}

fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.out_dir = Default::default();
    c
}

/// The base cell plus one cell per (axis, value) that differs from every cell before it.
pub fn expand_grid(base: &ExperimentConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<GridCell>, HarnessError> {
    let cells_dir = base.out_dir.join("cells");
    let mut base_cfg = base.clone();
    base_cfg.out_dir = cells_dir.join("base");
    let mut cells = vec![GridCell { name: "base".into(), axis: None, config: base_cfg }];
    for (key, values) in axes {
        if !CONFIG_KEYS.contains(&key.as_str()) || key == "out_dir" {
            return Err(HarnessError::Config(format!("grid axis `{key}` is not a config field")));
        }
        for value in values {
            let mut cfg = base.clone();
            cfg.set(key, value)?;
            if cells.iter().any(|c| comparable(&c.config) == comparable(&cfg)) {
                continue;
            }
            let name = format!("{key}={}", value.trim());
            cfg.out_dir = cells_dir.join(name.replace(['/', '\\'], "_"));
            cells.push(GridCell { name, axis: Some((key.clone(), value.trim().to_string())), config: cfg });
        }
    }
    Ok(cells)
}

fn run_cell<T: Scalar>(cell: &GridCell) -> Result<MetricReport, HarnessError> {
    let cfg = &cell.config;
    let trainer = train::<T>(cfg.clone())?;
    drop(trainer);
    let ckpt = latest_checkpoint(&cfg.out_dir)
        .ok_or_else(|| HarnessError::Config(format!("no checkpoint written under {}", cfg.out_dir.display())))?;
    evaluate::<T>(&ckpt, &cfg.dataset, cfg.eval_split, &cfg.out_dir)
}

/// Train and evaluate every cell in turn. Failing cells are recorded and the grid continues.
/// Writes `grid_summary.csv` and grouped plots into the base `out_dir`.
pub fn run_grid<T: Scalar>(base: &ExperimentConfig, axes: &[(String, Vec<String>)]) -> Result<GridReport, HarnessError> {
    let cells = expand_grid(base, axes)?;
    let mut report = GridReport { cells: Vec::with_capacity(cells.len()) };
    for cell in cells {
        let outcome = match run_cell::<T>(&cell) {
            Ok(r) => GridOutcome::Completed(Box::new(r)),
            Err(e) => GridOutcome::Failed { kind: e.kind().into(), message: e.to_string() },
        };
        report.cells.push((cell, outcome));
    }
    report.write(base)?;
    Ok(report)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl GridReport {
    pub fn overall(&self, name: &str) -> Option<&Aggregate> {
        self.cells.iter().find(|(c, _)| c.name == name).and_then(|(_, o)| match o {
            GridOutcome::Completed(r) => Some(&r.overall),
            GridOutcome::Failed { .. } => None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,axis,value,status,ssim_mean,ssim_std,psnr_mean,psnr_std,error\n");
        for (cell, outcome) in &self.cells {
            let (axis, value) = cell.axis.clone().unwrap_or_default();
            match outcome {
                GridOutcome::Completed(r) => {
                    let o = &r.overall;
                    writeln!(
                        s,
                        "{},{},{},ok,{},{},{},{},",
                        csv_field(&cell.name),
                        axis,
                        csv_field(&value),
                        o.ssim_mean,
                        o.ssim_std,
                        o.psnr_mean,
                        o.psnr_std
                    )
                    .unwrap();
                }
                GridOutcome::Failed { kind, message } => {
                    writeln!(
                        s,
                        "{},{},{},failed:{kind},,,,,{}",
                        csv_field(&cell.name),
                        axis,
                        csv_field(&value),
                        csv_field(message)
                    )
                    .unwrap();
                }
            }
        }
        s
    }

    pub fn write(&self, base: &ExperimentConfig) -> Result<(), HarnessError> {
        let dir = &base.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let path = dir.join("grid_summary.csv");
        std::fs::write(&path, self.to_csv()).map_err(|e| HarnessError::io(&path, e))?;
        let bars = |f: fn(&Aggregate) -> (f64, f64)| -> Vec<Bar> {
            self.cells
                .iter()
                .map(|(cell, outcome)| {
                    let (mean, std) = match outcome {
                        GridOutcome::Completed(r) => f(&r.overall),
                        GridOutcome::Failed { .. } => (f64::NAN, f64::NAN),
                    };
                    Bar { label: cell.name.clone(), mean, std }
                })
                .collect()
        };
        bar_chart(&bars(|a| (a.ssim_mean, a.ssim_std)), &dir.join("plots/grid_ssim.png"))?;
        bar_chart(&bars(|a| (a.psnr_mean, a.psnr_std)), &dir.join("plots/grid_psnr.png"))?;
        Ok(())
    }
}
