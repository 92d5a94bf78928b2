//! Mask-ratio and mask-strategy sweeps over identically trained runs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::record::RunRecord;
use super::train::{experiment_dir, load_splits, train_on, Splits, TrainOptions};
use crate::error::{Error, Result};
use crate::masking::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    /// The strategy cannot realize the ratio; no runs were made.
    Skipped,
}

/// One (strategy, ratio) entry of a sweep, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub ratio: f64,
    pub status: RowStatus,
    pub seeds: Vec<u64>,
    pub top1: Vec<f64>,
    pub top1_mean: Option<f64>,
    pub top1_std: Option<f64>,
    pub top5_mean: Option<f64>,
    pub config_hash: String,
    /// Hash of the config without the swept key; equal across rows.
    pub fairness_hash: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub sweep: String,
    pub rows: Vec<SweepRow>,
    pub csv: Option<PathBuf>,
}

impl SweepTable {
    /// The completed row with the highest mean top-1.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.top1_mean.is_some())
            .max_by(|a, b| a.top1_mean.partial_cmp(&b.top1_mean).expect("finite accuracy"))
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

fn run_row(
    config: &ExperimentConfig,
    swept: &str,
    data: &Splits,
    options: &TrainOptions,
) -> Result<SweepRow> {
    let base = SweepRow {
        strategy: config.mask.strategy,
        ratio: config.mask.ratio,
        status: RowStatus::Ok,
        seeds: config.seeds.clone(),
        top1: Vec::new(),
        top1_mean: None,
        top1_std: None,
        top5_mean: None,
        config_hash: config.hash(),
        fairness_hash: config.hash_without(&[swept]),
        note: String::new(),
    };
    if let Err(e) = config.validate() {
        if matches!(e, Error::UnsupportedRatio { .. }) {
            log::warn!("skipping {} at ratio {}: {e}", config.mask.strategy, config.mask.ratio);
            return Ok(SweepRow {
                status: RowStatus::Skipped,
                note: e.to_string(),
                ..base
            });
        }
        return Err(e);
    }
    let runs: Vec<RunRecord> = config
        .seeds
        .iter()
        .map(|&s| train_on(config, s, data, options))
        .collect::<Result<_>>()?;
    let top1: Vec<f64> = runs.iter().filter_map(RunRecord::top1).collect();
    let top5: Vec<f64> = runs.iter().filter_map(|r| r.test.as_ref().map(|t| t.top5)).collect();
    let stats = mean_std(&top1);
    Ok(SweepRow {
        top1_mean: stats.map(|s| s.0),
        top1_std: stats.map(|s| s.1),
        top5_mean: mean_std(&top5).map(|s| s.0),
        top1,
        ..base
    })
}

fn check_fairness(rows: &[SweepRow]) -> Result<()> {
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.fairness_hash != first.fairness_hash) {
            return Err(Error::Consistency(format!(
                "sweep rows differ beyond the swept key ({} vs {})",
                first.strategy, bad.strategy
            )));
        }
    }
    Ok(())
}

fn write_csv(table: &SweepTable, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep",
        "strategy",
        "ratio",
        "status",
        "seeds",
        "top1",
        "top1_mean",
        "top1_std",
        "top5_mean",
        "config_hash",
        "fairness_hash",
        "note",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let list = |v: &[String]| v.join(";");
    for r in &table.rows {
        let status = match r.status {
            RowStatus::Ok => "ok",
            RowStatus::Skipped => "skipped",
        };
        w.write_record([
            table.sweep.clone(),
            r.strategy.to_string(),
            r.ratio.to_string(),
            status.into(),
            list(&r.seeds.iter().map(u64::to_string).collect::<Vec<_>>()),
            list(&r.top1.iter().map(f64::to_string).collect::<Vec<_>>()),
            opt(r.top1_mean),
            opt(r.top1_std),
            opt(r.top5_mean),
            r.config_hash.clone(),
            r.fairness_hash.clone(),
            r.note.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn finish(mut table: SweepTable, base: &ExperimentConfig, options: &TrainOptions) -> Result<SweepTable> {
    check_fairness(&table.rows)?;
    if !options.dry_run {
        let path = experiment_dir(base).join(format!("sweep_{}.csv", table.sweep));
        write_csv(&table, &path)?;
        table.csv = Some(path);
    }
    Ok(table)
}

/// One row per ratio with the base strategy. Ratios the strategy cannot
/// realize (grid ratios other than `1/k²`) become skipped rows.
pub fn sweep_mask_ratio_on(
    base: &ExperimentConfig,
    ratios: &[f64],
    data: &Splits,
    options: &TrainOptions,
) -> Result<SweepTable> {
    if ratios.is_empty() {
        return Err(Error::Config("mask-ratio sweep needs at least one ratio".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Range(format!("sweep ratio {r} is outside (0, 1)")));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut c = base.clone();
        c.mask.ratio = ratio;
        c.name = format!("{}-ratio-{ratio}", base.name);
        rows.push(run_row(&c, "mask.ratio", data, options)?);
    }
    finish(
        SweepTable {
            sweep: "ratio".into(),
            rows,
            csv: None,
        },
        base,
        options,
    )
}

pub fn sweep_mask_ratio(
    base: &ExperimentConfig,
    ratios: &[f64],
    options: &TrainOptions,
) -> Result<SweepTable> {
    base.validate()?;
    sweep_mask_ratio_on(base, ratios, &load_splits(base)?, options)
}

/// One row per strategy in patch, grid, random, combined, patch+grid+random.
pub fn sweep_strategy_on(
    base: &ExperimentConfig,
    data: &Splits,
    options: &TrainOptions,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let mut c = base.clone();
        c.mask.strategy = strategy;
        c.name = format!("{}-strategy-{strategy}", base.name);
        rows.push(run_row(&c, "mask.strategy", data, options)?);
    }
    finish(
        SweepTable {
            sweep: "strategy".into(),
            rows,
            csv: None,
        },
        base,
        options,
    )
}

pub fn sweep_strategy(base: &ExperimentConfig, options: &TrainOptions) -> Result<SweepTable> {
    base.validate()?;
    sweep_strategy_on(base, &load_splits(base)?, options)
}
