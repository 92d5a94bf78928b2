//! Command-line front end.
//!
//! Every option that changes results is a config key: `--seed`, `--out`,
//! `--strategy`, `--ratio` and `--block-size` are spelled-out forms of the
//! `--set` overrides `seeds=[N]`, `output.dir=…`, `mask.strategy=…`,
//! `mask.ratio=…` and `mask.block_size=…`. Overrides are applied after the
//! config file and recorded in run records. Exit status is 0 on success, 2
//! for usage or configuration errors and 1 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::explain::{grad_cam, overlay, predicted_class, write_grid};
use crate::harness::{
    analyze_corpus, crop_to_mask_grid, evaluate, experiment_dir, records_path, sweep_mask_ratio, sweep_strategy,
    train, BackboneExtractor, ExperimentConfig, Split, SweepTable, TrainOptions,
};
use crate::image::Image;
use crate::masking::{apply_mask, MaskPolicy, Strategy};
use crate::model::MaskAnyNet;
use crate::reuse::{build_reuse, compose_reuse, extract_regions, scatter_back};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "maskanynet", version, about = "Masked-region reuse networks: masking, training, analysis")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML); built-in defaults when absent.
    #[arg(long, global = true, env = "MASKANYNET_CONFIG")]
    pub config: Option<PathBuf>,
    /// Single seed; same as `--set seeds=[N]`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; same as `--set output.dir=DIR`.
    #[arg(long, global = true, env = "MASKANYNET_OUT")]
    pub out: Option<PathBuf>,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print a machine-readable summary to stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

/// Mask settings shared by the subcommands that generate masks.
#[derive(Debug, Args, Default)]
pub struct MaskArgs {
    /// `mask.strategy`.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// `mask.ratio`.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// `mask.block_size`.
    #[arg(long)]
    pub block_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mask one image, build its reuse image and verify the round trip.
    MaskPreview {
        image: PathBuf,
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Train one run per configured seed.
    Train {
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Evaluate a checkpoint directory.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train the base config at each mask ratio.
    SweepRatio {
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Train the base config under every masking strategy.
    SweepStrategy {
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Entropy and similarity analysis of masking strategies over a folder.
    Analyze {
        dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "patch,grid,random")]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Grad-CAM overlays of a checkpoint, optionally beside a baseline.
    Heatmap {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Target class; the model's prediction when absent.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        layer: Option<String>,
    },
}

impl Command {
    fn mask_args(&self) -> Option<&MaskArgs> {
        match self {
            Command::MaskPreview { mask, .. }
            | Command::Train { mask }
            | Command::SweepRatio { mask, .. }
            | Command::SweepStrategy { mask }
            | Command::Analyze { mask, .. } => Some(mask),
            Command::Eval { .. } | Command::Heatmap { .. } => None,
        }
    }
}

/// Config overrides in application order: named flags first, then `--set`.
pub fn collect_overrides(cli: &Cli) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(seed) = cli.common.seed {
        out.push(format!("seeds=[{seed}]"));
    }
    if let Some(dir) = &cli.common.out {
        out.push(format!("output.dir={}", toml_string(&dir.to_string_lossy())));
    }
    if let Some(m) = cli.command.mask_args() {
        if let Some(s) = m.strategy {
            out.push(format!("mask.strategy={}", toml_string(s.name())));
        }
        if let Some(r) = m.ratio {
            out.push(format!("mask.ratio={r:?}"));
        }
        if let Some(b) = m.block_size {
            out.push(format!("mask.block_size={b}"));
        }
    }
    out.extend(cli.common.overrides.iter().cloned());
    out
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn load_config(cli: &Cli, overrides: &[String]) -> Result<ExperimentConfig> {
    let config = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path, overrides)?,
        None => ExperimentConfig::defaults_with(overrides)?,
    };
    config.validate()?;
    Ok(config)
}

/// What a subcommand reports: human lines, artifact paths and a JSON body.
struct Outcome {
    lines: Vec<String>,
    artifacts: Vec<PathBuf>,
    summary: Value,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let json_mode = cli.common.json;
    match execute(&cli) {
        Ok(outcome) => {
            if json_mode {
                let mut body = outcome.summary;
                body["status"] = json!("ok");
                body["artifacts"] = json!(outcome.artifacts);
                println!("{body}");
            } else {
                for line in &outcome.lines {
                    println!("{line}");
                }
                for path in &outcome.artifacts {
                    println!("wrote {}", path.display());
                }
            }
            EXIT_OK
        }
        Err(e) => {
            let code = if e.is_config_error() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            };
            eprintln!("error: {e}");
            if json_mode {
                println!("{}", json!({ "status": "error", "exit": code, "error": e.to_string() }));
            }
            code
        }
    }
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let overrides = collect_overrides(cli);
    let config = load_config(cli, &overrides)?;
    let options = TrainOptions {
        overrides: overrides.clone(),
        dry_run: false,
    };
    match &cli.command {
        Command::MaskPreview { image, .. } => mask_preview(&config, image),
        Command::Train { .. } => run_train(&config, &options),
        Command::Eval { checkpoint, split } => run_eval(&config, checkpoint, *split),
        Command::SweepRatio { ratios, .. } => {
            sweep_outcome(sweep_mask_ratio(&config, ratios, &options)?)
        }
        Command::SweepStrategy { .. } => sweep_outcome(sweep_strategy(&config, &options)?),
        Command::Analyze { dir, strategies, .. } => run_analyze(&config, dir, strategies),
        Command::Heatmap {
            checkpoint,
            images,
            baseline,
            class,
            layer,
        } => run_heatmap(
            &config,
            checkpoint,
            images,
            baseline.as_deref(),
            *class,
            layer.as_deref(),
        ),
    }
}

fn first_seed(config: &ExperimentConfig) -> u64 {
    config.seeds.first().copied().unwrap_or(0)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn mask_preview(config: &ExperimentConfig, path: &Path) -> Result<Outcome> {
    let (image, block) = crop_to_mask_grid(&Image::load(path)?, &config.mask)?;
    let seed = first_seed(config);
    let policy = MaskPolicy {
        block_size: Some(block),
        ..config.mask.clone()
    };
    let spec = policy.generate(image.dims(), seed)?;
    let masked = apply_mask(&image, &spec, 0.0)?;
    let reuse = build_reuse(&image, &spec)?;
    let recomposed = compose_reuse(&extract_regions(&image, &spec)?, spec.reuse_block())?;
    let restored = scatter_back(&recomposed, &spec, &masked.pixels)?;
    let exact = restored == image;

    let dir = experiment_dir(config).join("preview");
    let stem = file_stem(path);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let masked_path = dir.join(format!("{stem}.masked.png"));
    masked.pixels.save_png(&masked_path)?;
    let (reuse_png, reuse_layout) = reuse.export(&dir, &format!("{stem}.reuse"))?;
    let mask_path = dir.join(format!("{stem}.mask.txt"));
    std::fs::write(&mask_path, spec.to_record()).map_err(|e| Error::io(&mask_path, e))?;

    let verdict = if exact { "ok (bit-exact)" } else { "MISMATCH" };
    let outcome = Outcome {
        lines: vec![
            format!(
                "{} ratio {} seed {seed}: {} of {} cells masked, coverage {:.4}",
                spec.strategy(),
                spec.ratio(),
                spec.masked_count(),
                spec.cell_count(),
                spec.coverage()
            ),
            format!("round-trip: {verdict}"),
        ],
        artifacts: vec![masked_path, reuse_png, reuse_layout, mask_path],
        summary: json!({
            "command": "mask-preview",
            "strategy": spec.strategy(),
            "ratio": spec.ratio(),
            "seed": seed,
            "masked_cells": spec.masked_count(),
            "cells": spec.cell_count(),
            "coverage": spec.coverage(),
            "round_trip_exact": exact,
        }),
    };
    if exact {
        Ok(outcome)
    } else {
        Err(Error::Consistency(format!(
            "reuse round trip did not restore {}",
            path.display()
        )))
    }
}

fn run_train(config: &ExperimentConfig, options: &TrainOptions) -> Result<Outcome> {
    let records = train(config, options)?;
    let mut lines = Vec::new();
    let mut artifacts = Vec::new();
    for r in &records {
        lines.push(format!(
            "{} top1 {:.4} params {} ({:.1}s)",
            r.run_id,
            r.top1().unwrap_or(f64::NAN),
            r.params,
            r.wall_seconds
        ));
        artifacts.extend(r.checkpoint.iter().cloned());
    }
    artifacts.push(records_path(config));
    Ok(Outcome {
        lines,
        artifacts,
        summary: json!({ "command": "train", "runs": records }),
    })
}

fn run_eval(config: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<Outcome> {
    let records = records_path(config);
    let record = evaluate(checkpoint, config, split, Some(&records))?;
    let m = &record.metrics;
    Ok(Outcome {
        lines: vec![format!(
            "{} {}: top1 {:.4} top5 {:.4} over {} images, {:.3} ms/image",
            checkpoint.display(),
            m.split,
            m.top1,
            m.top5,
            m.samples,
            m.latency_ms
        )],
        artifacts: vec![records],
        summary: json!({ "command": "eval", "record": record }),
    })
}

fn sweep_outcome(table: SweepTable) -> Result<Outcome> {
    let mut lines: Vec<String> = table
        .rows
        .iter()
        .map(|r| match (r.top1_mean, r.top1_std) {
            (Some(m), Some(s)) => format!("{} {}: top1 {m:.4} ± {s:.4}", r.strategy, r.ratio),
            _ => format!("{} {}: skipped ({})", r.strategy, r.ratio, r.note),
        })
        .collect();
    if let Some(best) = table.best() {
        lines.push(format!(
            "best: {} ratio {} top1 {:.4}",
            best.strategy,
            best.ratio,
            best.top1_mean.unwrap_or(f64::NAN)
        ));
    }
    Ok(Outcome {
        lines,
        artifacts: table.csv.iter().cloned().collect(),
        summary: json!({ "command": format!("sweep-{}", table.sweep), "table": table }),
    })
}

fn run_analyze(config: &ExperimentConfig, dir: &Path, strategies: &[Strategy]) -> Result<Outcome> {
    let seed = first_seed(config);
    let extractor = match &config.analysis.extractor {
        Some(path) => BackboneExtractor::from_checkpoint(path)?,
        None => BackboneExtractor::seeded(config.model.backbone, seed)?,
    };
    let csv = experiment_dir(config).join("analysis.csv");
    let report = analyze_corpus(
        dir,
        strategies,
        &config.mask,
        &config.analysis,
        &extractor,
        seed,
        Some(&csv),
    )?;
    let mut lines: Vec<String> = report
        .summaries
        .iter()
        .map(|s| {
            format!(
                "{}: delta_h {:.4} s_ds {:.4} s {:.4} f {:.4} over {} images",
                s.strategy, s.delta_h, s.s_ds, s.s, s.f, s.images
            )
        })
        .collect();
    for check in &report.orderings {
        let verdict = if check.pass { "PASS" } else { "FAIL" };
        lines.push(format!("{verdict} {} ({})", check.name, check.detail));
    }
    for path in &report.skipped {
        lines.push(format!("skipped {}", path.display()));
    }
    Ok(Outcome {
        lines,
        artifacts: vec![csv],
        summary: json!({
            "command": "analyze",
            "records": report.records.len(),
            "summaries": report.summaries,
            "orderings": report.orderings,
            "skipped": report.skipped,
        }),
    })
}

fn run_heatmap(
    config: &ExperimentConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    baseline: Option<&Path>,
    class: Option<usize>,
    layer: Option<&str>,
) -> Result<Outcome> {
    let model = MaskAnyNet::load(checkpoint)?;
    let base = baseline.map(MaskAnyNet::load).transpose()?;
    let dims = model.config().dims();
    let dir = experiment_dir(config).join("heatmaps");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rows = Vec::with_capacity(images.len());
    let mut artifacts = Vec::new();
    let mut entries = Vec::new();
    for path in images {
        let raw = Image::load(path)?;
        let image = if raw.dims() == dims {
            raw
        } else {
            crate::reuse::resize_bilinear(&raw, dims)?
        };
        let target = match class {
            Some(c) => c,
            None => predicted_class(&model, &image)?,
        };
        let mut row = vec![image.clone()];
        if let Some(b) = &base {
            row.push(overlay(&image, &grad_cam(b, &image, target, None)?.map, 0.5)?);
        }
        let cam = grad_cam(&model, &image, target, layer)?;
        let over = overlay(&image, &cam.map, 0.5)?;
        let out = dir.join(format!("{}.cam.png", file_stem(path)));
        over.save_png(&out)?;
        row.push(over);
        rows.push(row);
        entries.push(json!({ "image": path, "class": target, "layer": cam.layer }));
        artifacts.push(out);
    }
    let grid = dir.join("grid.png");
    write_grid(&rows, 2, &grid)?;
    artifacts.push(grid);
    Ok(Outcome {
        lines: vec![format!("{} heatmaps from {}", images.len(), checkpoint.display())],
        artifacts,
        summary: json!({ "command": "heatmap", "images": entries }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("maskanynet").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn named_flags_become_overrides_before_set() {
        let cli = parse(&[
            "mask-preview",
            "x.png",
            "--strategy",
            "patch",
            "--ratio",
            "0.25",
            "--seed",
            "3",
            "--out",
            "o",
            "--set",
            "mask.ratio=0.5",
        ]);
        let o = collect_overrides(&cli);
        assert_eq!(
            o,
            [
                "seeds=[3]",
                "output.dir=\"o\"",
                "mask.strategy=\"patch\"",
                "mask.ratio=0.25",
                "mask.ratio=0.5"
            ]
        );
        let config = load_config(&cli, &o).unwrap();
        assert_eq!(config.mask.ratio, 0.5);
        assert_eq!(config.mask.strategy, Strategy::Patch);
        assert_eq!(config.seeds, [3]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["maskanynet", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["maskanynet", "--help"]), EXIT_OK);
        assert_eq!(
            run(["maskanynet", "train", "--set", "mask.ratio=7"]),
            EXIT_USAGE
        );
        assert_eq!(
            run(["maskanynet", "mask-preview", "/nonexistent/x.png"]),
            EXIT_RUNTIME
        );
    }

    #[test]
    fn ratio_list_parses_comma_separated() {
        match parse(&["sweep-ratio", "--ratios", "0.1,0.25"]).command {
            Command::SweepRatio { ratios, .. } => assert_eq!(ratios, [0.1, 0.25]),
            other => panic!("{other:?}"),
        }
    }
}
