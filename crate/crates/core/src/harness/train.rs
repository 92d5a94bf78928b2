//! Seeded training and evaluation of one model variant.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Schedule};
use super::dataset::{balanced_indices, resolve_root, CifarSource, Dataset, Split, CIFAR_CLASSES};
use super::record::{
    append_record, EpochMetrics, EvalMetrics, EvalRecord, RunRecord, RunStatus, RECORD_VERSION,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{MaskAnyNet, Mode};
use crate::nn::Optimizer;
use crate::seed;

const TRAIN_IMAGES: usize = 50_000;
const EVAL_BATCH: usize = 100;
const LATENCY_WARMUP: usize = 10;
const LATENCY_RUNS: usize = 100;
const CROP_PAD: usize = 4;

/// Train, validation and test sets of one dataset config.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    /// Held-out training images; empty when the whole train split is used.
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads the class-balanced subsets named by `config.dataset`.
pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    let d = &config.dataset;
    let source = CifarSource::open(&resolve_root(d.root.as_deref()))?;
    let train_n = d.train_subset.unwrap_or(TRAIN_IMAGES);
    let train_labels = source.labels(Split::Train);
    let train_idx = balanced_indices(train_labels, CIFAR_CLASSES, train_n, 0);
    let val_idx = balanced_indices(
        train_labels,
        CIFAR_CLASSES,
        d.val_subset,
        train_n.div_ceil(CIFAR_CLASSES),
    );
    let test_labels = source.labels(Split::Test);
    let test_idx = match d.test_subset {
        Some(n) => balanced_indices(test_labels, CIFAR_CLASSES, n, 0),
        None => (0..test_labels.len()).collect(),
    };
    Ok(Splits {
        train: source.load(Split::Train, &train_idx)?,
        val: source.load(Split::Train, &val_idx)?,
        test: source.load(Split::Test, &test_idx)?,
    })
}

/// Options that do not change results.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Recorded verbatim in the run record.
    pub overrides: Vec<String>,
    /// Skip writing checkpoints and records (used by tests).
    pub dry_run: bool,
}

/// Zero-padded random crop and horizontal flip.
pub fn augment(image: &Image, rng: &mut ChaCha8Rng) -> Image {
    let dy = rng.random_range(0..=2 * CROP_PAD);
    let dx = rng.random_range(0..=2 * CROP_PAD);
    let flip = rng.random_bool(0.5);
    let (h, w) = image.dims();
    Image::from_fn(image.channels(), h, w, |c, y, x| {
        let sx = if flip { w - 1 - x } else { x };
        let (iy, ix) = (y + dy, sx + dx);
        if iy < CROP_PAD || ix < CROP_PAD || iy - CROP_PAD >= h || ix - CROP_PAD >= w {
            0.0
        } else {
            image.get(c, iy - CROP_PAD, ix - CROP_PAD)
        }
    })
}

/// Learning rate at `step` of `total`.
pub fn learning_rate(schedule: Schedule, base: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let t = step as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Rank-based top-1 / top-5 hit counts for a `(B, K)` logit tensor. Ties
/// are broken towards the lower class index.
pub fn topk_hits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let rows: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let (mut top1, mut top5) = (0, 0);
    for (row, &y) in rows.iter().zip(labels) {
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        top1 += usize::from(rank == 0);
        top5 += usize::from(rank < 5);
    }
    Ok((top1, top5))
}

/// Top-1 and top-5 accuracy in percent, in eval mode.
pub fn accuracy(model: &MaskAnyNet, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("cannot score an empty dataset".into()));
    }
    let (mut top1, mut top5) = (0, 0);
    for (b, (images, labels)) in data
        .images
        .chunks(EVAL_BATCH)
        .zip(data.labels.chunks(EVAL_BATCH))
        .enumerate()
    {
        let logits = model.forward(images, Mode::Eval, b as u64)?;
        let (h1, h5) = topk_hits(&logits, labels)?;
        top1 += h1;
        top5 += h5;
    }
    let n = data.len() as f64;
    Ok((100.0 * top1 as f64 / n, 100.0 * top5 as f64 / n))
}

/// Median batch-1 forward time in milliseconds over 100 runs after warm-up.
pub fn latency_ms(model: &MaskAnyNet, image: &Image) -> Result<f64> {
    let batch = std::slice::from_ref(image);
    for _ in 0..LATENCY_WARMUP {
        model.forward(batch, Mode::Eval, 0)?;
    }
    let mut times = Vec::with_capacity(LATENCY_RUNS);
    for _ in 0..LATENCY_RUNS {
        let start = Instant::now();
        model.forward(batch, Mode::Eval, 0)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(0.5 * (times[LATENCY_RUNS / 2 - 1] + times[LATENCY_RUNS / 2]))
}

/// Accuracy, latency and parameter count of `model` on `data`.
pub fn evaluate_model(model: &MaskAnyNet, data: &Dataset, split: &str) -> Result<EvalMetrics> {
    let (top1, top5) = accuracy(model, data)?;
    Ok(EvalMetrics {
        split: split.into(),
        samples: data.len(),
        top1,
        top5,
        latency_ms: latency_ms(model, &data.images[0])?,
        params: model.param_count(),
    })
}

/// Directory holding the records and checkpoints of an experiment.
pub fn experiment_dir(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join(&config.name)
}

pub fn records_path(config: &ExperimentConfig) -> PathBuf {
    experiment_dir(config).join("runs.jsonl")
}

fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    let variant = config.toggles.label().to_ascii_lowercase().replace('+', "_");
    format!("{variant}-seed{seed}")
}

fn labels_tensor(labels: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

/// Trains the configured variant with one seed on preloaded data, evaluates
/// it on the test split and persists the checkpoint and run record.
///
/// A non-finite loss aborts the run: the record is written with status
/// `diverged` and [`Error::Diverged`] is returned.
pub fn train_on(
    config: &ExperimentConfig,
    seed: u64,
    data: &Splits,
    options: &TrainOptions,
) -> Result<RunRecord> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let started = Instant::now();
    let device = Device::Cpu;
    let model = MaskAnyNet::build(config.model_config(seed), DType::F32, &device)?;
    let t = &config.train;
    let mut optimizer = Optimizer::new(
        t.optimizer,
        model.params().vars(),
        t.lr,
        t.momentum,
        t.weight_decay,
    )?;
    let steps_per_epoch = data.train.len().div_ceil(t.batch_size);
    let total_steps = steps_per_epoch * t.epochs;
    let mut record = RunRecord {
        record_version: RECORD_VERSION,
        kind: "train".into(),
        run_id: run_id(config, seed),
        variant: config.toggles.label().into(),
        seed,
        config_hash: config.hash(),
        fairness_hash: config.hash_without(&["toggles"]),
        config: config.clone(),
        overrides: options.overrides.clone(),
        status: RunStatus::Completed,
        epochs: Vec::with_capacity(t.epochs),
        test: None,
        params: model.param_count(),
        checkpoint: None,
        wall_seconds: 0.0,
        error: None,
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 0..t.epochs {
        let epoch_start = Instant::now();
        let epoch_seed = seed::derive(seed, epoch as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        let mut lr = t.lr;
        for (b, idx) in order.chunks(t.batch_size).enumerate() {
            let images: Vec<Image> = idx
                .iter()
                .map(|&i| {
                    let img = &data.train.images[i];
                    if t.augment {
                        augment(img, &mut rng)
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let logits = model.forward(&images, Mode::Train, seed::derive(epoch_seed, b as u64))?;
            let loss = candle_nn::loss::cross_entropy(&logits, &labels_tensor(&labels, &device)?)?;
            let loss_value = loss.to_scalar::<f32>()?;
            if !loss_value.is_finite() {
                let err = Error::Diverged {
                    epoch,
                    step: b,
                    loss: loss_value,
                };
                record.status = RunStatus::Diverged;
                record.error = Some(err.to_string());
                record.wall_seconds = started.elapsed().as_secs_f64();
                if !options.dry_run {
                    append_record(&records_path(config), &record)?;
                }
                return Err(err);
            }
            lr = learning_rate(t.schedule, t.lr, step, total_steps);
            optimizer.set_learning_rate(lr);
            optimizer.step(&loss.backward()?)?;
            step += 1;
            loss_sum += loss_value as f64 * labels.len() as f64;
            hits += topk_hits(&logits.detach(), &labels)?.0;
        }
        let (val_top1, val_top5) = if data.val.is_empty() {
            (None, None)
        } else {
            let (a, b) = accuracy(&model, &data.val)?;
            (Some(a), Some(b))
        };
        let n = data.train.len() as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n,
            train_top1: 100.0 * hits as f64 / n,
            val_top1,
            val_top5,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}/{}: loss {:.4} train {:.2}% val {}",
            record.run_id,
            metrics.epoch,
            t.epochs,
            metrics.train_loss,
            metrics.train_top1,
            val_top1.map_or("-".into(), |v| format!("{v:.2}%"))
        );
        record.epochs.push(metrics);
    }
    if !data.test.is_empty() {
        record.test = Some(evaluate_model(&model, &data.test, "test")?);
    }
    if !options.dry_run {
        let dir = experiment_dir(config).join(&record.run_id);
        model.save(&dir)?;
        record.checkpoint = Some(dir);
    }
    record.wall_seconds = started.elapsed().as_secs_f64();
    if !options.dry_run {
        append_record(&records_path(config), &record)?;
    }
    Ok(record)
}

/// Loads the data and trains one run per configured seed.
pub fn train(config: &ExperimentConfig, options: &TrainOptions) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let data = load_splits(config)?;
    config
        .seeds
        .iter()
        .map(|&s| train_on(config, s, &data, options))
        .collect()
}

/// Evaluates a saved checkpoint on a split of the configured dataset and
/// appends an eval record next to the checkpoint's experiment records.
pub fn evaluate(
    checkpoint: &Path,
    config: &ExperimentConfig,
    split: Split,
    records: Option<&Path>,
) -> Result<EvalRecord> {
    let model = MaskAnyNet::load(checkpoint)?;
    let mc = model.config();
    if (mc.channels, mc.height, mc.width, mc.num_classes) != (3, 32, 32, CIFAR_CLASSES) {
        return Err(Error::Consistency(format!(
            "checkpoint expects {}x{}x{} inputs with {} classes; the dataset has 3x32x32 with {CIFAR_CLASSES}",
            mc.channels, mc.height, mc.width, mc.num_classes
        )));
    }
    let data = load_splits(config)?;
    let (set, name) = match split {
        Split::Train => (&data.train, "train"),
        Split::Test => (&data.test, "test"),
    };
    let record = EvalRecord {
        record_version: RECORD_VERSION,
        kind: "eval".into(),
        checkpoint: checkpoint.to_path_buf(),
        metrics: evaluate_model(&model, set, name)?,
    };
    if let Some(path) = records {
        append_record(path, &record)?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Toggles;

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let images = labels
            .iter()
            .map(|&l| {
                // Class 0 is dark, class 1 bright, plus noise.
                let base = 0.2 + 0.6 * l as f32;
                Image::from_fn(3, 32, 32, |_, _, _| base + rng.random_range(-0.1..0.1))
            })
            .collect();
        Dataset { images, labels }
    }

    fn tiny_config(toggles: Toggles) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.toggles = toggles;
        c.train.epochs = 2;
        c.train.batch_size = 8;
        c.seeds = vec![3];
        c
    }

    #[test]
    fn augment_keeps_shape_and_is_seeded() {
        let img = Image::from_fn(3, 8, 8, |c, y, x| (c + y + x) as f32 / 20.0);
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(1));
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.dims(), (8, 8));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(learning_rate(Schedule::Cosine, 0.1, 0, 10), 0.1);
        assert!(learning_rate(Schedule::Cosine, 0.1, 10, 10).abs() < 1e-12);
        assert!((learning_rate(Schedule::Cosine, 0.1, 5, 10) - 0.05).abs() < 1e-12);
        assert_eq!(learning_rate(Schedule::Constant, 0.1, 7, 10), 0.1);
    }

    #[test]
    fn topk_ranks_with_ties() {
        let logits = Tensor::new(
            &[[0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0], [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]],
            &Device::Cpu,
        )
        .unwrap();
        assert_eq!(topk_hits(&logits, &[5, 0]).unwrap(), (2, 2));
        assert_eq!(topk_hits(&logits, &[0, 1]).unwrap(), (0, 1));
    }

    #[test]
    fn short_runs_learn_and_repeat_exactly() {
        let data = Splits {
            train: tiny_data(32, 0),
            val: tiny_data(8, 1),
            test: tiny_data(8, 2),
        };
        let opts = TrainOptions {
            dry_run: true,
            ..Default::default()
        };
        for toggles in [Toggles::BASELINE, Toggles::FULL] {
            let cfg = tiny_config(toggles);
            let a = train_on(&cfg, 3, &data, &opts).unwrap();
            let b = train_on(&cfg, 3, &data, &opts).unwrap();
            assert_eq!(a.epochs.len(), 2);
            assert_eq!(a.status, RunStatus::Completed);
            let (ta, tb) = (a.test.unwrap(), b.test.unwrap());
            assert_eq!((ta.top1, ta.top5), (tb.top1, tb.top5));
            assert_eq!(a.epochs[1].train_loss, b.epochs[1].train_loss);
            assert!(ta.top5 >= ta.top1);
        }
    }

    #[test]
    fn divergence_writes_an_aborted_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Toggles::BASELINE);
        cfg.output.dir = dir.path().to_path_buf();
        cfg.train.lr = 1e30;
        cfg.train.epochs = 3;
        let data = Splits {
            train: tiny_data(16, 0),
            val: Dataset::default(),
            test: Dataset::default(),
        };
        let err = train_on(&cfg, 0, &data, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        let recs = super::super::record::read_run_records(&records_path(&cfg)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].status, RunStatus::Diverged);
    }
}
