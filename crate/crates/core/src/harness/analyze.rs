//! Entropy and similarity analysis of masking strategies over an image corpus.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::Serialize;

use super::config::AnalysisConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masking::{apply_mask, grid_period, MaskPolicy, Strategy};
use crate::metrics::{f_score, shannon_entropy, AnalysisRecord, FeatureExtractor};
use crate::model::{BackboneId, Family, MaskAnyNet, ModelConfig, StageStack, Toggles};
use crate::reuse::{build_reuse, resize_bilinear, resize_to};
use crate::seed;

/// Globally average-pooled final spatial features of a convolutional
/// backbone. The last stage ends in a ReLU, so features are non-negative.
pub struct BackboneExtractor {
    stack: StageStack,
    mean: Vec<f32>,
    std: Vec<f32>,
    dims: (usize, usize),
    device: Device,
}

impl BackboneExtractor {
    pub fn from_model(model: &MaskAnyNet) -> Result<Self> {
        let c = model.config();
        if c.backbone.family() == Family::Transformer {
            return Err(Error::Config(format!(
                "feature extractor needs a convolutional backbone, got {}",
                c.backbone.name()
            )));
        }
        Ok(Self {
            stack: model.backbone_stack(),
            mean: c.mean.clone(),
            std: c.std.clone(),
            dims: c.dims(),
            device: model.params().device().clone(),
        })
    }

    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        Self::from_model(&MaskAnyNet::load(dir)?)
    }

    /// An untrained backbone initialized from `seed`.
    pub fn seeded(backbone: BackboneId, seed: u64) -> Result<Self> {
        let mut config = ModelConfig::cifar(backbone);
        config.toggles = Toggles::BASELINE;
        config.seed = seed;
        Self::from_model(&MaskAnyNet::build(config, DType::F32, &Device::Cpu)?)
    }
}

impl FeatureExtractor for BackboneExtractor {
    fn features(&self, image: &Image) -> Result<Vec<f32>> {
        let resized;
        let image = if image.dims() == self.dims {
            image
        } else {
            resized = resize_bilinear(image, self.dims)?;
            &resized
        };
        let x = image.normalized(&self.mean, &self.std)?.to_tensor(&self.device)?;
        let mut h = x;
        for stage in self.stack.stages().iter().filter(|s| s.is_spatial()) {
            h = stage.forward(&h)?;
        }
        Ok(h.mean((2, 3))?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }
}

/// One image's values under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image: String,
    pub record: AnalysisRecord,
}

/// Per-strategy means and F score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub images: usize,
    pub h_m: f64,
    pub h_c: f64,
    pub delta_h: f64,
    pub s_ds: f64,
    pub s: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub records: Vec<ImageRecord>,
    pub summaries: Vec<StrategySummary>,
    pub orderings: Vec<OrderingCheck>,
    pub skipped: Vec<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl AnalysisReport {
    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }
}

/// Center crop whose sides are multiples of the mask block times the grid
/// period, so every strategy at `mask.ratio` fits the image. Returns the
/// crop and the block size used.
pub fn crop_to_mask_grid(image: &Image, mask: &MaskPolicy) -> Result<(Image, usize)> {
    let probe = MaskPolicy {
        strategy: Strategy::Patch,
        ..mask.clone()
    };
    let block = probe.block_size_for(image.dims());
    let unit = block * grid_period(mask.ratio).unwrap_or(1);
    let (h, w) = image.dims();
    let (ch, cw) = (h / unit * unit, w / unit * unit);
    if ch == 0 || cw == 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is smaller than the mask unit {unit}"
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok((image.clone(), block));
    }
    Ok((image.crop((h - ch) / 2, (w - cw) / 2, ch, cw)?, block))
}

/// Values of one image under one strategy. Masked pixels are filled with 0
/// on the `[0, 1]` scale; the reuse image is resized back to the image size.
pub fn analyze_image(
    image: &Image,
    policy: &MaskPolicy,
    mask_seed: u64,
    original_features: &[f32],
    extractor: &dyn FeatureExtractor,
    s_a: f64,
) -> Result<AnalysisRecord> {
    let spec = policy.generate(image.dims(), mask_seed)?;
    let masked = apply_mask(image, &spec, 0.0)?;
    let reuse = resize_to(&build_reuse(image, &spec)?, image.dims())?;
    let h_m = shannon_entropy(&masked.pixels)?;
    let h_c = shannon_entropy(&reuse)?;
    let s_ds = crate::metrics::cosine_similarity(original_features, &extractor.features(&reuse)?)?;
    Ok(AnalysisRecord::new(policy.strategy, h_m, h_c, s_ds, s_a))
}

/// Analyzes named images under each strategy. Image `i` uses mask seed
/// `derive(seed, i)` for every strategy.
pub fn analyze_images(
    images: &[(String, Image)],
    strategies: &[Strategy],
    mask: &MaskPolicy,
    config: &AnalysisConfig,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<AnalysisReport> {
    if images.is_empty() {
        return Err(Error::Domain("analysis needs at least one image".into()));
    }
    if strategies.is_empty() {
        return Err(Error::Config("analysis needs at least one strategy".into()));
    }
    let fcfg = config.f_score();
    fcfg.validate()?;
    let mut records = Vec::with_capacity(images.len() * strategies.len());
    for (i, (name, raw)) in images.iter().take(config.pairs).enumerate() {
        let (image, block) = crop_to_mask_grid(raw, mask)?;
        let original = extractor.features(&image)?;
        for &strategy in strategies {
            let policy = MaskPolicy {
                strategy,
                block_size: Some(block),
                ..mask.clone()
            };
            let record = analyze_image(
                &image,
                &policy,
                seed::derive(seed, i as u64),
                &original,
                extractor,
                fcfg.s_a,
            )?;
            records.push(ImageRecord {
                image: name.clone(),
                record,
            });
        }
    }
    let mut summaries = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let rs: Vec<AnalysisRecord> = records
            .iter()
            .filter(|r| r.record.strategy == strategy)
            .map(|r| r.record)
            .collect();
        let n = rs.len() as f64;
        let mean = |f: fn(&AnalysisRecord) -> f64| rs.iter().map(f).sum::<f64>() / n;
        summaries.push(StrategySummary {
            strategy,
            images: rs.len(),
            h_m: mean(|r| r.h_m),
            h_c: mean(|r| r.h_c),
            delta_h: mean(|r| r.delta_h),
            s_ds: mean(|r| r.s_ds),
            s: mean(|r| r.s),
            f: f_score(&rs, &fcfg)?,
        });
    }
    let orderings = ordering_checks(&summaries);
    Ok(AnalysisReport {
        records,
        summaries,
        orderings,
        skipped: Vec::new(),
        csv: None,
    })
}

/// The two strategy orderings: entropy gain of random masking below both
/// block strategies, and similarity grid > patch > random.
pub fn ordering_checks(summaries: &[StrategySummary]) -> Vec<OrderingCheck> {
    let get = |s| summaries.iter().find(|x| x.strategy == s);
    let (Some(p), Some(g), Some(r)) = (get(Strategy::Patch), get(Strategy::Grid), get(Strategy::Random))
    else {
        return Vec::new();
    };
    vec![
        OrderingCheck {
            name: "delta_h: random < min(patch, grid)".into(),
            pass: r.delta_h < p.delta_h.min(g.delta_h),
            detail: format!(
                "patch {:.4}, grid {:.4}, random {:.4}",
                p.delta_h, g.delta_h, r.delta_h
            ),
        },
        OrderingCheck {
            name: "s_ds: grid > patch > random".into(),
            pass: g.s_ds > p.s_ds && p.s_ds > r.s_ds,
            detail: format!("grid {:.4}, patch {:.4}, random {:.4}", g.s_ds, p.s_ds, r.s_ds),
        },
    ]
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Image files of `dir` in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads the corpus in `dir` (unreadable files are logged and skipped),
/// analyzes it and writes the CSV report to `out` when given.
pub fn analyze_corpus(
    dir: &Path,
    strategies: &[Strategy],
    mask: &MaskPolicy,
    config: &AnalysisConfig,
    extractor: &dyn FeatureExtractor,
    seed: u64,
    out: Option<&Path>,
) -> Result<AnalysisReport> {
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in list_images(dir)? {
        if images.len() >= config.pairs {
            break;
        }
        match Image::load(&path) {
            Ok(img) => {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                images.push((name, img));
            }
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                skipped.push(path);
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Domain(format!(
            "no readable images in {}",
            dir.display()
        )));
    }
    let mut report = analyze_images(&images, strategies, mask, config, extractor, seed)?;
    report.skipped = skipped;
    if let Some(path) = out {
        write_report_csv(&report, path)?;
        report.csv = Some(path.to_path_buf());
    }
    Ok(report)
}

/// Columns `kind,image,strategy,h_m,h_c,delta_h,s_ds,s,f`: one `record` row
/// per image and strategy, then one `summary` row of means per strategy.
pub fn write_report_csv(report: &AnalysisReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "image", "strategy", "h_m", "h_c", "delta_h", "s_ds", "s", "f"])?;
    for r in &report.records {
        let a = &r.record;
        w.write_record([
            "record".to_string(),
            r.image.clone(),
            a.strategy.to_string(),
            a.h_m.to_string(),
            a.h_c.to_string(),
            a.delta_h.to_string(),
            a.s_ds.to_string(),
            a.s.to_string(),
            String::new(),
        ])?;
    }
    for s in &report.summaries {
        w.write_record([
            "summary".to_string(),
            String::new(),
            s.strategy.to_string(),
            s.h_m.to_string(),
            s.h_c.to_string(),
            s.delta_h.to_string(),
            s.s_ds.to_string(),
            s.s.to_string(),
            s.f.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
