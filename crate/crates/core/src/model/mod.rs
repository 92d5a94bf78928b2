//! The dual-branch classifier.
//!
//! A masked copy of the input and the resized reuse image of the masked
//! regions go through a shared low-level extractor; their feature maps are
//! concatenated, aligned back to the backbone width and finished by the
//! backbone's high-level stages. Image- and decision-level fusion and the
//! ablation variants are alternative wirings of the same parts.

mod align;
mod backbone;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use align::{align_features, fuse_features, AlignBlock};
pub use backbone::{
    build_backbone, split_backbone, Backbone, BackboneId, BackboneSplit, Family, InputSpec, Stage,
    StageStack, Trace,
};

use crate::error::{Error, Result};
use crate::image::{stack_images, Image};
use crate::masking::{apply_mask, generate_grid_mask, MaskPolicy, MaskSpec};
use crate::nn::ParamStore;
use crate::reuse::{build_reuse, resize_to};
use crate::seed;

/// Per-channel statistics of CIFAR-10 training images.
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionLevel {
    Image,
    Feature,
    Decision,
}

impl std::str::FromStr for FusionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FusionLevel::Image),
            "feature" => Ok(FusionLevel::Feature),
            "decision" => Ok(FusionLevel::Decision),
            other => Err(Error::Config(format!(
                "unknown fusion level {other:?} (expected image, feature, decision)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub level: FusionLevel,
    /// Residual alignment stages; only used at feature level.
    pub align_depth: usize,
    /// Both branches run the same low-level extractor.
    pub shared_low: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            level: FusionLevel::Feature,
            align_depth: 3,
            shared_low: true,
        }
    }
}

/// Ablation switches: masking (M), reuse branch (R), fusion + alignment (FFA).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub mask: bool,
    pub reuse: bool,
    pub ffa: bool,
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles {
        mask: false,
        reuse: false,
        ffa: false,
    };
    pub const MASK: Toggles = Toggles {
        mask: true,
        reuse: false,
        ffa: false,
    };
    pub const MASK_REUSE: Toggles = Toggles {
        mask: true,
        reuse: true,
        ffa: false,
    };
    pub const FULL: Toggles = Toggles {
        mask: true,
        reuse: true,
        ffa: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.reuse && !self.mask {
            return Err(Error::Config("toggle R (reuse) requires M (mask)".into()));
        }
        if self.ffa && !self.reuse {
            return Err(Error::Config("toggle FFA requires R (reuse)".into()));
        }
        Ok(())
    }

    /// Short label: `baseline`, `M`, `M+R`, `M+R+FFA`.
    pub fn label(&self) -> &'static str {
        match (self.mask, self.reuse, self.ffa) {
            (false, _, _) => "baseline",
            (true, false, _) => "M",
            (true, true, false) => "M+R",
            (true, true, true) => "M+R+FFA",
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::FULL
    }
}

/// What the branches receive outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMasking {
    /// Fixed grid mask with period 2 and its reuse image.
    Grid,
    /// The training policy, seeded per sample.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Resize semantics of the reuse branch; fixed, but recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeSpec {
    pub method: String,
    pub align_corners: bool,
}

impl Default for ResizeSpec {
    fn default() -> Self {
        Self {
            method: "bilinear".into(),
            align_corners: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneId,
    /// Stage after which the backbone is split; `None` uses the family default.
    #[serde(default)]
    pub split_point: Option<String>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fusion: FusionConfig,
    pub toggles: Toggles,
    pub mask: MaskPolicy,
    pub eval_masking: EvalMasking,
    /// Per-channel normalization applied before masking; masked pixels are
    /// filled with 0 in the normalized domain.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub seed: u64,
    #[serde(default)]
    pub resize: ResizeSpec,
}

impl ModelConfig {
    /// CIFAR-sized defaults for `backbone`.
    pub fn cifar(backbone: BackboneId) -> Self {
        Self {
            backbone,
            split_point: None,
            num_classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            fusion: FusionConfig::default(),
            toggles: Toggles::FULL,
            mask: MaskPolicy::default(),
            eval_masking: EvalMasking::Grid,
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
            seed: 0,
            resize: ResizeSpec::default(),
        }
    }

    pub fn split_point(&self) -> &str {
        self.split_point
            .as_deref()
            .unwrap_or_else(|| self.backbone.default_split())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn input(&self, channels: usize) -> InputSpec {
        InputSpec {
            channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        if self.fusion.align_depth == 0 {
            return Err(Error::Config("fusion.align_depth must be at least 1".into()));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::Config(format!(
                "normalization needs {} mean/std entries",
                self.channels
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if self.resize != ResizeSpec::default() {
            return Err(Error::Config(format!(
                "unsupported resize {:?}; only bilinear without corner alignment",
                self.resize
            )));
        }
        if self.toggles.mask {
            self.mask.validate(self.dims())?;
        }
        if self.toggles.reuse && self.eval_masking == EvalMasking::Grid {
            let b = self.mask.block_size_for(self.dims());
            generate_grid_mask(self.dims(), b, 0.25)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Arch {
    /// Plain backbone on one input (baseline and mask-only variants).
    Single(Backbone),
    /// Dual branch with features summed instead of fused and aligned.
    Summed {
        split: BackboneSplit,
        reuse_low: Option<StageStack>,
    },
    Feature {
        split: BackboneSplit,
        reuse_low: Option<StageStack>,
        align: AlignBlock,
    },
    /// Both images stacked on channels into a widened stem.
    Image(Backbone),
    Decision {
        masked: Backbone,
        reuse: Backbone,
    },
}

/// Inputs for one batch: the masked (or plain) image and, for dual-branch
/// variants, the resized reuse image.
#[derive(Debug, Clone)]
pub struct BranchBatch {
    pub primary: Tensor,
    pub reuse: Option<Tensor>,
}

pub struct MaskAnyNet {
    config: ModelConfig,
    store: ParamStore,
    arch: Arch,
}

impl std::fmt::Debug for MaskAnyNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskAnyNet")
            .field("backbone", &self.config.backbone)
            .field("variant", &self.variant_label())
            .field("params", &self.store.count())
            .finish()
    }
}

fn low_branch(
    config: &ModelConfig,
    store: &ParamStore,
    split_point: &str,
) -> Result<Option<StageStack>> {
    if config.fusion.shared_low {
        return Ok(None);
    }
    let bb = build_backbone(
        config.backbone,
        config.input(config.channels),
        &store.root().pp("reuse_low"),
    )?;
    let split = split_backbone(&bb, split_point)?;
    // Only the low stages of this second copy are used.
    for stage in split.high.stages() {
        store.remove_prefix(&format!("reuse_low.{}.", stage.name()));
    }
    Ok(Some(split.low))
}

impl MaskAnyNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::build(config, DType::F32, &Device::Cpu)
    }

    pub fn build(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, dtype, device);
        let root = store.root();
        let c = config.channels;
        let t = config.toggles;
        let arch = if !t.reuse {
            Arch::Single(build_backbone(config.backbone, config.input(c), &root.pp("backbone"))?)
        } else {
            match config.fusion.level {
                FusionLevel::Feature => {
                    let bb = build_backbone(config.backbone, config.input(c), &root.pp("backbone"))?;
                    let split = split_backbone(&bb, config.split_point())?;
                    let reuse_low = low_branch(&config, &store, config.split_point())?;
                    if t.ffa {
                        let align = AlignBlock::new(
                            split.channels_at_split,
                            config.fusion.align_depth,
                            &root.pp("align"),
                        )?;
                        Arch::Feature {
                            split,
                            reuse_low,
                            align,
                        }
                    } else {
                        Arch::Summed { split, reuse_low }
                    }
                }
                FusionLevel::Image => Arch::Image(build_backbone(
                    config.backbone,
                    config.input(2 * c),
                    &root.pp("backbone"),
                )?),
                FusionLevel::Decision => Arch::Decision {
                    masked: build_backbone(config.backbone, config.input(c), &root.pp("masked"))?,
                    reuse: build_backbone(config.backbone, config.input(c), &root.pp("reuse"))?,
                },
            }
        };
        Ok(Self {
            config,
            store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn variant_label(&self) -> String {
        match (&self.arch, self.config.fusion.level) {
            (Arch::Feature { .. }, _) | (Arch::Summed { .. }, _) | (Arch::Single(_), _) => {
                self.config.toggles.label().to_string()
            }
            (_, FusionLevel::Image) => "M+R+FFA@image".into(),
            (_, _) => "M+R+FFA@decision".into(),
        }
    }

    pub fn is_dual(&self) -> bool {
        !matches!(self.arch, Arch::Single(_))
    }

    /// Scalar parameters of the plain backbone this model is built from.
    pub fn baseline_param_count(&self) -> Result<usize> {
        let store = ParamStore::new(0, self.store.dtype(), self.store.device());
        build_backbone(
            self.config.backbone,
            self.config.input(self.config.channels),
            &store.root(),
        )?;
        Ok(store.count())
    }

    /// Seed of the mask drawn for sample `index` of a batch seeded by `batch_seed`.
    pub fn sample_seed(batch_seed: u64, index: usize) -> u64 {
        seed::derive(batch_seed, index as u64)
    }

    /// The mask the model applies to one normalized sample.
    pub fn mask_for(&self, mode: Mode, sample_seed: u64) -> Result<MaskSpec> {
        let dims = self.config.dims();
        match (mode, self.config.eval_masking) {
            (Mode::Eval, EvalMasking::Grid) => {
                generate_grid_mask(dims, self.config.mask.block_size_for(dims), 0.25)
            }
            _ => self.config.mask.generate(dims, sample_seed),
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.config.channels || image.dims() != self.config.dims() {
            return Err(Error::Dimension(format!(
                "model expects {}x{}x{} images, got {}x{}x{}",
                self.config.channels,
                self.config.height,
                self.config.width,
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Normalized branch inputs for one `[0, 1]` image.
    pub fn branch_inputs(
        &self,
        image: &Image,
        mode: Mode,
        sample_seed: u64,
    ) -> Result<(Image, Option<Image>)> {
        self.check_image(image)?;
        let x = image.normalized(&self.config.mean, &self.config.std)?;
        let t = self.config.toggles;
        if !t.mask || (!t.reuse && mode == Mode::Eval) {
            return Ok((x, None));
        }
        let spec = self.mask_for(mode, sample_seed)?;
        let masked = apply_mask(&x, &spec, 0.0)?.pixels;
        if !t.reuse {
            return Ok((masked, None));
        }
        let reuse = if spec.is_empty() {
            Image::zeros(x.channels(), x.height(), x.width())
        } else {
            resize_to(&build_reuse(&x, &spec)?, x.dims())?
        };
        Ok((masked, Some(reuse)))
    }

    /// Branch tensors for a batch; sample `i` uses mask seed
    /// `sample_seed(batch_seed, i)`.
    pub fn prepare(&self, images: &[Image], mode: Mode, batch_seed: u64) -> Result<BranchBatch> {
        let mut primary = Vec::with_capacity(images.len());
        let mut reuse = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let (p, r) = self.branch_inputs(img, mode, Self::sample_seed(batch_seed, i))?;
            primary.push(p);
            if let Some(r) = r {
                reuse.push(r);
            }
        }
        let dev = self.store.device();
        let dtype = self.store.dtype();
        let primary = stack_images(&primary, dev)?.to_dtype(dtype)?;
        let reuse = if reuse.is_empty() {
            None
        } else {
            Some(stack_images(&reuse, dev)?.to_dtype(dtype)?)
        };
        Ok(BranchBatch { primary, reuse })
    }

    /// Full pipeline: masking, reuse, both branches, logits `(B, K)`.
    pub fn forward(&self, images: &[Image], mode: Mode, batch_seed: u64) -> Result<Tensor> {
        let batch = self.prepare(images, mode, batch_seed)?;
        self.forward_batch(&batch)
    }

    pub fn forward_batch(&self, batch: &BranchBatch) -> Result<Tensor> {
        self.forward_traced(batch, &mut Trace::default())
    }

    fn reuse_tensor<'a>(&self, batch: &'a BranchBatch) -> Result<&'a Tensor> {
        batch.reuse.as_ref().ok_or_else(|| {
            Error::Shape("dual-branch model needs a reuse input in the batch".into())
        })
    }

    /// Forward pass reporting named activations (see [`MaskAnyNet::layer_names`]).
    pub fn forward_traced(&self, batch: &BranchBatch, trace: &mut Trace) -> Result<Tensor> {
        let m = &batch.primary;
        match &self.arch {
            Arch::Single(bb) => bb.stack().forward_traced(m, "backbone.", trace),
            Arch::Image(bb) => {
                let x = Tensor::cat(&[m, self.reuse_tensor(batch)?], 1)?;
                bb.stack().forward_traced(&x, "backbone.", trace)
            }
            Arch::Decision { masked, reuse } => {
                let a = masked.stack().forward_traced(m, "masked.", trace)?;
                let b = reuse
                    .stack()
                    .forward_traced(self.reuse_tensor(batch)?, "reuse.", trace)?;
                Ok(((a + b)? * 0.5)?)
            }
            Arch::Summed { split, reuse_low } => {
                let r = self.reuse_tensor(batch)?;
                let fm = split.low.forward_traced(m, "low.", trace)?;
                let fr = reuse_low
                    .as_ref()
                    .unwrap_or(&split.low)
                    .forward_traced(r, "reuse.", trace)?;
                let joint = trace.visit("fused", (fm + fr)?)?;
                split.high.forward_traced(&joint, "high.", trace)
            }
            Arch::Feature {
                split,
                reuse_low,
                align,
            } => {
                let r = self.reuse_tensor(batch)?;
                let fm = split.low.forward_traced(m, "low.", trace)?;
                let fr = reuse_low
                    .as_ref()
                    .unwrap_or(&split.low)
                    .forward_traced(r, "reuse.", trace)?;
                let joint = trace.visit("fused", fuse_features(&fm, &fr)?)?;
                let aligned = trace.visit("align", align.forward(&joint)?)?;
                split.high.forward_traced(&aligned, "high.", trace)
            }
        }
    }

    /// Names accepted by [`Trace`] for this model, in execution order.
    pub fn layer_names(&self) -> Vec<String> {
        let names = |prefix: &str, s: &StageStack| -> Vec<String> {
            s.stage_names()
                .into_iter()
                .map(|n| format!("{prefix}{n}"))
                .collect()
        };
        match &self.arch {
            Arch::Single(bb) | Arch::Image(bb) => names("backbone.", bb.stack()),
            Arch::Decision { masked, reuse } => {
                let mut v = names("masked.", masked.stack());
                v.extend(names("reuse.", reuse.stack()));
                v
            }
            Arch::Summed { split, reuse_low } | Arch::Feature { split, reuse_low, .. } => {
                let mut v = names("low.", &split.low);
                v.extend(names("reuse.", reuse_low.as_ref().unwrap_or(&split.low)));
                v.push("fused".into());
                if matches!(self.arch, Arch::Feature { .. }) {
                    v.push("align".into());
                }
                v.extend(names("high.", &split.high));
                v
            }
        }
    }

    /// Whether `layer` yields a spatial `(B, C, H, W)` activation.
    pub fn is_spatial_layer(&self, layer: &str) -> bool {
        layer != "head" && !layer.ends_with(".head") && self.layer_names().iter().any(|n| n == layer)
    }

    /// Last spatial layer after the branches merge (the masked branch for
    /// decision-level fusion).
    pub fn default_cam_layer(&self) -> String {
        match &self.arch {
            Arch::Single(bb) | Arch::Image(bb) => {
                format!("backbone.{}", bb.stack().last_spatial().unwrap_or("stem"))
            }
            Arch::Decision { masked, .. } => {
                format!("masked.{}", masked.stack().last_spatial().unwrap_or("stem"))
            }
            Arch::Summed { split, .. } | Arch::Feature { split, .. } => match split.high.last_spatial() {
                Some(s) => format!("high.{s}"),
                None => "fused".into(),
            },
        }
    }

    /// For decision-level fusion, copies the masked-branch weights into the
    /// reuse branch.
    pub fn tie_decision_branches(&self) -> Result<()> {
        if !matches!(self.arch, Arch::Decision { .. }) {
            return Err(Error::Config("weight tying needs decision-level fusion".into()));
        }
        let vars = self.store.named_vars();
        for (name, var) in &vars {
            if let Some(rest) = name.strip_prefix("masked.") {
                let target = self
                    .store
                    .get(&format!("reuse.{rest}"))
                    .ok_or_else(|| Error::Consistency(format!("no reuse twin for {name}")))?;
                target.set(var.as_tensor())?;
            }
        }
        Ok(())
    }

    /// The plain backbone stack of a single-branch model or the first
    /// branch of a dual model, for feature extraction.
    pub fn backbone_stack(&self) -> StageStack {
        match &self.arch {
            Arch::Single(bb) | Arch::Image(bb) => bb.stack().clone(),
            Arch::Decision { masked, .. } => masked.stack().clone(),
            Arch::Summed { split, .. } | Arch::Feature { split, .. } => {
                let mut stages = split.low.stages().to_vec();
                stages.extend_from_slice(split.high.stages());
                StageStack::from_stages(stages)
            }
        }
    }

    /// Writes `model.json` and `model.safetensors` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Checkpoint> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ck = Checkpoint::in_dir(dir);
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&ck.config, json).map_err(|e| Error::io(&ck.config, e))?;
        self.store.save(&ck.weights)?;
        Ok(ck)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::in_dir(dir);
        let text = std::fs::read_to_string(&ck.config).map_err(|e| Error::io(&ck.config, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Consistency(format!("{}: {e}", ck.config.display())))?;
        let model = Self::new(config)?;
        model.store.load(&ck.weights)?;
        Ok(model)
    }
}

/// File layout of a saved model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PathBuf,
    pub weights: PathBuf,
}

impl Checkpoint {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            config: dir.join("model.json"),
            weights: dir.join("model.safetensors"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, seed: u64) -> Vec<Image> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::from_fn(3, 32, 32, |_, _, _| rng.random::<f32>()))
            .collect()
    }

    fn config(toggles: Toggles, level: FusionLevel) -> ModelConfig {
        let mut c = ModelConfig::cifar(BackboneId::ResnetTiny);
        c.toggles = toggles;
        c.fusion.level = level;
        c
    }

    #[test]
    fn every_variant_produces_class_logits() {
        let imgs = images(2, 0);
        for t in [Toggles::BASELINE, Toggles::MASK, Toggles::MASK_REUSE, Toggles::FULL] {
            let model = MaskAnyNet::new(config(t, FusionLevel::Feature)).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                assert_eq!(model.forward(&imgs, mode, 1).unwrap().dims(), &[2, 10]);
            }
        }
        for level in [FusionLevel::Image, FusionLevel::Decision] {
            let model = MaskAnyNet::new(config(Toggles::FULL, level)).unwrap();
            assert_eq!(model.forward(&imgs, Mode::Train, 1).unwrap().dims(), &[2, 10]);
        }
    }

    #[test]
    fn illegal_toggles_are_rejected() {
        let bad = Toggles {
            mask: false,
            reuse: true,
            ffa: false,
        };
        assert!(matches!(
            MaskAnyNet::new(config(bad, FusionLevel::Feature)),
            Err(Error::Config(_))
        ));
        let bad = Toggles {
            mask: true,
            reuse: false,
            ffa: true,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eval_is_deterministic_and_train_masks_vary() {
        let model = MaskAnyNet::new(config(Toggles::FULL, FusionLevel::Feature)).unwrap();
        let imgs = images(3, 1);
        let a: Vec<Vec<f32>> = model.forward(&imgs, Mode::Eval, 5).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = model.forward(&imgs, Mode::Eval, 99).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
        let s1 = model.mask_for(Mode::Train, 1).unwrap();
        let differs = (2..40).any(|s| model.mask_for(Mode::Train, s).unwrap() != s1);
        assert!(differs);
    }

    #[test]
    fn mask_only_variant_evaluates_on_clean_images() {
        let model = MaskAnyNet::new(config(Toggles::MASK, FusionLevel::Feature)).unwrap();
        let img = &images(1, 2)[0];
        let (clean, reuse) = model.branch_inputs(img, Mode::Eval, 0).unwrap();
        assert!(reuse.is_none());
        assert_eq!(clean, img.normalized(&CIFAR_MEAN, &CIFAR_STD).unwrap());
        let (masked, _) = model.branch_inputs(img, Mode::Train, 0).unwrap();
        assert_ne!(masked, clean);
    }

    #[test]
    fn decision_branches_with_tied_weights_average_to_one_backbone() {
        let model = MaskAnyNet::new(config(Toggles::FULL, FusionLevel::Decision)).unwrap();
        model.tie_decision_branches().unwrap();
        let x = stack_images(&images(2, 3), &Device::Cpu).unwrap();
        let batch = BranchBatch {
            primary: x.clone(),
            reuse: Some(x.clone()),
        };
        let both: Vec<Vec<f32>> = model.forward_batch(&batch).unwrap().to_vec2().unwrap();
        let single = match &model.arch {
            Arch::Decision { masked, .. } => masked.forward(&x).unwrap(),
            _ => unreachable!(),
        };
        let single: Vec<Vec<f32>> = single.to_vec2().unwrap();
        assert_eq!(both, single);
    }

    #[test]
    fn parameter_budget_bands() {
        let base = MaskAnyNet::new(config(Toggles::BASELINE, FusionLevel::Feature)).unwrap();
        let feature = MaskAnyNet::new(config(Toggles::FULL, FusionLevel::Feature)).unwrap();
        let decision = MaskAnyNet::new(config(Toggles::FULL, FusionLevel::Decision)).unwrap();
        let b = base.param_count() as f64;
        assert_eq!(base.param_count(), base.baseline_param_count().unwrap());
        assert!(feature.param_count() as f64 / b <= 1.10);
        let d = decision.param_count() as f64 / b;
        assert!((1.9..=2.1).contains(&d));
    }

    #[test]
    fn unshared_low_adds_only_low_parameters() {
        let mut c = config(Toggles::FULL, FusionLevel::Feature);
        let shared = MaskAnyNet::new(c.clone()).unwrap();
        c.fusion.shared_low = false;
        let separate = MaskAnyNet::new(c).unwrap();
        let low = shared.params().count_prefix("backbone.stem.")
            + shared.params().count_prefix("backbone.stage1.");
        assert_eq!(separate.param_count(), shared.param_count() + low);
        let imgs = images(1, 4);
        assert_eq!(separate.forward(&imgs, Mode::Train, 0).unwrap().dims(), &[1, 10]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(Toggles::FULL, FusionLevel::Feature);
        c.seed = 17;
        let model = MaskAnyNet::new(c).unwrap();
        model.save(dir.path()).unwrap();
        let back = MaskAnyNet::load(dir.path()).unwrap();
        assert_eq!(back.config(), model.config());
        let imgs = images(2, 5);
        let a: Vec<Vec<f32>> = model.forward(&imgs, Mode::Eval, 0).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = back.forward(&imgs, Mode::Eval, 0).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
        let json = std::fs::read_to_string(dir.path().join("model.json")).unwrap();
        assert!(json.contains("\"bilinear\"") && json.contains("\"align_corners\": false"));
    }

    #[test]
    fn layer_names_and_cam_default() {
        let model = MaskAnyNet::new(config(Toggles::FULL, FusionLevel::Feature)).unwrap();
        let names = model.layer_names();
        assert!(names.contains(&"low.stage1".to_string()));
        assert!(names.contains(&"reuse.stage1".to_string()));
        assert!(names.contains(&"align".to_string()));
        assert_eq!(model.default_cam_layer(), "high.stage4");
        assert!(model.is_spatial_layer("high.stage4"));
        assert!(!model.is_spatial_layer("high.head"));
    }
}
