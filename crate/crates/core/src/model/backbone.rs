//! Backbone registry. Every backbone is a sequence of named stages ending in
//! a classifier head; its registered split points are stage boundaries, so
//! `high ∘ low` runs exactly the same kernels as the whole network.
//!
//! All stages exchange `(B, C, H, W)` maps. Transformer blocks flatten the
//! map to tokens internally and fold it back, keeping token order.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    norm_groups, Conv2d, ConvSpec, GroupNorm, Init, LayerNorm, Linear, ParamBuilder, SelfAttention,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "resnet-tiny")]
    ResnetTiny,
    #[serde(rename = "resnet18")]
    Resnet18,
    #[serde(rename = "resnet34")]
    Resnet34,
    #[serde(rename = "mobilenet-tiny")]
    MobilenetTiny,
    #[serde(rename = "vit-tiny")]
    VitTiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Residual,
    Efficient,
    Transformer,
}

impl BackboneId {
    pub const ALL: [BackboneId; 5] = [
        BackboneId::ResnetTiny,
        BackboneId::Resnet18,
        BackboneId::Resnet34,
        BackboneId::MobilenetTiny,
        BackboneId::VitTiny,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneId::ResnetTiny => "resnet-tiny",
            BackboneId::Resnet18 => "resnet18",
            BackboneId::Resnet34 => "resnet34",
            BackboneId::MobilenetTiny => "mobilenet-tiny",
            BackboneId::VitTiny => "vit-tiny",
        }
    }

    pub fn family(self) -> Family {
        match self {
            BackboneId::ResnetTiny | BackboneId::Resnet18 | BackboneId::Resnet34 => {
                Family::Residual
            }
            BackboneId::MobilenetTiny => Family::Efficient,
            BackboneId::VitTiny => Family::Transformer,
        }
    }

    /// The split point used by the dual-branch model unless configured otherwise.
    pub fn default_split(self) -> &'static str {
        match self.family() {
            Family::Residual => "stage1",
            Family::Efficient => "stage2",
            Family::Transformer => "block2",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BackboneId::ALL.iter().map(|b| b.name()).collect();
                Error::Config(format!(
                    "unknown backbone {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Records intermediate activations by stage name, and optionally turns
/// one of them into a gradient leaf.
#[derive(Debug, Default)]
pub struct Trace {
    capture: Vec<String>,
    leaf: Option<String>,
    pub captured: Vec<(String, Tensor)>,
    pub leaf_var: Option<Var>,
}

impl Trace {
    pub fn new(capture: &[String], leaf: Option<&str>) -> Self {
        Self {
            capture: capture.to_vec(),
            leaf: leaf.map(str::to_string),
            ..Default::default()
        }
    }

    pub(crate) fn visit(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        let t = if self.leaf.as_deref() == Some(name) {
            let var = Var::from_tensor(&t.detach())?;
            let leaf = var.as_tensor().clone();
            self.leaf_var = Some(var);
            leaf
        } else {
            t
        };
        if self.capture.iter().any(|c| c == name) {
            self.captured.push((name.to_string(), t.clone()));
        }
        Ok(t)
    }

    /// Activation captured under `name`, if any.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.captured.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub(crate) trait Module: Send + Sync + fmt::Debug {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct Stage {
    name: String,
    module: Arc<dyn Module>,
    out_channels: usize,
    spatial: bool,
}

impl Stage {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Whether the stage outputs a spatial map (every stage but the head).
    pub fn is_spatial(&self) -> bool {
        self.spatial
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.module.forward(x)
    }
}

/// A runnable sequence of stages.
#[derive(Debug, Clone)]
pub struct StageStack {
    stages: Vec<Stage>,
}

impl StageStack {
    pub(crate) fn from_stages(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.stages.iter().try_fold(x.clone(), |h, s| s.forward(&h))
    }

    /// Forward pass that reports each stage output as `<prefix><stage>`.
    pub fn forward_traced(&self, x: &Tensor, prefix: &str, trace: &mut Trace) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(&h)?;
            h = trace.visit(&format!("{prefix}{}", s.name), h)?;
        }
        Ok(h)
    }

    /// Name of the last stage that produces a spatial map.
    pub fn last_spatial(&self) -> Option<&str> {
        self.stages
            .iter()
            .rev()
            .find(|s| s.spatial)
            .map(|s| s.name.as_str())
    }
}

/// A complete classifier.
#[derive(Debug, Clone)]
pub struct Backbone {
    id: BackboneId,
    stack: StageStack,
    in_channels: usize,
    num_classes: usize,
    /// Stage-boundary names that are valid split points.
    split_points: Vec<String>,
}

impl Backbone {
    pub fn id(&self) -> BackboneId {
        self.id
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_points(&self) -> &[String] {
        &self.split_points
    }

    pub fn stack(&self) -> &StageStack {
        &self.stack
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.stack.forward(x)
    }

    /// Globally average-pooled output of the last spatial stage.
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let stages = self.stack.stages();
        let mut h = x.clone();
        for s in stages.iter().filter(|s| s.spatial) {
            h = s.forward(&h)?;
        }
        Ok(h.mean((2, 3))?)
    }
}

/// A backbone partitioned at a registered stage boundary.
#[derive(Debug, Clone)]
pub struct BackboneSplit {
    pub low: StageStack,
    pub high: StageStack,
    pub split_point: String,
    pub channels_at_split: usize,
}

impl BackboneSplit {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.high.forward(&self.low.forward(x)?)
    }
}

/// Splits `backbone` after the stage named `split_point`.
pub fn split_backbone(backbone: &Backbone, split_point: &str) -> Result<BackboneSplit> {
    if !backbone.split_points.iter().any(|p| p == split_point) {
        return Err(Error::Config(format!(
            "unknown split point {split_point:?} for {}; valid points: {}",
            backbone.id,
            backbone.split_points.join(", ")
        )));
    }
    let stages = backbone.stack.stages();
    let at = stages
        .iter()
        .position(|s| s.name == split_point)
        .expect("split points are stage names");
    Ok(BackboneSplit {
        low: StageStack {
            stages: stages[..=at].to_vec(),
        },
        high: StageStack {
            stages: stages[at + 1..].to_vec(),
        },
        split_point: split_point.to_string(),
        channels_at_split: stages[at].out_channels,
    })
}

// ---------------------------------------------------------------------------
// Building blocks

#[derive(Debug)]
struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
    relu: bool,
}

impl ConvNormAct {
    fn new(spec: ConvSpec, relu: bool, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(spec, &pb.pp("conv"))?,
            norm: GroupNorm::new(spec.out_channels, norm_groups(spec.out_channels), &pb.pp("norm"))?,
            relu,
        })
    }
}

impl Module for ConvNormAct {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        Ok(if self.relu { y.relu()? } else { y })
    }
}

#[derive(Debug)]
struct BasicBlock {
    conv1: ConvNormAct,
    conv2: ConvNormAct,
    shortcut: Option<ConvNormAct>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, pb: &ParamBuilder) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvNormAct::new(
                ConvSpec::new(cin, cout, 1).stride(stride),
                false,
                &pb.pp("shortcut"),
            )?)
        } else {
            None
        };
        Ok(Self {
            conv1: ConvNormAct::new(ConvSpec::new(cin, cout, 3).stride(stride), true, &pb.pp("conv1"))?,
            conv2: ConvNormAct::new(ConvSpec::new(cout, cout, 3), false, &pb.pp("conv2"))?,
            shortcut,
        })
    }
}

impl Module for BasicBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Debug)]
struct InvertedResidual {
    expand: Option<ConvNormAct>,
    depthwise: ConvNormAct,
    project: ConvNormAct,
    residual: bool,
}

impl InvertedResidual {
    fn new(cin: usize, cout: usize, stride: usize, expansion: usize, pb: &ParamBuilder) -> Result<Self> {
        let hidden = cin * expansion;
        let expand = if expansion != 1 {
            Some(ConvNormAct::new(ConvSpec::new(cin, hidden, 1), true, &pb.pp("expand"))?)
        } else {
            None
        };
        Ok(Self {
            expand,
            depthwise: ConvNormAct::new(
                ConvSpec::new(hidden, hidden, 3).stride(stride).groups(hidden),
                true,
                &pb.pp("depthwise"),
            )?,
            project: ConvNormAct::new(ConvSpec::new(hidden, cout, 1), false, &pb.pp("project"))?,
            residual: stride == 1 && cin == cout,
        })
    }
}

impl Module for InvertedResidual {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = match &self.expand {
            Some(e) => e.forward(x)?,
            None => x.clone(),
        };
        let y = self.project.forward(&self.depthwise.forward(&h)?)?;
        Ok(if self.residual { (y + x)? } else { y })
    }
}

#[derive(Debug)]
struct Sequence(Vec<Box<dyn Module>>);

impl Module for Sequence {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.iter().try_fold(x.clone(), |h, m| m.forward(&h))
    }
}

/// Global average pool + linear classifier.
#[derive(Debug)]
struct PooledHead {
    fc: Linear,
}

impl Module for PooledHead {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc.forward(&x.mean((2, 3))?)
    }
}

#[derive(Debug)]
struct PatchEmbed {
    proj: Conv2d,
    position: Tensor,
}

impl Module for PatchEmbed {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(x)?.broadcast_add(&self.position)?)
    }
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

fn to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, d) = tokens.dims3()?;
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?)
}

#[derive(Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    fn new(dim: usize, heads: usize, mlp: usize, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, &pb.pp("norm1"))?,
            attn: SelfAttention::new(dim, heads, &pb.pp("attn"))?,
            norm2: LayerNorm::new(dim, &pb.pp("norm2"))?,
            fc1: Linear::new(dim, mlp, &pb.pp("fc1"))?,
            fc2: Linear::new(mlp, dim, &pb.pp("fc2"))?,
        })
    }
}

impl Module for TransformerBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(x)?;
        let t = (&t + self.attn.forward(&self.norm1.forward(&t)?)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&t)?)?.gelu_erf()?)?;
        to_map(&(t + m)?, h, w)
    }
}

#[derive(Debug)]
struct TokenHead {
    norm: LayerNorm,
    fc: Linear,
}

impl Module for TokenHead {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.norm.forward(&to_tokens(x)?)?;
        self.fc.forward(&t.mean(1)?)
    }
}

// ---------------------------------------------------------------------------
// Registry

/// Input geometry a backbone is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

struct Builder {
    stages: Vec<Stage>,
}

impl Builder {
    fn push(&mut self, name: &str, module: impl Module + 'static, out_channels: usize) {
        self.stages.push(Stage {
            name: name.to_string(),
            module: Arc::new(module),
            out_channels,
            spatial: true,
        });
    }

    fn head(&mut self, module: impl Module + 'static, classes: usize) {
        self.stages.push(Stage {
            name: "head".into(),
            module: Arc::new(module),
            out_channels: classes,
            spatial: false,
        });
    }
}

fn residual_stage(
    cin: usize,
    cout: usize,
    blocks: usize,
    stride: usize,
    pb: &ParamBuilder,
) -> Result<Sequence> {
    let mut mods: Vec<Box<dyn Module>> = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
        mods.push(Box::new(BasicBlock::new(ci, cout, s, &pb.pp(i.to_string()))?));
    }
    Ok(Sequence(mods))
}

fn build_resnet(
    input: InputSpec,
    stem_stride: usize,
    widths: [usize; 5],
    depths: [usize; 4],
    b: &mut Builder,
    pb: &ParamBuilder,
) -> Result<()> {
    b.push(
        "stem",
        ConvNormAct::new(
            ConvSpec::new(input.channels, widths[0], 3).stride(stem_stride),
            true,
            &pb.pp("stem"),
        )?,
        widths[0],
    );
    for i in 0..4 {
        let name = format!("stage{}", i + 1);
        let stride = if i == 0 { 1 } else { 2 };
        b.push(
            &name,
            residual_stage(widths[i], widths[i + 1], depths[i], stride, &pb.pp(&name))?,
            widths[i + 1],
        );
    }
    b.head(
        PooledHead {
            fc: Linear::new(widths[4], input.num_classes, &pb.pp("head.fc"))?,
        },
        input.num_classes,
    );
    Ok(())
}

fn build_mobilenet(input: InputSpec, b: &mut Builder, pb: &ParamBuilder) -> Result<()> {
    b.push(
        "stem",
        ConvNormAct::new(ConvSpec::new(input.channels, 16, 3).stride(2), true, &pb.pp("stem"))?,
        16,
    );
    // (out channels, blocks, first stride, expansion)
    let plan = [(16, 1, 1, 1), (24, 2, 2, 4), (48, 2, 2, 4), (96, 2, 2, 4)];
    let mut cin = 16;
    for (i, &(cout, blocks, stride, t)) in plan.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let spb = pb.pp(&name);
        let mut mods: Vec<Box<dyn Module>> = Vec::new();
        for j in 0..blocks {
            let (ci, s) = if j == 0 { (cin, stride) } else { (cout, 1) };
            mods.push(Box::new(InvertedResidual::new(ci, cout, s, t, &spb.pp(j.to_string()))?));
        }
        if i == plan.len() - 1 {
            mods.push(Box::new(ConvNormAct::new(
                ConvSpec::new(cout, 256, 1),
                true,
                &spb.pp("pointwise"),
            )?));
            b.push(&name, Sequence(mods), 256);
        } else {
            b.push(&name, Sequence(mods), cout);
        }
        cin = cout;
    }
    b.head(
        PooledHead {
            fc: Linear::new(256, input.num_classes, &pb.pp("head.fc"))?,
        },
        input.num_classes,
    );
    Ok(())
}

const VIT_PATCH: usize = 4;
const VIT_DIM: usize = 64;
const VIT_DEPTH: usize = 6;
const VIT_HEADS: usize = 4;

fn build_vit(input: InputSpec, b: &mut Builder, pb: &ParamBuilder) -> Result<()> {
    if input.height % VIT_PATCH != 0 || input.width % VIT_PATCH != 0 {
        return Err(Error::Dimension(format!(
            "vit-tiny needs input sides divisible by {VIT_PATCH}, got {}x{}",
            input.height, input.width
        )));
    }
    let (h, w) = (input.height / VIT_PATCH, input.width / VIT_PATCH);
    let epb = pb.pp("patch_embed");
    let proj = Conv2d::new(
        ConvSpec::new(input.channels, VIT_DIM, VIT_PATCH)
            .stride(VIT_PATCH)
            .padding(0)
            .bias(true),
        &epb.pp("proj"),
    )?;
    let position = epb.get("position", &[1, VIT_DIM, h, w], Init::Normal { std: 0.02 })?;
    b.push("patch_embed", PatchEmbed { proj, position }, VIT_DIM);
    for i in 0..VIT_DEPTH {
        let name = format!("block{}", i + 1);
        b.push(
            &name,
            TransformerBlock::new(VIT_DIM, VIT_HEADS, 2 * VIT_DIM, &pb.pp(&name))?,
            VIT_DIM,
        );
    }
    b.head(
        TokenHead {
            norm: LayerNorm::new(VIT_DIM, &pb.pp("head.norm"))?,
            fc: Linear::new(VIT_DIM, input.num_classes, &pb.pp("head.fc"))?,
        },
        input.num_classes,
    );
    Ok(())
}

/// Builds a freshly initialized backbone; parameters land under `pb`.
pub fn build_backbone(id: BackboneId, input: InputSpec, pb: &ParamBuilder) -> Result<Backbone> {
    if input.channels == 0 || input.num_classes == 0 {
        return Err(Error::Config(
            "backbone needs at least one input channel and one class".into(),
        ));
    }
    let mut b = Builder { stages: Vec::new() };
    match id {
        BackboneId::ResnetTiny => {
            build_resnet(input, 2, [16, 16, 32, 64, 128], [1, 1, 1, 1], &mut b, pb)?
        }
        BackboneId::Resnet18 => {
            build_resnet(input, 1, [64, 64, 128, 256, 512], [2, 2, 2, 2], &mut b, pb)?
        }
        BackboneId::Resnet34 => {
            build_resnet(input, 1, [64, 64, 128, 256, 512], [3, 4, 6, 3], &mut b, pb)?
        }
        BackboneId::MobilenetTiny => build_mobilenet(input, &mut b, pb)?,
        BackboneId::VitTiny => build_vit(input, &mut b, pb)?,
    }
    let split_points = b.stages[..b.stages.len() - 2]
        .iter()
        .map(|s| s.name.clone())
        .collect();
    Ok(Backbone {
        id,
        stack: StageStack { stages: b.stages },
        in_channels: input.channels,
        num_classes: input.num_classes,
        split_points,
    })
}
