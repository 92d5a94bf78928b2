//! Class-activation heatmaps and intermediate feature dumps.

use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{MaskAnyNet, Mode, Trace};
use crate::reuse::resize_bilinear;

/// A `[0, 1]` heatmap at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    pub map: Image,
    pub target_class: usize,
    pub layer: String,
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_map(map: &mut Image) {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in map.data_mut() {
        *v = if range > 0.0 && range.is_finite() {
            (*v - lo) / range
        } else {
            0.0
        };
    }
}

/// Grad-CAM from an activation leaf and the logits computed from it.
///
/// The map is `ReLU(Σ_c w_c·A_c)` with `w_c` the spatial mean of
/// `∂ logit[target] / ∂ A_c`, bilinearly resized to `out_dims` and
/// min-max normalized.
pub fn grad_cam_from(
    activation: &Var,
    logits: &Tensor,
    target_class: usize,
    out_dims: (usize, usize),
) -> Result<Image> {
    let act = activation.as_tensor();
    if act.rank() != 4 || act.dim(0)? != 1 {
        return Err(Error::Config(format!(
            "grad-cam needs a single spatial activation (1, C, H, W), got {:?}",
            act.dims()
        )));
    }
    let classes = logits.dim(1)?;
    if target_class >= classes {
        return Err(Error::Range(format!(
            "target class {target_class} outside 0..{classes}"
        )));
    }
    let grads = logits.get(0)?.get(target_class)?.backward()?;
    let (_, _, h, w) = act.dims4()?;
    let raw = match grads.get(activation) {
        Some(g) => {
            let weights = g.mean_keepdim((2, 3))?;
            act.broadcast_mul(&weights)?.sum(1)?.relu()?
        }
        None => Tensor::zeros((1, h, w), act.dtype(), act.device())?,
    };
    let data = raw
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut map = resize_bilinear(&Image::new(1, h, w, data)?, out_dims)?;
    normalize_map(&mut map);
    Ok(map)
}

/// Grad-CAM for `model` on one `[0, 1]` image, evaluated in eval mode.
/// `layer` defaults to the model's last spatial layer after fusion.
pub fn grad_cam(
    model: &MaskAnyNet,
    image: &Image,
    target_class: usize,
    layer: Option<&str>,
) -> Result<HeatmapResult> {
    let layer = layer
        .map(str::to_string)
        .unwrap_or_else(|| model.default_cam_layer());
    if !model.is_spatial_layer(&layer) {
        return Err(Error::Config(format!(
            "layer {layer:?} is not a spatial layer; choose one of {}",
            spatial_layers(model).join(", ")
        )));
    }
    let batch = model.prepare(std::slice::from_ref(image), Mode::Eval, 0)?;
    let mut trace = Trace::new(&[], Some(&layer));
    let logits = model.forward_traced(&batch, &mut trace)?;
    let leaf = trace
        .leaf_var
        .ok_or_else(|| Error::Config(format!("layer {layer:?} was not reached")))?;
    let map = grad_cam_from(&leaf, &logits, target_class, image.dims())?;
    Ok(HeatmapResult {
        map,
        target_class,
        layer,
    })
}

/// Index of the largest logit for one image in eval mode.
pub fn predicted_class(model: &MaskAnyNet, image: &Image) -> Result<usize> {
    let logits = model.forward(std::slice::from_ref(image), Mode::Eval, 0)?;
    Ok(logits.get(0)?.argmax(0)?.to_scalar::<u32>()? as usize)
}

fn spatial_layers(model: &MaskAnyNet) -> Vec<String> {
    model
        .layer_names()
        .into_iter()
        .filter(|n| model.is_spatial_layer(n))
        .collect()
}

/// One dumped activation.
#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub layer: String,
    pub tensor: Tensor,
    /// Channel-mean summary, min-max normalized, at the feature's spatial size.
    pub summary: Image,
    pub summary_path: Option<PathBuf>,
}

/// Captures the named activations for one image (eval mode). When `out_dir`
/// is set each summary is written as `<layer>.png`.
pub fn dump_features(
    model: &MaskAnyNet,
    image: &Image,
    layers: &[String],
    out_dir: Option<&Path>,
) -> Result<Vec<FeatureDump>> {
    if layers.is_empty() {
        return Ok(Vec::new());
    }
    let known = spatial_layers(model);
    if let Some(bad) = layers.iter().find(|l| !known.contains(l)) {
        return Err(Error::Config(format!(
            "unknown feature layer {bad:?}; choose one of {}",
            known.join(", ")
        )));
    }
    let batch = model.prepare(std::slice::from_ref(image), Mode::Eval, 0)?;
    let mut trace = Trace::new(layers, None);
    model.forward_traced(&batch, &mut trace)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let tensor = trace
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer:?} was not reached")))?
            .detach();
        let mean = tensor.mean(1)?.squeeze(0)?;
        let (h, w) = mean.dims2()?;
        let data = mean
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let mut summary = Image::new(1, h, w, data)?;
        normalize_map(&mut summary);
        let summary_path = match out_dir {
            Some(dir) => {
                let p = dir.join(format!("{layer}.png"));
                summary.save_png(&p)?;
                Some(p)
            }
            None => None,
        };
        out.push(FeatureDump {
            layer: layer.clone(),
            tensor,
            summary,
            summary_path,
        });
    }
    Ok(out)
}

/// Jet colormap of a `[0, 1]` value.
fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends a jet-colored heatmap over an RGB or grayscale `[0, 1]` image.
pub fn overlay(image: &Image, map: &Image, alpha: f32) -> Result<Image> {
    if image.dims() != map.dims() || map.channels() != 1 {
        return Err(Error::Dimension(format!(
            "heatmap {}x{}x{} does not fit image {}x{}",
            map.channels(),
            map.height(),
            map.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(Image::from_fn(3, image.height(), image.width(), |c, y, x| {
        let base = if image.channels() == 3 {
            image.get(c, y, x)
        } else {
            image.get(0, y, x)
        };
        (1.0 - alpha) * base + alpha * jet(map.get(0, y, x))[c]
    }))
}

/// Tiles equally sized images into rows (e.g. original / baseline /
/// masked-reuse model) separated by `pad` white pixels, and writes a PNG.
pub fn write_grid(rows: &[Vec<Image>], pad: usize, path: &Path) -> Result<Image> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Shape("empty heatmap grid".into()))?;
    let (h, w) = first.dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut canvas = Image::filled(
        3,
        rows.len() * h + (rows.len() + 1) * pad,
        cols * w + (cols + 1) * pad,
        1.0,
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.dims() != (h, w) {
                return Err(Error::Shape("heatmap grid cells must share dims".into()));
            }
            let rgb = match img.channels() {
                3 => img.clone(),
                1 => Image::from_fn(3, h, w, |_, y, x| img.get(0, y, x)),
                n => return Err(Error::Shape(format!("cannot tile a {n}-channel image"))),
            };
            canvas.paste(&rgb, pad + r * (h + pad), pad + c * (w + pad))?;
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    canvas.save_png(path)?;
    Ok(canvas)
}
