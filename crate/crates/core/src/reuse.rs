//! Reuse images: the original content under a mask, stitched into a compact
//! canvas that keeps the row-major order of the source blocks.
//!
//! Pixel-granular (random) masks are first snapped to the block grid given
//! by their `reuse_block`, so every strategy yields whole blocks here.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::masking::MaskSpec;

/// One masked block of the original image and its block coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPatch {
    pub pixels: Image,
    pub position: (usize, usize),
}

/// Stitched reuse image.
///
/// `layout[j]` is the source block of canvas slot `j` (row-major slots).
/// The trailing `pad_count` slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ReuseImage {
    pub pixels: Image,
    pub layout: Vec<(usize, usize)>,
    pub pad_count: usize,
    pub block_size: usize,
    pub canvas_rows: usize,
    pub canvas_cols: usize,
}

/// `(rows, cols)` of the smallest near-square canvas holding `n` blocks:
/// `cols = ceil(sqrt(n))`, `rows = ceil(n / cols)`.
pub fn canvas_shape(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let mut cols = (n as f64).sqrt() as usize;
    while cols * cols < n {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= n {
        cols -= 1;
    }
    (n.div_ceil(cols), cols)
}

/// The block-granular spec that reuse operates on.
fn reuse_grid(spec: &MaskSpec) -> Result<MaskSpec> {
    let snapped = spec.snapped();
    if snapped.block_size() <= 1 {
        return Err(Error::Config(
            "reuse needs a block size above 1; set a reuse block on the pixel mask".into(),
        ));
    }
    Ok(snapped)
}

/// Copies the original content of every masked block, ascending row-major.
pub fn extract_regions(image: &Image, spec: &MaskSpec) -> Result<Vec<RegionPatch>> {
    if image.dims() != spec.dims() {
        return Err(Error::Dimension(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            spec.height(),
            spec.width()
        )));
    }
    let grid = reuse_grid(spec)?;
    if grid.is_empty() {
        return Err(Error::EmptyMask);
    }
    let b = grid.block_size();
    grid.masked_cells()
        .map(|(r, c)| {
            Ok(RegionPatch {
                pixels: image.crop(r * b, c * b, b, b)?,
                position: (r, c),
            })
        })
        .collect()
}

/// Packs patches row-major into a `rows×cols` block canvas
/// (see [`canvas_shape`]); slots follow ascending source position.
pub fn compose_reuse(patches: &[RegionPatch], block_size: usize) -> Result<ReuseImage> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Shape("cannot compose an empty patch list".into()))?;
    let channels = first.pixels.channels();
    for p in patches {
        if p.pixels.channels() != channels
            || p.pixels.height() != block_size
            || p.pixels.width() != block_size
        {
            return Err(Error::Shape(format!(
                "patch at {:?} is {}x{}x{}, expected {channels}x{block_size}x{block_size}",
                p.position,
                p.pixels.channels(),
                p.pixels.height(),
                p.pixels.width()
            )));
        }
    }
    let mut order: Vec<&RegionPatch> = patches.iter().collect();
    order.sort_by_key(|p| p.position);
    if order.windows(2).any(|w| w[0].position == w[1].position) {
        return Err(Error::Consistency("duplicate patch positions".into()));
    }

    let n = order.len();
    let (rows, cols) = canvas_shape(n);
    let mut pixels = Image::zeros(channels, rows * block_size, cols * block_size);
    for (slot, patch) in order.iter().enumerate() {
        let (sr, sc) = (slot / cols, slot % cols);
        pixels.paste(&patch.pixels, sr * block_size, sc * block_size)?;
    }
    Ok(ReuseImage {
        pixels,
        layout: order.iter().map(|p| p.position).collect(),
        pad_count: rows * cols - n,
        block_size,
        canvas_rows: rows,
        canvas_cols: cols,
    })
}

/// `compose_reuse(extract_regions(image, spec))`.
pub fn build_reuse(image: &Image, spec: &MaskSpec) -> Result<ReuseImage> {
    let patches = extract_regions(image, spec)?;
    compose_reuse(&patches, reuse_grid(spec)?.block_size())
}

/// Writes every reuse slot back to its source block on a copy of `canvas`.
///
/// With `canvas` set to the masked image this reconstructs the original.
pub fn scatter_back(reuse: &ReuseImage, spec: &MaskSpec, canvas: &Image) -> Result<Image> {
    let grid = reuse_grid(spec)?;
    if canvas.dims() != spec.dims() {
        return Err(Error::Dimension(format!(
            "canvas is {}x{} but mask is {}x{}",
            canvas.height(),
            canvas.width(),
            spec.height(),
            spec.width()
        )));
    }
    if canvas.channels() != reuse.pixels.channels() {
        return Err(Error::Dimension(format!(
            "canvas has {} channels, reuse image {}",
            canvas.channels(),
            reuse.pixels.channels()
        )));
    }
    let expected: Vec<_> = grid.masked_cells().collect();
    if grid.block_size() != reuse.block_size || expected != reuse.layout {
        return Err(Error::Consistency(format!(
            "reuse layout ({} blocks of {} px) does not match the mask ({} blocks of {} px)",
            reuse.layout.len(),
            reuse.block_size,
            expected.len(),
            grid.block_size()
        )));
    }
    let b = reuse.block_size;
    let mut out = canvas.clone();
    for (slot, &(r, c)) in reuse.layout.iter().enumerate() {
        let (sr, sc) = (slot / reuse.canvas_cols, slot % reuse.canvas_cols);
        let patch = reuse.pixels.crop(sr * b, sc * b, b, b)?;
        out.paste(&patch, r * b, c * b)?;
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers (align-corners = false).
/// Equal source and target dims return the input unchanged.
pub fn resize_bilinear(image: &Image, target: (usize, usize)) -> Result<Image> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Dimension(format!(
            "resize target {th}x{tw} must be positive"
        )));
    }
    if image.dims() == target {
        return Ok(image.clone());
    }
    let (ih, iw) = image.dims();
    let ys = axis_weights(ih, th);
    let xs = axis_weights(iw, tw);
    Ok(Image::from_fn(image.channels(), th, tw, |c, y, x| {
        let (y0, y1, wy0, wy1) = ys[y];
        let (x0, x1, wx0, wx1) = xs[x];
        wy0 * (wx0 * image.get(c, y0, x0) + wx1 * image.get(c, y0, x1))
            + wy1 * (wx0 * image.get(c, y1, x0) + wx1 * image.get(c, y1, x1))
    }))
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f32, f32)> {
    let scale = input as f32 / output as f32;
    (0..output)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f32;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Upsamples the stitched canvas to the masked image's spatial dims.
pub fn resize_to(reuse: &ReuseImage, target: (usize, usize)) -> Result<Image> {
    resize_bilinear(&reuse.pixels, target)
}

impl ReuseImage {
    /// Slot index range that holds real patches.
    pub fn filled_slots(&self) -> usize {
        self.layout.len()
    }

    /// Sidecar text: canvas geometry, pad count and one `slot row col` line
    /// per placed block.
    pub fn sidecar(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "reuse v1");
        let _ = writeln!(s, "block_size {}", self.block_size);
        let _ = writeln!(s, "canvas {}x{}", self.canvas_rows, self.canvas_cols);
        let _ = writeln!(s, "pad_count {}", self.pad_count);
        for (slot, (r, c)) in self.layout.iter().enumerate() {
            let _ = writeln!(s, "slot {slot} {r} {c}");
        }
        s
    }

    /// Writes `<stem>.png` and `<stem>.layout.txt` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        let txt = dir.join(format!("{stem}.layout.txt"));
        self.pixels.save_png(&png)?;
        std::fs::write(&txt, self.sidecar()).map_err(|e| Error::io(&txt, e))?;
        Ok((png, txt))
    }
}
