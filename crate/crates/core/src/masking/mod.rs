//! Block-structured occlusion masks.
//!
//! Three generators produce a [`MaskSpec`]: uniformly sampled blocks
//! ([`generate_patch_mask`]), a periodic lattice of blocks
//! ([`generate_grid_mask`]) and a union of random rectangles at pixel
//! granularity ([`generate_random_mask`]). The combined policies pick one of
//! them per sample. [`apply_mask`] realizes the occlusion on an image.

mod generate;
mod record;

pub use generate::{
    combined_all_choice, combined_choice, default_block_size, default_size_range,
    generate_combined_all_mask, generate_combined_mask, generate_grid_mask, generate_patch_mask,
    generate_random_mask, grid_period, MaskPolicy,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Masking strategy. `Combined` and `CombinedAll` are per-sample policies;
/// the specs they generate always carry the concrete strategy that was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "patch")]
    Patch,
    #[serde(rename = "grid")]
    Grid,
    #[serde(rename = "random")]
    Random,
    /// Fair coin between patch and grid.
    #[serde(rename = "combined")]
    Combined,
    /// Uniform choice among patch, grid and random.
    #[serde(rename = "patch+grid+random")]
    CombinedAll,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Patch,
        Strategy::Grid,
        Strategy::Random,
        Strategy::Combined,
        Strategy::CombinedAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Patch => "patch",
            Strategy::Grid => "grid",
            Strategy::Random => "random",
            Strategy::Combined => "combined",
            Strategy::CombinedAll => "patch+grid+random",
        }
    }

    /// True for strategies whose masks are aligned to a block grid.
    pub fn is_block(self) -> bool {
        matches!(self, Strategy::Patch | Strategy::Grid)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patch" => Ok(Strategy::Patch),
            "grid" => Ok(Strategy::Grid),
            "random" => Ok(Strategy::Random),
            "combined" | "patch+grid" => Ok(Strategy::Combined),
            "patch+grid+random" | "combined-all" => Ok(Strategy::CombinedAll),
            other => Err(Error::Config(format!(
                "unknown mask strategy {other:?} (expected patch, grid, random, combined, patch+grid+random)"
            ))),
        }
    }
}

/// A boolean occlusion map over a `rows×cols` grid of `block_size` cells.
///
/// Random masks are stored at pixel granularity (`block_size == 1`); their
/// `reuse_block` names the block grid onto which the reuse branch snaps them.
/// For block strategies `reuse_block == block_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) block_size: usize,
    pub(crate) reuse_block: usize,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) grid: Vec<bool>,
    pub(crate) strategy: Strategy,
    pub(crate) ratio: f64,
    pub(crate) seed: u64,
}

impl MaskSpec {
    /// Builds a spec from an explicit cell grid (row-major, `true` = masked).
    pub fn from_grid(
        dims: (usize, usize),
        block_size: usize,
        grid: Vec<bool>,
        strategy: Strategy,
        ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        let (rows, cols) = cell_dims(dims, block_size)?;
        if grid.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "grid of {} cells does not match {rows}x{cols}",
                grid.len()
            )));
        }
        let reuse_block = if block_size == 1 {
            default_block_size(dims.0, dims.1)
        } else {
            block_size
        };
        Ok(Self {
            height: dims.0,
            width: dims.1,
            block_size,
            reuse_block,
            rows,
            cols,
            grid,
            strategy,
            ratio,
            seed,
        })
    }

    /// Marks exactly the listed `(row, col)` cells.
    pub fn from_cells(
        dims: (usize, usize),
        block_size: usize,
        cells: &[(usize, usize)],
        strategy: Strategy,
    ) -> Result<Self> {
        let (rows, cols) = cell_dims(dims, block_size)?;
        let mut grid = vec![false; rows * cols];
        for &(r, c) in cells {
            if r >= rows || c >= cols {
                return Err(Error::Dimension(format!(
                    "cell ({r},{c}) outside {rows}x{cols} grid"
                )));
            }
            grid[r * cols + c] = true;
        }
        let ratio = grid.iter().filter(|&&m| m).count() as f64 / (rows * cols) as f64;
        Self::from_grid(dims, block_size, grid, strategy, ratio, 0)
    }

    /// Overrides the block size used when snapping a pixel mask for reuse.
    pub fn with_reuse_block(mut self, reuse_block: usize) -> Result<Self> {
        if self.block_size != 1 && reuse_block != self.block_size {
            return Err(Error::Config(
                "reuse block of a block-granular mask must equal its block size".into(),
            ));
        }
        cell_dims((self.height, self.width), reuse_block)?;
        self.reuse_block = reuse_block;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn reuse_block(&self) -> usize {
        self.reuse_block
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.grid.iter().any(|&m| m)
    }

    /// Pixel granularity (random strategy) rather than block granularity.
    pub fn is_pixel_granular(&self) -> bool {
        self.block_size == 1
    }

    #[inline]
    pub fn is_masked_cell(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.cols + col]
    }

    #[inline]
    pub fn is_masked_pixel(&self, y: usize, x: usize) -> bool {
        self.grid[(y / self.block_size) * self.cols + x / self.block_size]
    }

    /// Masked cells in ascending row-major order.
    pub fn masked_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.grid
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i / cols, i % cols))
    }

    /// Fraction of pixels covered by the mask.
    pub fn coverage(&self) -> f64 {
        self.masked_count() as f64 / self.cell_count() as f64
    }

    /// Block-granular view on the `reuse_block` grid: a cell is masked when it
    /// contains at least one masked pixel. This is identical to the union of
    /// each rectangle's bounding cells. Block-granular specs are returned as-is.
    pub fn snapped(&self) -> MaskSpec {
        if !self.is_pixel_granular() || self.reuse_block == 1 {
            return self.clone();
        }
        let b = self.reuse_block;
        let rows = self.height / b;
        let cols = self.width / b;
        let mut grid = vec![false; rows * cols];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.grid[y * self.cols + x] {
                    grid[(y / b) * cols + x / b] = true;
                }
            }
        }
        MaskSpec {
            height: self.height,
            width: self.width,
            block_size: b,
            reuse_block: b,
            rows,
            cols,
            grid,
            strategy: self.strategy,
            ratio: self.ratio,
            seed: self.seed,
        }
    }

    /// Serializes to the versioned text record (see [`MaskSpec::from_record`]).
    pub fn to_record(&self) -> String {
        record::encode(self)
    }

    pub fn from_record(text: &str) -> Result<Self> {
        record::decode(text)
    }
}

/// `(rows, cols)` of the block grid, checking divisibility.
pub(crate) fn cell_dims(dims: (usize, usize), block_size: usize) -> Result<(usize, usize)> {
    let (h, w) = dims;
    if block_size == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "dims {h}x{w} and block size {block_size} must be positive"
        )));
    }
    if h % block_size != 0 || w % block_size != 0 {
        return Err(Error::Dimension(format!(
            "dims {h}x{w} are not multiples of block size {block_size}"
        )));
    }
    Ok((h / block_size, w / block_size))
}

/// An image with the cells of `spec` overwritten by `fill_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub pixels: Image,
    pub spec: MaskSpec,
    pub fill_value: f32,
}

/// Sets every masked pixel to `fill` in all channels; other pixels are copied.
pub fn apply_mask(image: &Image, spec: &MaskSpec, fill: f32) -> Result<MaskedImage> {
    if image.dims() != spec.dims() {
        return Err(Error::Dimension(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            spec.height,
            spec.width
        )));
    }
    let mut pixels = image.clone();
    let b = spec.block_size;
    for c in 0..image.channels() {
        for (r, col) in spec.masked_cells() {
            for y in r * b..(r + 1) * b {
                let start = pixels.index(c, y, col * b);
                pixels.data_mut()[start..start + b].fill(fill);
            }
        }
    }
    Ok(MaskedImage {
        pixels,
        spec: spec.clone(),
        fill_value: fill,
    })
}
