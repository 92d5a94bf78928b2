use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cell_dims, MaskSpec, Strategy};
use crate::error::{Error, Result};

/// Random masks give up after this many rectangles without reaching the ratio.
const MAX_RECTANGLES: usize = 1_000_000;

/// Default block size: 16 px for inputs of at least 64 px, otherwise an
/// eighth of the shorter side (4 px on 32×32 inputs).
pub fn default_block_size(height: usize, width: usize) -> usize {
    let side = height.min(width);
    if side >= 64 {
        16
    } else {
        (side / 8).max(1)
    }
}

/// Default rectangle side range for random masks: one block to half the
/// shorter image side.
pub fn default_size_range(height: usize, width: usize) -> (usize, usize) {
    let side = height.min(width);
    let lo = default_block_size(height, width).min(side);
    (lo, (side / 2).max(lo))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(Error::Range(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Masks exactly `round(ratio × cells)` distinct cells drawn uniformly.
pub fn generate_patch_mask(
    dims: (usize, usize),
    block_size: usize,
    ratio: f64,
    seed: u64,
) -> Result<MaskSpec> {
    let (rows, cols) = cell_dims(dims, block_size)?;
    check_ratio(ratio)?;
    let cells = rows * cols;
    let n = (ratio * cells as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![false; cells];
    for i in index::sample(&mut rng, cells, n) {
        grid[i] = true;
    }
    let mut spec = MaskSpec::from_grid(dims, block_size, grid, Strategy::Patch, ratio, seed)?;
    spec.reuse_block = block_size;
    Ok(spec)
}

/// The lattice period `k` for a grid ratio `1/k²`.
///
/// Ratios that are not of that form produce [`Error::UnsupportedRatio`]
/// naming the nearest supported ratios below and above.
pub fn grid_period(ratio: f64) -> Result<usize> {
    check_ratio(ratio)?;
    if ratio == 0.0 {
        return Err(Error::UnsupportedRatio {
            ratio,
            lower: 0.0,
            upper: 0.0,
        });
    }
    let kf = 1.0 / ratio.sqrt();
    let k = kf.round();
    if k >= 1.0 && (1.0 / (k * k) - ratio).abs() <= 1e-9 * ratio.max(1e-12) + 1e-12 {
        return Ok(k as usize);
    }
    // 1/k² decreases in k: floor(kf) gives the ratio above, ceil(kf) below.
    let upper_k = kf.floor().max(1.0);
    let lower_k = kf.ceil().max(1.0);
    Err(Error::UnsupportedRatio {
        ratio,
        lower: 1.0 / (lower_k * lower_k),
        upper: 1.0 / (upper_k * upper_k),
    })
}

/// Deterministic lattice: within every `k×k` super-cell of blocks the
/// top-left block is masked, so the masked fraction is exactly `1/k²`.
///
/// The block grid must tile into whole super-cells; otherwise the masked
/// count would not equal `round(ratio × cells)`.
pub fn generate_grid_mask(dims: (usize, usize), block_size: usize, ratio: f64) -> Result<MaskSpec> {
    let (rows, cols) = cell_dims(dims, block_size)?;
    let k = grid_period(ratio)?;
    if rows % k != 0 || cols % k != 0 {
        return Err(Error::Dimension(format!(
            "grid ratio 1/{k}² needs dims that are multiples of {} px ({k} blocks of {block_size}), got {}x{}",
            k * block_size,
            dims.0,
            dims.1
        )));
    }
    let grid = (0..rows * cols)
        .map(|i| (i / cols) % k == 0 && (i % cols) % k == 0)
        .collect();
    MaskSpec::from_grid(dims, block_size, grid, Strategy::Grid, ratio, 0)
}

/// Unions seeded random rectangles (pixel granularity) until the covered
/// fraction first reaches `ratio`. Final coverage lies in
/// `[ratio, ratio + max²/(H·W)]`.
pub fn generate_random_mask(
    dims: (usize, usize),
    ratio: f64,
    seed: u64,
    size_range: (usize, usize),
) -> Result<MaskSpec> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("dims {h}x{w} must be positive")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Range(format!(
            "random mask ratio {ratio} must lie strictly inside (0, 1)"
        )));
    }
    let (lo, hi) = size_range;
    if lo == 0 || lo > hi {
        return Err(Error::Range(format!(
            "degenerate rectangle size range ({lo}, {hi})"
        )));
    }
    if hi > h.min(w) {
        return Err(Error::Range(format!(
            "rectangle size {hi} exceeds image bounds {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![false; h * w];
    let target = ratio * (h * w) as f64;
    let mut covered = 0usize;
    let mut drawn = 0usize;
    while (covered as f64) < target {
        if drawn == MAX_RECTANGLES {
            return Err(Error::Range(format!(
                "random mask failed to reach ratio {ratio} after {MAX_RECTANGLES} rectangles"
            )));
        }
        drawn += 1;
        let rh = rng.random_range(lo..=hi);
        let rw = rng.random_range(lo..=hi);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        for y in top..top + rh {
            for cell in &mut grid[y * w + left..y * w + left + rw] {
                if !*cell {
                    *cell = true;
                    covered += 1;
                }
            }
        }
    }
    MaskSpec::from_grid(dims, 1, grid, Strategy::Random, ratio, seed)
}

/// The fair coin of the combined policy: `(Patch | Grid, sub_seed)`.
pub fn combined_choice(seed: u64) -> (Strategy, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads: bool = rng.random();
    let sub_seed: u64 = rng.random();
    (if heads { Strategy::Patch } else { Strategy::Grid }, sub_seed)
}

/// Three-way uniform choice for the patch+grid+random policy.
pub fn combined_all_choice(seed: u64) -> (Strategy, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = rng.random_range(0..3u32);
    let sub_seed: u64 = rng.random();
    let strategy = match pick {
        0 => Strategy::Patch,
        1 => Strategy::Grid,
        _ => Strategy::Random,
    };
    (strategy, sub_seed)
}

/// Per-call fair choice between the patch and grid generators at the same
/// ratio. The returned spec is exactly what the chosen generator produces.
pub fn generate_combined_mask(
    dims: (usize, usize),
    block_size: usize,
    ratio: f64,
    seed: u64,
) -> Result<MaskSpec> {
    match combined_choice(seed) {
        (Strategy::Patch, sub) => generate_patch_mask(dims, block_size, ratio, sub),
        _ => generate_grid_mask(dims, block_size, ratio),
    }
}

/// Uniform choice among the three generators.
pub fn generate_combined_all_mask(
    dims: (usize, usize),
    block_size: usize,
    ratio: f64,
    seed: u64,
    size_range: (usize, usize),
) -> Result<MaskSpec> {
    match combined_all_choice(seed) {
        (Strategy::Patch, sub) => generate_patch_mask(dims, block_size, ratio, sub),
        (Strategy::Grid, _) => generate_grid_mask(dims, block_size, ratio),
        (_, sub) => generate_random_mask(dims, ratio, sub, size_range)?.with_reuse_block(block_size),
    }
}

/// Strategy plus parameters; the unit a training pipeline draws masks from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Block size in pixels; `None` picks [`default_block_size`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// Rectangle side range for random masks; `None` picks [`default_size_range`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_range: Option<(usize, usize)>,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            strategy: Strategy::Combined,
            ratio: 0.25,
            block_size: None,
            size_range: None,
        }
    }
}

impl MaskPolicy {
    pub fn new(strategy: Strategy, ratio: f64) -> Self {
        Self {
            strategy,
            ratio,
            ..Self::default()
        }
    }

    pub fn block_size_for(&self, dims: (usize, usize)) -> usize {
        self.block_size
            .unwrap_or_else(|| default_block_size(dims.0, dims.1))
    }

    pub fn size_range_for(&self, dims: (usize, usize)) -> (usize, usize) {
        self.size_range
            .unwrap_or_else(|| default_size_range(dims.0, dims.1))
    }

    /// Checks that masks can be generated for `dims` without drawing one.
    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        let b = self.block_size_for(dims);
        cell_dims(dims, b)?;
        check_ratio(self.ratio)?;
        if matches!(
            self.strategy,
            Strategy::Grid | Strategy::Combined | Strategy::CombinedAll
        ) {
            generate_grid_mask(dims, b, self.ratio)?;
        }
        if matches!(self.strategy, Strategy::Random | Strategy::CombinedAll) {
            generate_random_mask(dims, self.ratio, 0, self.size_range_for(dims))?;
        }
        Ok(())
    }

    pub fn generate(&self, dims: (usize, usize), seed: u64) -> Result<MaskSpec> {
        let b = self.block_size_for(dims);
        match self.strategy {
            Strategy::Patch => generate_patch_mask(dims, b, self.ratio, seed),
            Strategy::Grid => generate_grid_mask(dims, b, self.ratio),
            Strategy::Random => {
                generate_random_mask(dims, self.ratio, seed, self.size_range_for(dims))?
                    .with_reuse_block(b)
            }
            Strategy::Combined => generate_combined_mask(dims, b, self.ratio, seed),
            Strategy::CombinedAll => {
                generate_combined_all_mask(dims, b, self.ratio, seed, self.size_range_for(dims))
            }
        }
    }
}
