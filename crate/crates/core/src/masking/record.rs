//! Text record for [`MaskSpec`].
//!
//! ```text
//! maskspec v1
//! height 64
//! width 64
//! block_size 16
//! reuse_block 16
//! strategy grid
//! ratio 0.25
//! seed 0
//! grid 4x4
//! rle 1 1 1 1 5 1 1 1 5
//! ```
//!
//! `rle` lists the value of the first cell (0 or 1) followed by the lengths
//! of alternating runs over the row-major grid. Ratios are written with
//! Rust's shortest round-trip formatting, so decoding is bit-exact.

use super::{MaskSpec, Strategy};
use crate::error::{Error, Result};

const MAGIC: &str = "maskspec v1";

pub(super) fn encode(spec: &MaskSpec) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("height {}\n", spec.height));
    out.push_str(&format!("width {}\n", spec.width));
    out.push_str(&format!("block_size {}\n", spec.block_size));
    out.push_str(&format!("reuse_block {}\n", spec.reuse_block));
    out.push_str(&format!("strategy {}\n", spec.strategy));
    out.push_str(&format!("ratio {:?}\n", spec.ratio));
    out.push_str(&format!("seed {}\n", spec.seed));
    out.push_str(&format!("grid {}x{}\n", spec.rows, spec.cols));
    out.push_str("rle");
    if let Some(&first) = spec.grid.first() {
        out.push_str(if first { " 1" } else { " 0" });
        let mut current = first;
        let mut run = 0usize;
        for &cell in &spec.grid {
            if cell == current {
                run += 1;
            } else {
                out.push_str(&format!(" {run}"));
                current = cell;
                run = 1;
            }
        }
        out.push_str(&format!(" {run}"));
    }
    out.push('\n');
    out
}

fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("missing `{key}` line")))?;
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Parse(format!("expected `{key} ...`, found {line:?}")))?;
    Ok(rest.trim())
}

fn number<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("invalid value {s:?} for `{key}`")))
}

pub(super) fn decode(text: &str) -> Result<MaskSpec> {
    let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty());
    match lines.next() {
        Some(MAGIC) => {}
        other => {
            return Err(Error::Parse(format!(
                "expected header {MAGIC:?}, found {other:?}"
            )))
        }
    }
    let height: usize = number(field(&mut lines, "height")?, "height")?;
    let width: usize = number(field(&mut lines, "width")?, "width")?;
    let block_size: usize = number(field(&mut lines, "block_size")?, "block_size")?;
    let reuse_block: usize = number(field(&mut lines, "reuse_block")?, "reuse_block")?;
    let strategy: Strategy = field(&mut lines, "strategy")?
        .parse()
        .map_err(|e: Error| Error::Parse(e.to_string()))?;
    let ratio: f64 = number(field(&mut lines, "ratio")?, "ratio")?;
    let seed: u64 = number(field(&mut lines, "seed")?, "seed")?;
    let grid_dims = field(&mut lines, "grid")?;
    let (rows, cols) = grid_dims
        .split_once('x')
        .ok_or_else(|| Error::Parse(format!("invalid grid dims {grid_dims:?}")))?;
    let rows: usize = number(rows, "grid rows")?;
    let cols: usize = number(cols, "grid cols")?;

    let rle_line = lines
        .next()
        .ok_or_else(|| Error::Parse("missing `rle` line".into()))?;
    let mut tokens = rle_line.split_whitespace();
    if tokens.next() != Some("rle") {
        return Err(Error::Parse(format!("expected `rle ...`, found {rle_line:?}")));
    }
    let mut grid = Vec::with_capacity(rows * cols);
    if let Some(first) = tokens.next() {
        let mut value = match first {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse(format!("invalid rle start bit {other:?}"))),
        };
        for tok in tokens {
            let run: usize = number(tok, "rle run")?;
            if run == 0 {
                return Err(Error::Parse("zero-length rle run".into()));
            }
            grid.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing content after `rle` line".into()));
    }
    if grid.len() != rows * cols {
        return Err(Error::Parse(format!(
            "rle decodes to {} cells, grid is {rows}x{cols}",
            grid.len()
        )));
    }
    let mut spec = MaskSpec::from_grid((height, width), block_size, grid, strategy, ratio, seed)
        .map_err(|e| Error::Parse(e.to_string()))?;
    if (spec.rows, spec.cols) != (rows, cols) {
        return Err(Error::Parse(format!(
            "grid {rows}x{cols} inconsistent with dims and block size"
        )));
    }
    spec.reuse_block = reuse_block;
    Ok(spec)
}
