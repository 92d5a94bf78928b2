//! 2D convolution as per-sample im2col + GEMM.
//!
//! Each sample is unfolded into a `(C·k·k, Ho·Wo)` column matrix that is
//! small enough to stay in cache, then multiplied by the `(Cout, C·k·k)`
//! weight. The backward pass recomputes the columns instead of storing them.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn output(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output columns `[lo, hi)` whose input column `ox·s + kx − p` is in bounds.
    fn valid_range(&self, offset: usize, out: usize, input: usize) -> (usize, usize) {
        let lo = if self.padding > offset {
            (self.padding - offset).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if input + self.padding > offset {
            ((input + self.padding - offset - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Writes the `(C·k·k, Ho·Wo)` column matrix of one `(C, H, W)` sample.
fn unfold_sample<T: Float>(src: &[T], g: Geometry, dst: &mut [T]) {
    let (ho, wo) = g.output();
    let plane = g.height * g.width;
    let l = ho * wo;
    dst.fill(T::zero());
    for c in 0..g.channels {
        let s = &src[c * plane..][..plane];
        for ky in 0..g.kernel {
            let (oy_lo, oy_hi) = g.valid_range(ky, ho, g.height);
            for kx in 0..g.kernel {
                let (ox_lo, ox_hi) = g.valid_range(kx, wo, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let d = &mut dst[row * l..][..l];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let srow = &s[iy * g.width..][..g.width];
                    let drow = &mut d[oy * wo..][..wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.padding;
                        drow[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = srow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adds a column matrix back onto one `(C, H, W)` sample (col2im).
fn fold_sample<T: Float>(src: &[T], g: Geometry, dst: &mut [T]) {
    let (ho, wo) = g.output();
    let plane = g.height * g.width;
    let l = ho * wo;
    for c in 0..g.channels {
        let d = &mut dst[c * plane..][..plane];
        for ky in 0..g.kernel {
            let (oy_lo, oy_hi) = g.valid_range(ky, ho, g.height);
            for kx in 0..g.kernel {
                let (ox_lo, ox_hi) = g.valid_range(kx, wo, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let s = &src[row * l..][..l];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let drow = &mut d[iy * g.width..][..g.width];
                    let srow = &s[oy * wo..][..wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.padding;
                        let d = &mut drow[ix0..ix0 + ox_hi - ox_lo];
                        for (d, &v) in d.iter_mut().zip(&srow[ox_lo..ox_hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.padding;
                            drow[ix] = drow[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a, T> View<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// `dst = a·b`, or `dst += a·b` when `accumulate`; `dst` is row-major.
fn matmul<T: Float + 'static>(dst: &mut [T], a: View<'_, T>, b: View<'_, T>, accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(b.rows == k && dst.len() >= m * n && a.fits() && b.fits(), "matmul operand shapes");
    // SAFETY: the assertion above bounds every index gemm reads or writes
    // within the three slices, and `dst` is exclusively borrowed.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.data.as_ptr(),
            a.col_stride as isize,
            a.row_stride as isize,
            b.data.as_ptr(),
            b.col_stride as isize,
            b.row_stride as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn contiguous_slice<'a, T: WithDType>(
    data: &'a [T],
    layout: &Layout,
    op: &str,
) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

/// Convolution geometry plus channel grouping.
#[derive(Debug, Clone, Copy)]
struct ConvOp {
    geom: Geometry,
    groups: usize,
    out_channels: usize,
}

impl ConvOp {
    /// Rows of the column matrix per group.
    fn group_rows(&self) -> usize {
        self.geom.rows() / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    fn sample_len(&self) -> usize {
        self.geom.channels * self.geom.height * self.geom.width
    }

    fn out_len(&self) -> usize {
        let (ho, wo) = self.geom.output();
        ho * wo
    }

    fn forward<T: Float + 'static>(&self, x: &[T], w: &[T], batch: usize) -> Vec<T> {
        let (kg, og, l) = (self.group_rows(), self.group_out(), self.out_len());
        let mut cols = vec![T::zero(); self.geom.rows() * l];
        let mut y = vec![T::zero(); batch * self.out_channels * l];
        for b in 0..batch {
            unfold_sample(&x[b * self.sample_len()..][..self.sample_len()], self.geom, &mut cols);
            let yb = &mut y[b * self.out_channels * l..][..self.out_channels * l];
            for gi in 0..self.groups {
                matmul(
                    &mut yb[gi * og * l..][..og * l],
                    View::row_major(&w[gi * og * kg..][..og * kg], og, kg),
                    View::row_major(&cols[gi * kg * l..][..kg * l], kg, l),
                    false,
                );
            }
        }
        y
    }

    fn input_grad<T: Float + 'static>(&self, w: &[T], dy: &[T], batch: usize) -> Vec<T> {
        let (kg, og, l) = (self.group_rows(), self.group_out(), self.out_len());
        let mut cols = vec![T::zero(); self.geom.rows() * l];
        let mut dx = vec![T::zero(); batch * self.sample_len()];
        for b in 0..batch {
            let dyb = &dy[b * self.out_channels * l..][..self.out_channels * l];
            for gi in 0..self.groups {
                matmul(
                    &mut cols[gi * kg * l..][..kg * l],
                    View::row_major(&w[gi * og * kg..][..og * kg], og, kg).t(),
                    View::row_major(&dyb[gi * og * l..][..og * l], og, l),
                    false,
                );
            }
            fold_sample(&cols, self.geom, &mut dx[b * self.sample_len()..][..self.sample_len()]);
        }
        dx
    }

    fn weight_grad<T: Float + 'static>(&self, x: &[T], dy: &[T], batch: usize) -> Vec<T> {
        let (kg, og, l) = (self.group_rows(), self.group_out(), self.out_len());
        let mut cols = vec![T::zero(); self.geom.rows() * l];
        // Accumulated as `(kg, og)` per group, which multiplies faster.
        let mut dwt = vec![T::zero(); self.out_channels * kg];
        for b in 0..batch {
            unfold_sample(&x[b * self.sample_len()..][..self.sample_len()], self.geom, &mut cols);
            let dyb = &dy[b * self.out_channels * l..][..self.out_channels * l];
            for gi in 0..self.groups {
                matmul(
                    &mut dwt[gi * og * kg..][..og * kg],
                    View::row_major(&cols[gi * kg * l..][..kg * l], kg, l),
                    View::row_major(&dyb[gi * og * l..][..og * l], og, l).t(),
                    b > 0,
                );
            }
        }
        let mut dw = vec![T::zero(); self.out_channels * kg];
        for gi in 0..self.groups {
            let src = &dwt[gi * og * kg..][..og * kg];
            let dst = &mut dw[gi * og * kg..][..og * kg];
            for r in 0..kg {
                for o in 0..og {
                    dst[o * kg + r] = src[r * og + o];
                }
            }
        }
        dw
    }

    fn weight_shape(&self) -> Shape {
        let k = self.geom.kernel;
        Shape::from((self.out_channels, self.geom.channels / self.groups, k, k))
    }

    fn input_batch(&self, l: &Layout) -> candle_core::Result<usize> {
        let (b, c, h, w) = l.shape().dims4()?;
        if (c, h, w) != (self.geom.channels, self.geom.height, self.geom.width) {
            candle_core::bail!("conv geometry {:?} does not match input {:?}", self.geom, l.dims());
        }
        Ok(b)
    }

    fn output_batch(&self, l: &Layout) -> candle_core::Result<usize> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (ho, wo) = self.geom.output();
        if (c, h, w) != (self.out_channels, ho, wo) {
            candle_core::bail!("conv output gradient {:?} does not match geometry", l.dims());
        }
        Ok(b)
    }

    fn check_weight(&self, l: &Layout) -> candle_core::Result<()> {
        if l.shape() != &self.weight_shape() {
            candle_core::bail!("conv weight {:?}, expected {:?}", l.dims(), self.weight_shape());
        }
        Ok(())
    }
}

/// Applies `f` to two storages of the same float dtype.
macro_rules! dispatch2 {
    ($op:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let $a = contiguous_slice(x, $l1, $op)?;
                let $b = contiguous_slice(y, $l2, $op)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let $a = contiguous_slice(x, $l1, $op)?;
                let $b = contiguous_slice(y, $l2, $op)?;
                CpuStorage::F64($body)
            }
            (x, y) => candle_core::bail!("{}: unsupported dtypes {:?}/{:?}", $op, x.dtype(), y.dtype()),
        }
    };
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = self.input_batch(l1)?;
        self.check_weight(l2)?;
        let out = dispatch2!("conv2d", s1, l1, s2, l2, |x, w| self.forward(x, w, b));
        let (ho, wo) = self.geom.output();
        Ok((out, Shape::from((b, self.out_channels, ho, wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = w.apply_op2_no_bwd(&grad, &InputGrad(*self))?;
        let dw = x.apply_op2_no_bwd(&grad, &WeightGrad(*self))?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGrad(ConvOp);
struct WeightGrad(ConvOp);

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = self.0;
        op.check_weight(l1)?;
        let b = op.output_batch(l2)?;
        let out = dispatch2!("conv2d-input-grad", s1, l1, s2, l2, |w, dy| op.input_grad(w, dy, b));
        let g = op.geom;
        Ok((out, Shape::from((b, g.channels, g.height, g.width))))
    }
}

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = self.0;
        let b = op.input_batch(l1)?;
        if op.output_batch(l2)? != b {
            candle_core::bail!("conv2d-weight-grad: batch mismatch");
        }
        let out = dispatch2!("conv2d-weight-grad", s1, l1, s2, l2, |x, dy| op.weight_grad(x, dy, b));
        Ok((out, op.weight_shape()))
    }
}

/// Grouped 2D convolution of `x (B,C,H,W)` with `weight (Cout, C/groups, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> candle_core::Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (cout, cg, kh, kw) = weight.dims4()?;
    if kh != kw || groups == 0 || c != cg * groups || cout % groups != 0 || stride == 0 {
        candle_core::bail!(
            "conv2d: input {:?} incompatible with weight {:?} (groups {groups}, stride {stride})",
            x.dims(),
            weight.dims()
        );
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        candle_core::bail!("conv2d: kernel {kh} larger than padded input {h}x{w}");
    }
    let op = ConvOp {
        geom: Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
        },
        groups,
        out_channels: cout,
    };
    x.contiguous()?.apply_op2(&weight.contiguous()?, op)
}
