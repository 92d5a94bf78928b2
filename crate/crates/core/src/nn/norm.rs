//! Fused normalization kernels with analytic backward passes.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

fn slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("group standardization expects a contiguous input"),
    }
}

/// Returns `(mean, 1/σ)` of one group.
fn moments<T: Float>(x: &[T], eps: f64) -> (T, T) {
    let n = T::from(x.len()).unwrap();
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from(eps).unwrap()).sqrt())
}

fn forward<T: Float + WithDType>(x: &[T], group: usize, eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xs, ys) in x.chunks(group).zip(out.chunks_mut(group)) {
        let (mean, inv) = moments(xs, eps);
        for (y, &v) in ys.iter_mut().zip(xs) {
            *y = (v - mean) * inv;
        }
    }
    out
}

/// `dx = (g − mean(g) − x̂·mean(g·x̂)) / σ` per group.
fn backward<T: Float + WithDType>(x: &[T], grad: &[T], group: usize, eps: f64) -> Vec<T> {
    let n = T::from(group).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for ((xs, gs), ds) in x.chunks(group).zip(grad.chunks(group)).zip(out.chunks_mut(group)) {
        let (mean, inv) = moments(xs, eps);
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for (&v, &g) in xs.iter().zip(gs) {
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * (v - mean) * inv;
        }
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for ((d, &v), &g) in ds.iter_mut().zip(xs).zip(gs) {
            *d = (g - mg - (v - mean) * inv * mgx) * inv;
        }
    }
    out
}

/// Standardizes each contiguous run of `group` elements to zero mean and unit variance.
pub(crate) struct Standardize {
    pub group: usize,
    pub eps: f64,
}

struct StandardizeGrad {
    group: usize,
    eps: f64,
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "group-standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if self.group == 0 || l.shape().elem_count() % self.group != 0 {
            candle_core::bail!("group size {} does not divide {:?}", self.group, l.dims());
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(forward(slice(v, l)?, self.group, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(forward(slice(v, l)?, self.group, self.eps)),
            other => candle_core::bail!("group-standardize: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = StandardizeGrad {
            group: self.group,
            eps: self.eps,
        };
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "group-standardize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.dims() != l2.dims() {
            candle_core::bail!("group-standardize-grad: shapes {:?} and {:?}", l1.dims(), l2.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(backward(slice(x, l1)?, slice(g, l2)?, self.group, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(backward(slice(x, l1)?, slice(g, l2)?, self.group, self.eps))
            }
            _ => candle_core::bail!("group-standardize-grad: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Group norm over `(B, C, ...)` with a per-channel affine, as one op on
/// `(x, gamma, beta)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

/// Channels per group, spatial size and channel count of a `(B, C, ...)` input.
#[derive(Debug, Clone, Copy)]
struct Blocks {
    per_group: usize,
    spatial: usize,
    channels: usize,
}

impl GroupNormOp {
    fn blocks(&self, l: &Layout) -> candle_core::Result<Blocks> {
        let dims = l.dims();
        if dims.len() < 2 {
            candle_core::bail!("group norm needs a (B, C, ...) input, got {dims:?}");
        }
        let c = dims[1];
        if self.groups == 0 || c % self.groups != 0 {
            candle_core::bail!("group norm: {c} channels not divisible into {} groups", self.groups);
        }
        Ok(Blocks {
            per_group: c / self.groups,
            spatial: dims[2..].iter().product(),
            channels: c,
        })
    }

    fn check_param(&self, l: &Layout, channels: usize) -> candle_core::Result<()> {
        if l.dims() != [channels] {
            candle_core::bail!("group norm parameter {:?}, expected [{channels}]", l.dims());
        }
        Ok(())
    }

    fn forward<T: Float + WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], k: Blocks) -> Vec<T> {
        let group = k.per_group * k.spatial;
        let mut out = vec![T::zero(); x.len()];
        for (gi, (xs, ys)) in x.chunks(group).zip(out.chunks_mut(group)).enumerate() {
            let (mean, inv) = moments(xs, self.eps);
            let first = (gi % self.groups) * k.per_group;
            for (ci, (xc, yc)) in xs.chunks(k.spatial).zip(ys.chunks_mut(k.spatial)).enumerate() {
                let (scale, shift) = (gamma[first + ci] * inv, beta[first + ci]);
                for (y, &v) in yc.iter_mut().zip(xc) {
                    *y = (v - mean) * scale + shift;
                }
            }
        }
        out
    }

    /// Input gradient: the standardization backward applied to `g·γ`.
    fn input_grad<T: Float + WithDType>(&self, x: &[T], gamma: &[T], grad: &[T], k: Blocks) -> Vec<T> {
        let group = k.per_group * k.spatial;
        let n = T::from(group).unwrap();
        let mut out = vec![T::zero(); x.len()];
        for (gi, ((xs, gs), ds)) in x
            .chunks(group)
            .zip(grad.chunks(group))
            .zip(out.chunks_mut(group))
            .enumerate()
        {
            let (mean, inv) = moments(xs, self.eps);
            let first = (gi % self.groups) * k.per_group;
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for (ci, (xc, gc)) in xs.chunks(k.spatial).zip(gs.chunks(k.spatial)).enumerate() {
                let gamma = gamma[first + ci];
                for (&v, &g) in xc.iter().zip(gc) {
                    sum_g = sum_g + g * gamma;
                    sum_gx = sum_gx + g * gamma * (v - mean) * inv;
                }
            }
            let (mg, mgx) = (sum_g / n, sum_gx / n);
            for (ci, ((xc, gc), dc)) in xs
                .chunks(k.spatial)
                .zip(gs.chunks(k.spatial))
                .zip(ds.chunks_mut(k.spatial))
                .enumerate()
            {
                let gamma = gamma[first + ci];
                for ((d, &v), &g) in dc.iter_mut().zip(xc).zip(gc) {
                    *d = (g * gamma - mg - (v - mean) * inv * mgx) * inv;
                }
            }
        }
        out
    }

    /// `[dγ; dβ]` as a flat `2·C` vector.
    fn param_grad<T: Float + WithDType>(&self, x: &[T], grad: &[T], k: Blocks) -> Vec<T> {
        let group = k.per_group * k.spatial;
        let mut out = vec![T::zero(); 2 * k.channels];
        for (gi, (xs, gs)) in x.chunks(group).zip(grad.chunks(group)).enumerate() {
            let (mean, inv) = moments(xs, self.eps);
            let first = (gi % self.groups) * k.per_group;
            for (ci, (xc, gc)) in xs.chunks(k.spatial).zip(gs.chunks(k.spatial)).enumerate() {
                let (mut dg, mut db) = (T::zero(), T::zero());
                for (&v, &g) in xc.iter().zip(gc) {
                    dg = dg + g * (v - mean) * inv;
                    db = db + g;
                }
                out[first + ci] = out[first + ci] + dg;
                out[k.channels + first + ci] = out[k.channels + first + ci] + db;
            }
        }
        out
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let k = self.blocks(l1)?;
        self.check_param(l2, k.channels)?;
        self.check_param(l3, k.channels)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(
                self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, k),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(
                self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, k),
            ),
            _ => candle_core::bail!("group-norm: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = x.apply_op3_no_bwd(gamma, &grad, &GroupNormInputGrad(*self))?;
        let dp = x.apply_op2_no_bwd(&grad, &GroupNormParamGrad(*self))?;
        let c = gamma.elem_count();
        Ok((Some(dx), Some(dp.narrow(0, 0, c)?), Some(dp.narrow(0, c, c)?)))
    }
}

struct GroupNormInputGrad(GroupNormOp);
struct GroupNormParamGrad(GroupNormOp);

impl CustomOp3 for GroupNormInputGrad {
    fn name(&self) -> &'static str {
        "group-norm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = self.0;
        let k = op.blocks(l1)?;
        op.check_param(l2, k.channels)?;
        if l3.dims() != l1.dims() {
            candle_core::bail!("group-norm-input-grad: gradient {:?} vs input {:?}", l3.dims(), l1.dims());
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => CpuStorage::F32(
                op.input_grad(slice(x, l1)?, slice(g, l2)?, slice(d, l3)?, k),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => CpuStorage::F64(
                op.input_grad(slice(x, l1)?, slice(g, l2)?, slice(d, l3)?, k),
            ),
            _ => candle_core::bail!("group-norm-input-grad: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for GroupNormParamGrad {
    fn name(&self) -> &'static str {
        "group-norm-param-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = self.0;
        let k = op.blocks(l1)?;
        if l2.dims() != l1.dims() {
            candle_core::bail!("group-norm-param-grad: gradient {:?} vs input {:?}", l2.dims(), l1.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(d)) => {
                CpuStorage::F32(op.param_grad(slice(x, l1)?, slice(d, l2)?, k))
            }
            (CpuStorage::F64(x), CpuStorage::F64(d)) => {
                CpuStorage::F64(op.param_grad(slice(x, l1)?, slice(d, l2)?, k))
            }
            _ => candle_core::bail!("group-norm-param-grad: unsupported or mixed dtypes"),
        };
        Ok((out, Shape::from(2 * k.channels)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn reference(x: &Tensor, eps: f64) -> Tensor {
        let mean = x.mean_keepdim(D::Minus1).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        c.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap()
    }

    #[test]
    fn matches_composed_ops_forward_and_backward() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (3, 4, 10), &Device::Cpu).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 4, 10), &Device::Cpu).unwrap();
        let op = Standardize { group: 10, eps: 1e-5 };
        let ours = x.as_tensor().contiguous().unwrap().apply_op1(op).unwrap();
        let theirs = reference(x.as_tensor(), 1e-5);
        let max = |t: Tensor| t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(max((&ours - &theirs).unwrap()) < 1e-12);
        let g1 = (ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max((g1.get(&x).unwrap() - g2.get(&x).unwrap()).unwrap()) < 1e-10);
    }

    #[test]
    fn rejects_group_that_does_not_divide() {
        let x = Tensor::zeros((2, 5), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(x.apply_op1(Standardize { group: 3, eps: 1e-5 }).is_err());
    }

    #[test]
    fn fused_group_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (2, 6, 3, 4), &dev).unwrap()).unwrap();
        let gamma = Var::from_tensor(&Tensor::randn(1f64, 0.5, 6, &dev).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::randn(0f64, 0.5, 6, &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 6, 3, 4), &dev).unwrap();
        let op = GroupNormOp { groups: 3, eps: 1e-5 };
        let ours = x.as_tensor().apply_op3(gamma.as_tensor(), beta.as_tensor(), op).unwrap();
        let normed = reference(&x.as_tensor().reshape((2, 3, 24)).unwrap(), 1e-5)
            .reshape((2, 6, 3, 4))
            .unwrap();
        let theirs = normed
            .broadcast_mul(&gamma.as_tensor().reshape((1, 6, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.as_tensor().reshape((1, 6, 1, 1)).unwrap())
            .unwrap();
        let max = |t: Tensor| t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(max((&ours - &theirs).unwrap()) < 1e-12);
        let g1 = (ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max((g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap()) < 1e-10);
        }
    }
}
