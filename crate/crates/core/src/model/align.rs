//! Channel fusion of the two branch feature maps and the residual
//! alignment block that maps the joint `2C` map back to `C` channels.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{norm_groups, Conv2d, ConvSpec, GroupNorm, ParamBuilder, ParamStore};

/// Concatenates `(B, C, H, W)` maps along channels, masked branch first.
pub fn fuse_features(masked: &Tensor, reuse: &Tensor) -> Result<Tensor> {
    if masked.dims() != reuse.dims() || masked.rank() != 4 {
        return Err(Error::Dimension(format!(
            "cannot fuse branch features {:?} and {:?}",
            masked.dims(),
            reuse.dims()
        )));
    }
    Ok(Tensor::cat(&[masked, reuse], 1)?)
}

/// One 3×3 conv → group norm → ReLU stage with an additive skip.
#[derive(Debug)]
struct AlignStage {
    conv: Conv2d,
    norm: GroupNorm,
    /// 1×1 projection on the skip path of the first (channel-reducing) stage.
    projection: Option<Conv2d>,
}

impl AlignStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let body = self.norm.forward(&self.conv.forward(x)?)?.relu()?;
        let skip = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((body + skip)?)
    }
}

/// `n` residual stages taking `2C` fused channels to `C`.
///
/// Group norm keeps the block independent of batch composition, which
/// matters because the two branches are evaluated together.
#[derive(Debug)]
pub struct AlignBlock {
    stages: Vec<AlignStage>,
    channels: usize,
    prefix: String,
}

impl AlignBlock {
    pub fn new(channels: usize, depth: usize, pb: &ParamBuilder) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("alignment depth must be at least 1".into()));
        }
        if channels == 0 {
            return Err(Error::Config("alignment needs at least one channel".into()));
        }
        let groups = norm_groups(channels);
        let mut stages = Vec::with_capacity(depth);
        for i in 0..depth {
            let spb = pb.pp(format!("stage{}", i + 1));
            let cin = if i == 0 { 2 * channels } else { channels };
            let projection = if i == 0 {
                Some(Conv2d::new(ConvSpec::new(cin, channels, 1), &spb.pp("projection"))?)
            } else {
                None
            };
            stages.push(AlignStage {
                conv: Conv2d::new(ConvSpec::new(cin, channels, 3), &spb.pp("conv"))?,
                norm: GroupNorm::new(channels, groups, &spb.pp("norm"))?,
                projection,
            });
        }
        Ok(Self {
            stages,
            channels,
            prefix: pb.prefix().to_string(),
        })
    }

    /// Zeroes every stage convolution and makes the first projection select
    /// the masked-branch half of the input, so the block reduces to that half.
    pub fn set_identity(&self, store: &ParamStore) -> Result<()> {
        let c = self.channels;
        let (dtype, dev) = (store.dtype(), store.device());
        for i in 0..self.stages.len() {
            let stage = self.param(&format!("stage{}.conv.weight", i + 1));
            let var = store
                .get(&stage)
                .ok_or_else(|| Error::Consistency(format!("missing parameter {stage}")))?;
            var.set(&var.as_tensor().zeros_like()?)?;
        }
        let name = self.param("stage1.projection.weight");
        let var = store
            .get(&name)
            .ok_or_else(|| Error::Consistency(format!("missing parameter {name}")))?;
        let eye = Tensor::eye(c, dtype, dev)?;
        let zeros = Tensor::zeros((c, c), dtype, dev)?;
        var.set(&Tensor::cat(&[&eye, &zeros], 1)?.reshape((c, 2 * c, 1, 1))?)?;
        Ok(())
    }

    fn param(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(&self, joint: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = joint.dims4()?;
        if c != 2 * self.channels {
            return Err(Error::Dimension(format!(
                "alignment expects {} input channels, got {c}",
                2 * self.channels
            )));
        }
        self.stages.iter().try_fold(joint.clone(), |h, s| s.forward(&h))
    }
}

/// `align(joint)` as a free function for a given block.
pub fn align_features(joint: &Tensor, block: &AlignBlock) -> Result<Tensor> {
    block.forward(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn fuse_concatenates_masked_first() {
        let a = rand((1, 4, 3, 3), 1);
        let b = Tensor::zeros((1, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let j = fuse_features(&a, &b).unwrap();
        assert_eq!(j.dims(), &[1, 8, 3, 3]);
        let first: Vec<f64> = j.narrow(1, 0, 4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(first, a.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let swapped = fuse_features(&b, &a).unwrap();
        let half: Vec<f64> = swapped.narrow(1, 4, 4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(half, first);
        assert!(fuse_features(&a, &rand((1, 4, 2, 3), 2)).is_err());
    }

    #[test]
    fn output_shape_for_any_depth() {
        for depth in 1..=4 {
            let store = ParamStore::new(depth as u64, DType::F64, &Device::Cpu);
            let block = AlignBlock::new(8, depth, &store.root()).unwrap();
            let y = block.forward(&rand((2, 16, 5, 5), 3)).unwrap();
            assert_eq!(y.dims(), &[2, 8, 5, 5]);
        }
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        assert!(AlignBlock::new(8, 0, &store.root()).is_err());
    }

    #[test]
    fn zero_stages_leave_the_projected_input() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let block = AlignBlock::new(4, 3, &store.root().pp("align")).unwrap();
        block.set_identity(&store).unwrap();
        let masked = rand((2, 4, 6, 6), 5);
        let reuse = rand((2, 4, 6, 6), 6);
        let y = block.forward(&fuse_features(&masked, &reuse).unwrap()).unwrap();
        let diff = (y - &masked).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let store = ParamStore::new(11, DType::F64, &Device::Cpu);
        let block = AlignBlock::new(4, 3, &store.root()).unwrap();
        let joint = candle_core::Var::from_tensor(&rand((1, 8, 5, 5), 12)).unwrap();
        let weights = rand((1, 4, 5, 5), 13);
        let loss = |x: &Tensor| -> f64 {
            (block.forward(x).unwrap() * &weights)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let grads = (block.forward(joint.as_tensor()).unwrap() * &weights)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let analytic: Vec<f64> = grads.get(&joint).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = joint.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let h = 1e-6;
        for _ in 0..5 {
            let i = rng.random_range(0..base.len());
            let shifted = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                Tensor::from_vec(v, (1, 8, 5, 5), &Device::Cpu).unwrap()
            };
            let numeric = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-2, "coord {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }
}
