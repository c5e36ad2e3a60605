use super::layers::Conv;
use super::vss::VssBlock;
use crate::error::{shape_err, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Split-transform-concat stage: a 1×1 conv produces two halves, the second
/// half runs through `n` VSS blocks, every intermediate is kept, and a final
/// 1×1 conv fuses the `(2+n)` halves.
#[derive(Debug, Clone)]
pub struct C2fSsm {
    pub cv1: Conv,
    pub blocks: Vec<VssBlock>,
    pub cv2: Conv,
    pub half: usize,
}

impl C2fSsm {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, n: usize) -> Result<Self> {
        if !c_out.is_multiple_of(2) || c_out == 0 {
            return Err(shape_err!("C2fSSM output channels must be even, got {c_out}"));
        }
        let half = c_out / 2;
        let cv1 = Conv::new(ps, &format!("{name}.cv1"), c_in, c_out, 1, 1);
        let blocks = (0..n).map(|i| VssBlock::new(ps, &format!("{name}.m{i}"), half)).collect();
        let cv2 = Conv::new(ps, &format!("{name}.cv2"), (2 + n) * half, c_out, 1, 1);
        Ok(Self { cv1, blocks, cv2, half })
    }

    /// The concatenated `(2+n)·C/2` intermediate before the fusing conv.
    pub fn features(&self, p: &Binding, f: &Tensor) -> Result<Tensor> {
        let y = self.cv1.forward(p, f)?.silu()?;
        let mut parts = vec![y.slice(0, self.half)?, y.slice(self.half, 2 * self.half)?];
        for b in &self.blocks {
            let next = b.forward(p, parts.last().expect("two halves"))?;
            parts.push(next);
        }
        Tensor::concat(&parts)
    }

    pub fn forward(&self, p: &Binding, f: &Tensor) -> Result<Tensor> {
        self.cv2.forward(p, &self.features(p, f)?)?.silu()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn odd_output_channels_rejected() {
        let mut ps = ParamStore::new(0);
        assert!(C2fSsm::new(&mut ps, "c", 4, 5, 1).is_err());
    }

    #[test]
    fn output_channel_count() {
        let mut ps = ParamStore::new(0);
        let c = C2fSsm::new(&mut ps, "c", 3, 6, 2).unwrap();
        let y = c.forward(&ps.bind(false), &input(1, &[3, 4, 4])).unwrap();
        assert_eq!(y.shape(), &[6, 4, 4]);
    }

    #[test]
    fn zero_depth_is_split_concat_fuse() {
        let mut ps = ParamStore::new(0);
        let c = C2fSsm::new(&mut ps, "c", 3, 4, 0).unwrap();
        let p = ps.bind(false);
        let x = input(2, &[3, 3, 3]);
        let direct = c.cv2.forward(&p, &c.cv1.forward(&p, &x).unwrap().silu().unwrap()).unwrap().silu().unwrap();
        assert_eq!(c.forward(&p, &x).unwrap().data(), direct.data());
    }

    #[test]
    fn identity_blocks_repeat_the_second_half() {
        let mut ps = ParamStore::new(0);
        let c = C2fSsm::new(&mut ps, "c", 3, 4, 3).unwrap();
        let p = ps.bind(false);
        let x = input(3, &[3, 4, 2]);
        let y = c.cv1.forward(&p, &x).unwrap().silu().unwrap();
        let second = y.slice(2, 4).unwrap();
        let expect = Tensor::concat(&[y.clone(), second.clone(), second.clone(), second]).unwrap();
        assert_eq!(c.features(&p, &x).unwrap().data(), expect.data());
    }
}
