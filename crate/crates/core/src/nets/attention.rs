//! Attention head: three 3x3 convolutions over backbone features producing a
//! single-channel map squashed to the open interval (0, 1).

use rand::Rng;

use crate::error::CoreResult;
use crate::nets::layers::{
    relu, relu_backward, scoped, sigmoid, sigmoid_backward, Conv2d, ConvCache, Param,
};
use crate::tensor::{Scalar, Tensor};

/// Sigmoid outputs are clamped to `[ATTENTION_EPS, 1 - ATTENTION_EPS]` so the
/// map stays strictly inside (0, 1) even when f32 saturates.
pub const ATTENTION_EPS: f64 = 1e-7;

const MID1: usize = 128;
const MID2: usize = 32;

#[derive(Clone, Debug)]
pub struct AttentionHead<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
}

pub struct AttentionCache<T> {
    c1: ConvCache<T>,
    r1: Tensor<T>,
    c2: ConvCache<T>,
    r2: Tensor<T>,
    c3: ConvCache<T>,
    a: Tensor<T>,
}

impl<T: Scalar> AttentionHead<T> {
    /// `zero_init_final` gives the 0.5-everywhere cold start; disable it to
    /// exercise gradient flow from a random final layer.
    pub fn new<R: Rng>(in_c: usize, zero_init_final: bool, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_c, MID1, 3, 1, 1, rng);
        let conv2 = Conv2d::new(MID1, MID2, 3, 1, 1, rng);
        let conv3 = if zero_init_final {
            Conv2d::zeroed(MID2, 1, 3, 1, 1)
        } else {
            Conv2d::new(MID2, 1, 3, 1, 1, rng)
        };
        AttentionHead {
            conv1,
            conv2,
            conv3,
        }
    }

    fn squash(y: &mut Tensor<T>) {
        let lo = T::from_f64(ATTENTION_EPS);
        let hi = T::one() - lo;
        for v in y.data_mut() {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }

    pub fn forward(&self, f: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let h = relu(&self.conv1.forward(f)?);
        let h = relu(&self.conv2.forward(&h)?);
        let mut a = sigmoid(&self.conv3.forward(&h)?);
        Self::squash(&mut a);
        Ok(a)
    }

    pub fn forward_train(&self, f: &Tensor<T>) -> CoreResult<(Tensor<T>, AttentionCache<T>)> {
        let (y1, c1) = self.conv1.forward_train(f)?;
        let r1 = relu(&y1);
        let (y2, c2) = self.conv2.forward_train(&r1)?;
        let r2 = relu(&y2);
        let (y3, c3) = self.conv3.forward_train(&r2)?;
        let mut a = sigmoid(&y3);
        Self::squash(&mut a);
        Ok((
            a.clone(),
            AttentionCache {
                c1,
                r1,
                c2,
                r2,
                c3,
                a,
            },
        ))
    }

    pub fn backward(&mut self, da: &Tensor<T>, cache: &AttentionCache<T>) -> CoreResult<Tensor<T>> {
        let dy3 = sigmoid_backward(da, &cache.a);
        let dr2 = self.conv3.backward(&dy3, &cache.c3)?;
        let dy2 = relu_backward(&dr2, &cache.r2);
        let dr1 = self.conv2.backward(&dy2, &cache.c2)?;
        let dy1 = relu_backward(&dr1, &cache.r1);
        self.conv1.backward(&dy1, &cache.c1)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params(&scoped(prefix, "conv1"), f);
        self.conv2.visit_params(&scoped(prefix, "conv2"), f);
        self.conv3.visit_params(&scoped(prefix, "conv3"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn zero_init_yields_half_everywhere() {
        let mut rng = derive_rng(31, "attn-half", 0);
        let head = AttentionHead::<f32>::new(8, true, &mut rng);
        let f = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng);
        let a = head.forward(&f).unwrap();
        assert_eq!(a.shape(), &[2, 1, 5, 5]);
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_stays_in_open_interval_under_extreme_inputs() {
        let mut rng = derive_rng(31, "attn-open", 1);
        let mut head = AttentionHead::<f32>::new(4, false, &mut rng);
        // blow up the final layer so the sigmoid saturates
        head.conv3.weight.value.scale(1e6);
        let f = Tensor::randn(&[1, 4, 6, 6], 10.0, &mut rng);
        let a = head.forward(&f).unwrap();
        for &v in a.data() {
            assert!(v > 0.0 && v < 1.0, "attention value {v} escaped (0,1)");
        }
    }
}
