//! Reconstruction losses (L1, mask, perceptual, flow-mask penalty) and their gradients.

use crate::nn::{Activation, ActivationCache, Conv2d, ConvCache, Init, ParamLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_mask: f64,
    pub w_vgg: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_l1: 1.0, w_mask: 1.0, w_vgg: 1.0, lambda_f: 1e4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("w_l1", self.w_l1), ("w_mask", self.w_mask), ("w_vgg", self.w_vgg), ("lambda_f", self.lambda_f)] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub flow_pen: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, mask: f64, perceptual: f64, flow_pen: f64, w: &LossWeights) -> Self {
        let total = w.w_l1 * l1 + w.w_mask * mask + w.w_vgg * perceptual + w.lambda_f * flow_pen;
        Self { l1, mask, perceptual, flow_pen, total }
    }

    /// Whether `total` is the weighted sum of the components.
    pub fn is_consistent(&self, w: &LossWeights) -> bool {
        let expected = Self::new(self.l1, self.mask, self.perceptual, self.flow_pen, w).total;
        (expected - self.total).abs() <= 1e-9 * expected.abs().max(1.0)
    }

    pub fn all_finite(&self) -> bool {
        [self.l1, self.mask, self.perceptual, self.flow_pen, self.total].iter().all(|v| v.is_finite())
    }

    /// Componentwise sum, for averaging over a batch.
    pub fn accumulate(&mut self, other: &Self) {
        self.l1 += other.l1;
        self.mask += other.mask;
        self.perceptual += other.perceptual;
        self.flow_pen += other.flow_pen;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            l1: self.l1 * s,
            mask: self.mask * s,
            perceptual: self.perceptual * s,
            flow_pen: self.flow_pen * s,
            total: self.total * s,
        }
    }
}

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), LossError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )))
    }
}

fn mean_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    let sum: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    sum / T::from_usize(a.len()).unwrap()
}

/// d/da of mean |a − b|.
fn mean_abs_diff_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, scale: T) -> Tensor<T> {
    let k = scale / T::from_usize(a.len()).unwrap();
    a.zip_map(b, |x, y| {
        if x > y {
            k
        } else if x < y {
            -k
        } else {
            T::zero()
        }
    })
}

pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, LossError> {
    check_shapes(pred, target)?;
    Ok(mean_abs_diff(&pred.data, &target.data))
}

pub fn l1_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, LossError> {
    check_shapes(pred, target)?;
    Ok(mean_abs_diff_grad(pred, target, T::one()))
}

/// Mean absolute difference between the predicted composition mask and the garment mask.
pub fn mask_loss<T: Scalar>(pred_mask: &Tensor<T>, target_mask: &Tensor<T>) -> Result<T, LossError> {
    l1_loss(pred_mask, target_mask)
}

pub fn mask_grad<T: Scalar>(pred_mask: &Tensor<T>, target_mask: &Tensor<T>) -> Result<Tensor<T>, LossError> {
    l1_grad(pred_mask, target_mask)
}

/// Mean squared flow-mask value.
pub fn flow_mask_penalty<T: Scalar>(flow_mask: &Tensor<T>) -> T {
    flow_mask.data.iter().map(|&m| m * m).sum::<T>() / T::from_usize(flow_mask.len()).unwrap()
}

pub fn flow_mask_penalty_grad<T: Scalar>(flow_mask: &Tensor<T>) -> Tensor<T> {
    let k = T::lit(2.0) / T::from_usize(flow_mask.len()).unwrap();
    flow_mask.map(|m| k * m)
}

/// A frozen feature extractor for the perceptual loss. Only input gradients are computed.
pub trait FeatureExtractor<T: Scalar> {
    type Cache;

    fn num_layers(&self) -> usize;

    /// Features at every extraction layer, shallowest first.
    fn extract(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, Self::Cache);

    /// Gradient with respect to the input, given gradients for each extracted feature map.
    fn input_gradient(&self, cache: &Self::Cache, d_features: &[Tensor<T>]) -> Tensor<T>;
}

/// Returns the input itself as the only feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    type Cache = ();

    fn num_layers(&self) -> usize {
        1
    }

    fn extract(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, ()) {
        (vec![x.clone()], ())
    }

    fn input_gradient(&self, _: &(), d_features: &[Tensor<T>]) -> Tensor<T> {
        d_features[0].clone()
    }
}

/// Stack of stride-2 3×3 conv + ReLU stages with fixed random weights.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor<T> {
    stages: Vec<Conv2d>,
    params: Vec<T>,
}

pub struct RandomConvCache<T> {
    stages: Vec<(ConvCache<T>, ActivationCache<T>)>,
}

pub const EXTRACTOR_WIDTHS: [usize; 5] = [16, 32, 32, 64, 64];

impl<T: Scalar> RandomConvExtractor<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut layout = ParamLayout::default();
        let mut prev = in_channels;
        let stages: Vec<Conv2d> = EXTRACTOR_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(&mut layout, &format!("extractor{i}"), prev, w, 3, 2);
                prev = w;
                conv
            })
            .collect();
        let mut params = vec![T::zero(); layout.total()];
        for conv in &stages {
            conv.init(&mut params, seed, Init::Uniform { gain: 6f64.sqrt() });
        }
        Self { stages, params }
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomConvExtractor<T> {
    type Cache = RandomConvCache<T>;

    fn num_layers(&self) -> usize {
        self.stages.len()
    }

    fn extract(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, RandomConvCache<T>) {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for conv in &self.stages {
            let (y, cc) = conv.forward(&self.params, &h);
            let (y, ac) = Activation::Relu.forward(y, T::one());
            caches.push((cc, ac));
            feats.push(y.clone());
            h = y;
        }
        (feats, RandomConvCache { stages: caches })
    }

    fn input_gradient(&self, cache: &RandomConvCache<T>, d_features: &[Tensor<T>]) -> Tensor<T> {
        let mut d: Option<Tensor<T>> = None;
        for (i, conv) in self.stages.iter().enumerate().rev() {
            let mut dy = d_features[i].clone();
            if let Some(g) = d.take() {
                dy.add_assign(&g);
            }
            let (cc, ac) = &cache.stages[i];
            let dy = Activation::Relu.backward(ac, &dy);
            d = conv.backward(&self.params, cc, &dy, None, true);
        }
        d.expect("extractor has stages")
    }
}

/// Σ over layers of (1/L) · mean |φ(a) − φ(b)|.
pub fn perceptual_loss<T: Scalar, E: FeatureExtractor<T>>(a: &Tensor<T>, b: &Tensor<T>, extractor: &E) -> Result<T, LossError> {
    check_shapes(a, b)?;
    let (fa, _) = extractor.extract(a);
    let (fb, _) = extractor.extract(b);
    let inv_l = T::one() / T::from_usize(extractor.num_layers()).unwrap();
    Ok(fa.iter().zip(&fb).map(|(x, y)| mean_abs_diff(&x.data, &y.data) * inv_l).sum())
}

/// Loss value and its gradient with respect to `pred`.
pub fn perceptual_with_grad<T: Scalar, E: FeatureExtractor<T>>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &E,
) -> Result<(T, Tensor<T>), LossError> {
    check_shapes(pred, target)?;
    let (fp, cache) = extractor.extract(pred);
    let (ft, _) = extractor.extract(target);
    let inv_l = T::one() / T::from_usize(extractor.num_layers()).unwrap();
    let loss = fp.iter().zip(&ft).map(|(x, y)| mean_abs_diff(&x.data, &y.data) * inv_l).sum();
    let d_feats: Vec<Tensor<T>> = fp.iter().zip(&ft).map(|(x, y)| mean_abs_diff_grad(x, y, inv_l)).collect();
    Ok((loss, extractor.input_gradient(&cache, &d_feats)))
}

/// Everything the training step needs from the objective.
pub struct LossGradients<T> {
    pub breakdown: LossBreakdown,
    /// With respect to the final frame (composed, or flow-blended when flow is on).
    pub d_frame: Tensor<T>,
    pub d_mask: Tensor<T>,
    pub d_flow_mask: Option<Tensor<T>>,
}

/// Weighted objective over one frame.
pub fn evaluate_objective<T: Scalar, E: FeatureExtractor<T>>(
    weights: &LossWeights,
    extractor: &E,
    frame: &Tensor<T>,
    target: &Tensor<T>,
    pred_mask: &Tensor<T>,
    garment_mask: &Tensor<T>,
    flow_mask: Option<&Tensor<T>>,
) -> Result<LossGradients<T>, LossError> {
    let l1 = l1_loss(frame, target)?;
    let mask = mask_loss(pred_mask, garment_mask)?;
    let (perceptual, d_perc) = perceptual_with_grad(frame, target, extractor)?;
    let flow_pen = flow_mask.map(flow_mask_penalty).unwrap_or_else(T::zero);
    let breakdown = LossBreakdown::new(l1.as_f64(), mask.as_f64(), perceptual.as_f64(), flow_pen.as_f64(), weights);
    debug_assert!(!breakdown.all_finite() || breakdown.is_consistent(weights));

    let mut d_frame = mean_abs_diff_grad(frame, target, T::lit(weights.w_l1));
    let w_vgg = T::lit(weights.w_vgg);
    for (d, &g) in d_frame.data.iter_mut().zip(&d_perc.data) {
        *d += w_vgg * g;
    }
    let d_mask = mean_abs_diff_grad(pred_mask, garment_mask, T::lit(weights.w_mask));
    let lambda = T::lit(weights.lambda_f);
    let d_flow_mask = flow_mask.map(|m| flow_mask_penalty_grad(m).map(|g| g * lambda));
    Ok(LossGradients { breakdown, d_frame, d_mask, d_flow_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn l1_cases() {
        let a = random(3, 5, 4, 1);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.5);
        assert!((l1_loss(&shifted, &a).unwrap() - 0.5).abs() < 1e-12);
        assert!(l1_loss(&a, &random(1, 5, 4, 1)).is_err());
    }

    #[test]
    fn mask_closed_form() {
        let target = Tensor::from_fn(1, 10, 10, |_, y, _| (y < 4) as u8 as f64);
        let pred = Tensor::filled(1, 10, 10, 0.3);
        assert!((mask_loss(&pred, &target).unwrap() - 0.46).abs() < 1e-12);
    }

    #[test]
    fn flow_penalty_cases() {
        assert_eq!(flow_mask_penalty(&Tensor::filled(1, 3, 3, 0.5f64)), 0.25);
        assert_eq!(flow_mask_penalty(&Tensor::filled(1, 3, 3, 1.0f64)), 1.0);
    }

    #[test]
    fn identity_extractor_collapses_to_l1() {
        let (a, b) = (random(3, 8, 6, 2), random(3, 8, 6, 3));
        let p = perceptual_loss(&a, &b, &IdentityExtractor).unwrap();
        assert_eq!(p, l1_loss(&a, &b).unwrap());
    }

    #[test]
    fn perceptual_symmetric_and_zero_at_identity() {
        let ext = RandomConvExtractor::<f64>::new(3, 4);
        let (a, b) = (random(3, 16, 12, 2), random(3, 16, 12, 3));
        assert_eq!(perceptual_loss(&a, &a, &ext).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &ext).unwrap();
        assert!(ab > 0.0);
        assert!((ab - perceptual_loss(&b, &a, &ext).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let ext = RandomConvExtractor::<f64>::new(3, 4);
        let (a, b) = (random(3, 16, 12, 5), random(3, 16, 12, 6));
        let (_, g) = perceptual_with_grad(&a, &b, &ext).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let i = rng.gen_range(0..a.len());
            let h = 1e-6;
            let mut p = a.clone();
            p.data[i] += h;
            let up = perceptual_loss(&p, &b, &ext).unwrap();
            p.data[i] -= 2.0 * h;
            let down = perceptual_loss(&p, &b, &ext).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-9 + 0.01 * fd.abs(), "{fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let w = LossWeights::default();
        let b = LossBreakdown::new(0.1, 0.2, 0.3, 1e-5, &w);
        assert!((b.total - (0.6 + 0.1)).abs() < 1e-12);
        assert!(b.is_consistent(&w));
    }
}
