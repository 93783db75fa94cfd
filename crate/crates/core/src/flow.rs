//! Temporal branch: warp the previous output frame along an ingested flow field and blend it
//! with the current synthesis through a learned mask.

use crate::nn::{Activation, ActivationCache, Conv2d, ConvCache, Init, ParamLayout};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid flow field: {0}")]
    InvalidFlow(String),
}

/// Dense per-pixel displacement. For the field stored at index `t`, sampling frame `t` at
/// `(x + dx, y + dy)` reproduces frame `t + 1` at `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField<T> {
    pub height: usize,
    pub width: usize,
    /// dx plane followed by dy plane, each row-major.
    pub displacement: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, displacement: vec![T::zero(); 2 * height * width] }
    }

    pub fn constant(height: usize, width: usize, dx: T, dy: T) -> Self {
        let n = height * width;
        let mut displacement = vec![dx; n];
        displacement.extend(std::iter::repeat_n(dy, n));
        Self { height, width, displacement }
    }

    pub fn new(height: usize, width: usize, displacement: Vec<T>) -> Result<Self, FlowError> {
        if displacement.len() != 2 * height * width {
            return Err(FlowError::InvalidFlow(format!(
                "expected {} values, got {}",
                2 * height * width,
                displacement.len()
            )));
        }
        let field = Self { height, width, displacement };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let (w, h) = (T::from_usize(self.width).unwrap(), T::from_usize(self.height).unwrap());
        let n = self.height * self.width;
        for (i, &v) in self.displacement.iter().enumerate() {
            let bound = if i < n { w } else { h };
            if !v.is_finite() || v.abs() > bound {
                return Err(FlowError::InvalidFlow(format!("displacement {i} = {v} outside ±{bound}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn dx(&self, y: usize, x: usize) -> T {
        self.displacement[y * self.width + x]
    }

    #[inline]
    pub fn dy(&self, y: usize, x: usize) -> T {
        self.displacement[self.height * self.width + y * self.width + x]
    }
}

/// Bilinear sample of one plane at continuous pixel coordinates, clamping to the border.
#[inline]
fn sample_clamped<T: Scalar>(plane: &[T], h: usize, w: usize, sx: T, sy: T) -> T {
    let max_x = T::from_usize(w - 1).unwrap();
    let max_y = T::from_usize(h - 1).unwrap();
    let sx = sx.max(T::zero()).min(max_x);
    let sy = sy.max(T::zero()).min(max_y);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let x0 = x0.to_usize().unwrap();
    let y0 = y0.to_usize().unwrap();
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
    top * (T::one() - fy) + bottom * fy
}

/// `out(x, y) = prev(x + dx, y + dy)` with bilinear interpolation and border clamping.
pub fn backward_warp<T: Scalar>(prev: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>, FlowError> {
    if prev.height != flow.height || prev.width != flow.width {
        return Err(FlowError::ShapeMismatch(format!(
            "image {}x{} vs flow {}x{}",
            prev.height, prev.width, flow.height, flow.width
        )));
    }
    let (h, w) = (prev.height, prev.width);
    let mut out = Tensor::zeros(prev.channels, h, w);
    for c in 0..prev.channels {
        let src = prev.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let sx = T::from_usize(x).unwrap() + flow.dx(y, x);
                let sy = T::from_usize(y).unwrap() + flow.dy(y, x);
                dst[y * w + x] = sample_clamped(src, h, w, sx, sy);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowComposeOutput<T> {
    pub warped_prev: Tensor<T>,
    pub flow_mask: Tensor<T>,
    pub final_frame: Tensor<T>,
}

/// `final = warped_prev · mask + composed · (1 − mask)`.
pub fn blend<T: Scalar>(composed: &Tensor<T>, warped_prev: &Tensor<T>, flow_mask: &Tensor<T>) -> Result<Tensor<T>, FlowError> {
    if !composed.same_shape(warped_prev) || flow_mask.channels != 1 || !flow_mask.same_plane(composed) {
        return Err(FlowError::ShapeMismatch("flow blend operands".into()));
    }
    let n = composed.plane_len();
    let mut out = composed.clone();
    for c in 0..composed.channels {
        let dst = &mut out.data[c * n..(c + 1) * n];
        for ((o, &p), &m) in dst.iter_mut().zip(warped_prev.plane(c)).zip(&flow_mask.data) {
            *o = p * m + *o * (T::one() - m);
        }
    }
    Ok(out)
}

/// Warp `prev_final` by `flow` and blend it into `composed` with the given mask.
pub fn flow_compose<T: Scalar>(
    composed: &Tensor<T>,
    prev_final: &Tensor<T>,
    flow: &FlowField<T>,
    flow_mask: &Tensor<T>,
) -> Result<FlowComposeOutput<T>, FlowError> {
    if !composed.same_shape(prev_final) {
        return Err(FlowError::ShapeMismatch("composed vs previous frame".into()));
    }
    let warped_prev = backward_warp(prev_final, flow)?;
    let final_frame = blend(composed, &warped_prev, flow_mask)?;
    Ok(FlowComposeOutput { warped_prev, flow_mask: flow_mask.clone(), final_frame })
}

/// Small convolutional head predicting the flow mask from `[composed, warped_prev]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMaskHead {
    hidden: Conv2d,
    out: Conv2d,
    /// Replaces the predicted mask with a constant (used to pin the branch off in tests).
    pub forced_mask: Option<f64>,
}

pub struct FlowHeadCache<T> {
    hidden: ConvCache<T>,
    act: ActivationCache<T>,
    out: ConvCache<T>,
    mask: Tensor<T>,
}

pub const FLOW_HEAD_PREFIX: &str = "flow_head.";
const FLOW_HEAD_WIDTH: usize = 8;

impl FlowMaskHead {
    pub fn new(layout: &mut ParamLayout, image_channels: usize) -> Self {
        Self {
            hidden: Conv2d::new(layout, "flow_head.hidden", 2 * image_channels, FLOW_HEAD_WIDTH, 3, 1),
            out: Conv2d::new(layout, "flow_head.out", FLOW_HEAD_WIDTH, 1, 3, 1),
            forced_mask: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    pub fn init<T: Scalar>(&self, params: &mut [T], seed: u64) {
        self.hidden.init(params, seed, Init::Uniform { gain: 6f64.sqrt() });
        self.out.init(params, seed, Init::Uniform { gain: 3f64.sqrt() });
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        composed: &Tensor<T>,
        warped_prev: &Tensor<T>,
    ) -> (Tensor<T>, FlowHeadCache<T>) {
        let input = Tensor::concat(&[composed, warped_prev]);
        let (h, hidden) = self.hidden.forward(params, &input);
        let (a, act) = Activation::Relu.forward(h, T::one());
        let (logits, out) = self.out.forward(params, &a);
        let mask = match self.forced_mask {
            Some(v) => Tensor::filled(1, logits.height, logits.width, T::lit(v)),
            None => logits.map(sigmoid),
        };
        (mask.clone(), FlowHeadCache { hidden, act, out, mask })
    }

    /// Returns the gradient with respect to `composed` (warped_prev is treated as a constant).
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &FlowHeadCache<T>,
        d_mask: &Tensor<T>,
        grads: &mut [T],
    ) -> Tensor<T> {
        let channels = self.hidden.in_channels / 2;
        if self.forced_mask.is_some() {
            return Tensor::zeros(channels, d_mask.height, d_mask.width);
        }
        let d_logits = cache.mask.zip_map(d_mask, |m, g| g * m * (T::one() - m));
        let d_a = self.out.backward(params, &cache.out, &d_logits, Some(grads), true).unwrap();
        let d_h = Activation::Relu.backward(&cache.act, &d_a);
        let d_in = self.hidden.backward(params, &cache.hidden, &d_h, Some(grads), true).unwrap();
        d_in.slice_channels(0, channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(3, h, w, |c, y, x| ((x * 3 + c + y / 4) % 7) as f64 / 7.0)
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = stripes(8, 10);
        let out = backward_warp(&img, &FlowField::zeros(8, 10)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_matches_index_shift() {
        let img = stripes(8, 10);
        let out = backward_warp(&img, &FlowField::constant(8, 10, 3.0, 0.0)).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..7 {
                    assert_eq!(out.at(c, y, x), img.at(c, y, x + 3));
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let img = stripes(6, 5);
        let out = backward_warp(&img, &FlowField::constant(6, 5, 5.0, -6.0)).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(out.at(1, y, x), img.at(1, 0, 4));
            }
        }
    }

    #[test]
    fn blend_arithmetic() {
        let composed = Tensor::filled(3, 2, 2, 0.2);
        let prev = Tensor::filled(3, 2, 2, 0.6);
        let zero = FlowField::zeros(2, 2);
        let half = Tensor::filled(1, 2, 2, 0.5);
        let out = flow_compose(&composed, &prev, &zero, &half).unwrap();
        assert!(out.final_frame.data.iter().all(|v: &f64| (v - 0.4).abs() < 1e-15));
        let off = flow_compose(&composed, &prev, &zero, &Tensor::zeros(1, 2, 2)).unwrap();
        assert_eq!(off.final_frame, composed);
        let on = flow_compose(&composed, &prev, &zero, &Tensor::filled(1, 2, 2, 1.0)).unwrap();
        assert_eq!(on.final_frame, prev);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let img = stripes(4, 4);
        assert!(matches!(backward_warp(&img, &FlowField::zeros(4, 5)), Err(FlowError::ShapeMismatch(_))));
    }

    #[test]
    fn flow_bounds_are_validated() {
        assert!(FlowField::new(2, 2, vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(FlowField::new(2, 2, vec![f64::NAN; 8]).is_err());
        assert!(FlowField::new(2, 2, vec![1.0; 8]).is_ok());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut layout = ParamLayout::default();
        let head = FlowMaskHead::new(&mut layout, 3);
        let mut params = vec![0.0; layout.total()];
        head.init(&mut params, 5);
        let composed = Tensor::from_fn(3, 4, 5, |c, y, x| ((c * 5 + y * 3 + x) % 6) as f64 / 6.0);
        let warped = stripes(4, 5);
        let r = Tensor::from_fn(1, 4, 5, |_, y, x| (y as f64 - x as f64) / 5.0);
        let (_, cache) = head.forward(&params, &composed, &warped);
        let mut grads = vec![0.0; params.len()];
        let d_comp = head.backward(&params, &cache, &r, &mut grads);
        let loss = |p: &[f64], c: &Tensor<f64>| {
            let (m, _) = head.forward(p, c, &warped);
            m.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in (0..params.len()).step_by(11) {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &composed);
            p[i] -= 2.0 * h;
            let fd = (up - loss(&p, &composed)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}");
        }
        for i in (0..composed.len()).step_by(3) {
            let mut c = composed.clone();
            c.data[i] += h;
            let up = loss(&params, &c);
            c.data[i] -= 2.0 * h;
            let fd = (up - loss(&params, &c)) / (2.0 * h);
            assert!((fd - d_comp.data[i]).abs() < 1e-7);
        }
    }
}
