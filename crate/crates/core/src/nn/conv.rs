use super::{init_params, Init, ParamLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};
use std::ops::Range;

/// 2-D convolution with square kernel, zero padding, and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

pub struct ConvCache<T> {
    /// Unfolded input (in·k·k × out_pixels); for 1×1/stride-1 convs this is the input itself.
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = layout.alloc(format!("{name}.weight"), out_channels * in_channels * kernel * kernel);
        let bias = layout.alloc(format!("{name}.bias"), out_channels);
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn init<T: Scalar>(&self, params: &mut [T], seed: u64, init: Init) {
        init_params(&mut params[self.weight.clone()], seed, &format!("{}.weight", self.name), self.fan_in(), init);
        init_params(&mut params[self.bias.clone()], seed, &format!("{}.bias", self.name), self.fan_in(), Init::Zeros);
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn weight_view<'a, T: Scalar>(&self, params: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.out_channels, self.fan_in()), &params[self.weight.clone()]).unwrap()
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "{}: input channel mismatch", self.name);
        let (oh, ow) = self.out_size(x.height, x.width);
        let cols = if self.is_pointwise() {
            x.matrix().to_owned()
        } else {
            im2col(x, self.kernel, self.stride, self.padding, oh, ow)
        };
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        {
            let mut y = out.matrix_mut();
            for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(&params[self.bias.clone()]) {
                row.fill(b);
            }
            general_mat_mul(T::one(), &self.weight_view(params), &cols, T::one(), &mut y);
        }
        (out, ConvCache { cols, in_shape: (x.channels, x.height, x.width) })
    }

    /// Accumulates weight/bias gradients into `grads` (when given) and returns the input gradient
    /// (when `need_input_grad`).
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: Option<&mut [T]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let dy_m = dy.matrix();
        if let Some(grads) = grads {
            let mut dw = ArrayViewMut2::from_shape((self.out_channels, self.fan_in()), &mut grads[self.weight.clone()])
                .unwrap();
            general_mat_mul(T::one(), &dy_m, &cache.cols.t(), T::one(), &mut dw);
            for (g, row) in grads[self.bias.clone()].iter_mut().zip(dy_m.axis_iter(Axis(0))) {
                *g += row.sum();
            }
        }
        if !need_input_grad {
            return None;
        }
        let (c, h, w) = cache.in_shape;
        let mut dcols = Array2::zeros((self.fan_in(), dy.plane_len()));
        general_mat_mul(T::one(), &self.weight_view(params).t(), &dy_m, T::zero(), &mut dcols);
        if self.is_pointwise() {
            let data = dcols.into_raw_vec_and_offset().0;
            return Some(Tensor::from_vec(c, h, w, data));
        }
        Some(col2im(&dcols, (c, h, w), self.kernel, self.stride, self.padding, dy.height, dy.width))
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<T> {
    let mut cols = Array2::zeros((x.channels * k * k, oh * ow));
    let (h, w) = (x.height as isize, x.width as isize);
    for c in 0..x.channels {
        let plane = x.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((c * k + ky) * k + kx);
                let row = row.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &Array2<T>,
    (c_in, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(c_in, h, w);
    for c in 0..c_in {
        let plane = out.plane_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((c * k + ky) * k + kx);
                let row = row.as_slice().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv2d, params: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let (oh, ow) = conv.out_size(x.height, x.width);
        let k = conv.kernel;
        let w = &params[conv.weight.clone()];
        let b = &params[conv.bias.clone()];
        Tensor::from_fn(conv.out_channels, oh, ow, |o, oy, ox| {
            let mut acc = b[o];
            for c in 0..conv.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                            acc += w[((o * conv.in_channels + c) * k + ky) * k + kx] * x.at(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn setup(kernel: usize, stride: usize) -> (Conv2d, Vec<f64>, Tensor<f64>) {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 3, 4, kernel, stride);
        let mut params = vec![0.0; layout.total()];
        conv.init(&mut params, 1, Init::Uniform { gain: 1.0 });
        for (i, b) in params[conv.bias.clone()].iter_mut().enumerate() {
            *b = 0.1 * i as f64;
        }
        let x = Tensor::from_fn(3, 7, 6, |c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f64 / 11.0 - 0.4);
        (conv, params, x)
    }

    #[test]
    fn matches_naive_convolution() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let (conv, params, x) = setup(k, s);
            let (y, _) = conv.forward(&params, &x);
            let expect = naive_conv(&conv, &params, &x);
            assert_eq!((y.height, y.width), (expect.height, expect.width));
            for (a, b) in y.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let (conv, params, x) = setup(k, s);
            let (y, cache) = conv.forward(&params, &x);
            // loss = sum(y * r) for a fixed r
            let r = Tensor::from_fn(y.channels, y.height, y.width, |c, yy, xx| ((c + 2 * yy + 3 * xx) % 5) as f64 - 2.0);
            let mut grads = vec![0.0; params.len()];
            let dx = conv.backward(&params, &cache, &r, Some(&mut grads), true).unwrap();
            let loss = |p: &[f64], x: &Tensor<f64>| {
                let (y, _) = conv.forward(p, x);
                y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
            };
            let h = 1e-6;
            for i in (0..params.len()).step_by(7) {
                let mut p = params.clone();
                p[i] += h;
                let up = loss(&p, &x);
                p[i] -= 2.0 * h;
                let down = loss(&p, &x);
                assert!(((up - down) / (2.0 * h) - grads[i]).abs() < 1e-6);
            }
            for i in (0..x.len()).step_by(5) {
                let mut xp = x.clone();
                xp.data[i] += h;
                let up = loss(&params, &xp);
                xp.data[i] -= 2.0 * h;
                let down = loss(&params, &xp);
                assert!(((up - down) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
            }
        }
    }
}
