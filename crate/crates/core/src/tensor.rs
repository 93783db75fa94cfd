//! Dense channel-major (C×H×W) buffers used for images, masks, and feature maps.

use crate::scalar::Scalar;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// A C×H×W block of scalars stored contiguously, channel-major.
///
/// RGB images are 3×H×W with values in [0,1]; masks are 1×H×W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length mismatch");
        Self { channels, height, width, data }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn same_plane(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channels × pixels matrix view.
    pub fn matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.channels, self.plane_len()), &self.data).expect("contiguous")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, T> {
        let shape = (self.channels, self.plane_len());
        ArrayViewMut2::from_shape(shape, &mut self.data).expect("contiguous")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(self.channels, self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_vec(self.channels, self.height, self.width, data)
    }

    /// Stack along the channel axis.
    pub fn concat(parts: &[&Self]) -> Self {
        let first = parts.first().expect("concat of nothing");
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            assert!(p.same_plane(first), "concat plane mismatch");
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(data.len() / first.plane_len(), first.height, first.width, data)
    }

    /// Copy of channels `[start, start+count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        let n = self.plane_len();
        Self::from_vec(count, self.height, self.width, self.data[start * n..(start + count) * n].to_vec())
    }

    /// Multiply every channel by a single-channel mask.
    pub fn mul_mask(&self, mask: &Self) -> Self {
        assert!(mask.channels == 1 && mask.same_plane(self));
        let n = self.plane_len();
        let mut out = self.clone();
        for c in 0..self.channels {
            for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(&mask.data) {
                *v *= m;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize(self.len()).unwrap()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Size of the payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.len() * std::mem::size_of::<T>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_slice_agree() {
        let a = Tensor::<f64>::from_fn(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let b = Tensor::<f64>::filled(1, 3, 4, -1.0);
        let cat = Tensor::concat(&[&a, &b]);
        assert_eq!(cat.channels, 3);
        assert_eq!(cat.slice_channels(0, 2), a);
        assert_eq!(cat.slice_channels(2, 1), b);
        assert_eq!(cat.at(1, 2, 3), 123.0);
    }

    #[test]
    fn mask_multiplication() {
        let img = Tensor::<f32>::filled(3, 2, 2, 0.5);
        let mask = Tensor::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = img.mul_mask(&mask);
        assert_eq!(out.plane(2), &[0.5, 0.0, 0.0, 0.5]);
    }
}
