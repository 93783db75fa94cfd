use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2×2 average pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let quarter = T::lit(0.25);
    Tensor::from_fn(x.channels, oh, ow, |c, y, xx| {
        (x.at(c, 2 * y, 2 * xx) + x.at(c, 2 * y, 2 * xx + 1) + x.at(c, 2 * y + 1, 2 * xx) + x.at(c, 2 * y + 1, 2 * xx + 1))
            * quarter
    })
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let quarter = T::lit(0.25);
    Tensor::from_fn(dy.channels, in_h, in_w, |c, y, x| {
        if y / 2 < dy.height && x / 2 < dy.width {
            dy.at(c, y / 2, x / 2) * quarter
        } else {
            T::zero()
        }
    })
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.channels, x.height * 2, x.width * 2, |c, y, xx| x.at(c, y / 2, xx / 2))
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(dy.channels, dy.height / 2, dy.width / 2, |c, y, x| {
        dy.at(c, 2 * y, 2 * x) + dy.at(c, 2 * y, 2 * x + 1) + dy.at(c, 2 * y + 1, 2 * x) + dy.at(c, 2 * y + 1, 2 * x + 1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_then_upsample_preserves_block_means() {
        let x = Tensor::<f64>::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let p = avg_pool2(&x);
        assert_eq!(p.data, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p);
        assert_eq!(u.at(0, 3, 3), 12.5);
    }

    #[test]
    fn backward_passes_are_adjoints() {
        // <pool(x), y> == <x, pool_backward(y)> and likewise for upsampling.
        let x = Tensor::<f64>::from_fn(2, 4, 6, |c, y, x| (c + y * 3 + x * 5) as f64 % 7.0);
        let y = Tensor::<f64>::from_fn(2, 2, 3, |c, y, x| (c * 2 + y + x * 4) as f64 % 5.0 - 1.0);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&avg_pool2(&x), &y) - dot(&x, &avg_pool2_backward(&y, 4, 6))).abs() < 1e-12);
        assert!((dot(&upsample2(&y), &x) - dot(&y, &upsample2_backward(&x))).abs() < 1e-12);
    }
}
