use super::{init_params, Init, ParamLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::{Array2, ArrayView2, Axis};
use std::ops::Range;

/// Self-attention over the spatial positions of a feature map:
/// `y = x + γ · W_o · (V · softmax(Qᵀ K)ᵀ)`, with Q, K, V from 1×1 projections.
///
/// Query/key width is `C / 8`; γ starts at zero so a freshly built layer is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub name: String,
    pub channels: usize,
    pub key_dim: usize,
    wq: Range<usize>,
    bq: Range<usize>,
    wk: Range<usize>,
    bk: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    gamma: Range<usize>,
}

pub struct AttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Array2<T>,
    pooled: Array2<T>,
    projected: Array2<T>,
}

/// Row-softmax attention of `n` query tokens over `n` key tokens.
///
/// `q` and `k` are d×N, `v` is C×N. Returns the C×N attended values and the N×N weights
/// (row i holds the distribution of query token i).
pub fn attend<T: Scalar>(q: ArrayView2<T>, k: ArrayView2<T>, v: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
    let mut logits = q.t().dot(&k);
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    let out = v.dot(&logits.t());
    (out, logits)
}

impl SelfAttention {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let key_dim = (channels / 8).max(1);
        let mut alloc = |suffix: &str, len: usize| layout.alloc(format!("{name}.{suffix}"), len);
        Self {
            name: name.to_string(),
            channels,
            key_dim,
            wq: alloc("query.weight", key_dim * channels),
            bq: alloc("query.bias", key_dim),
            wk: alloc("key.weight", key_dim * channels),
            bk: alloc("key.bias", key_dim),
            wv: alloc("value.weight", channels * channels),
            bv: alloc("value.bias", channels),
            wo: alloc("out.weight", channels * channels),
            bo: alloc("out.bias", channels),
            gamma: alloc("gamma", 1),
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.gamma]
            .iter()
            .map(|r| r.len())
            .sum()
    }

    pub fn gamma_index(&self) -> usize {
        self.gamma.start
    }

    pub fn init<T: Scalar>(&self, params: &mut [T], seed: u64) {
        let c = self.channels;
        let xavier = Init::Uniform { gain: 3f64.sqrt() };
        for (range, suffix) in [(&self.wq, "query"), (&self.wk, "key"), (&self.wv, "value"), (&self.wo, "out")] {
            init_params(&mut params[range.clone()], seed, &format!("{}.{suffix}.weight", self.name), c, xavier);
        }
        for range in [&self.bq, &self.bk, &self.bv, &self.bo, &self.gamma] {
            params[range.clone()].fill(T::zero());
        }
    }

    fn mat<'a, T: Scalar>(params: &'a [T], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((rows, cols), &params[r.clone()]).unwrap()
    }

    fn project<T: Scalar>(w: ArrayView2<T>, b: &[T], x: &Array2<T>) -> Array2<T> {
        let mut y = w.dot(x);
        for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(b) {
            row.mapv_inplace(|v| v + bias);
        }
        y
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
        assert_eq!(x.channels, self.channels, "{}: channel mismatch", self.name);
        let (c, d) = (self.channels, self.key_dim);
        let xm = x.matrix().to_owned();
        let q = Self::project(Self::mat(params, &self.wq, d, c), &params[self.bq.clone()], &xm);
        let k = Self::project(Self::mat(params, &self.wk, d, c), &params[self.bk.clone()], &xm);
        let v = Self::project(Self::mat(params, &self.wv, c, c), &params[self.bv.clone()], &xm);
        let (pooled, attn) = attend(q.view(), k.view(), v.view());
        let projected = Self::project(Self::mat(params, &self.wo, c, c), &params[self.bo.clone()], &pooled);
        let gamma = params[self.gamma.start];
        let y = &xm + &projected.mapv(|p| p * gamma);
        let out = Tensor::from_vec(c, x.height, x.width, y.into_raw_vec_and_offset().0);
        (out, AttentionCache { x: xm, q, k, v, attn, pooled, projected })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
    ) -> Tensor<T> {
        let (c, d) = (self.channels, self.key_dim);
        let dy_m = dy.matrix();
        let gamma = params[self.gamma.start];
        grads[self.gamma.start] += dy_m.iter().zip(cache.projected.iter()).map(|(&a, &b)| a * b).sum::<T>();

        let d_proj = dy_m.mapv(|g| g * gamma);
        let wo = Self::mat(params, &self.wo, c, c);
        let (gw, gb) = split_grads(grads, &self.wo, &self.bo);
        accumulate_linear(gw, gb, &d_proj, &cache.pooled);
        let d_pooled = wo.t().dot(&d_proj);

        // pooled = V · Aᵀ
        let dv = d_pooled.dot(&cache.attn);
        let da = d_pooled.t().dot(&cache.v);
        let mut ds = da;
        for (mut ds_row, a_row) in ds.axis_iter_mut(Axis(0)).zip(cache.attn.axis_iter(Axis(0))) {
            let inner: T = ds_row.iter().zip(a_row.iter()).map(|(&g, &a)| g * a).sum();
            for (g, &a) in ds_row.iter_mut().zip(a_row.iter()) {
                *g = a * (*g - inner);
            }
        }
        // logits = Qᵀ K
        let dq = cache.k.dot(&ds.t());
        let dk = cache.q.dot(&ds);

        let mut dx = dy_m.to_owned();
        for (dproj, w, b, width) in [(&dq, &self.wq, &self.bq, d), (&dk, &self.wk, &self.bk, d), (&dv, &self.wv, &self.bv, c)] {
            let (gw, gb) = split_grads(grads, w, b);
            accumulate_linear(gw, gb, dproj, &cache.x);
            dx += &Self::mat(params, w, width, c).t().dot(dproj);
        }
        Tensor::from_vec(c, dy.height, dy.width, dx.into_raw_vec_and_offset().0)
    }

    /// Attention weights of a forward pass (rows sum to one).
    pub fn weights<T>(cache: &AttentionCache<T>) -> ArrayView2<'_, T> {
        cache.attn.view()
    }

    /// The attended values before the output projection.
    pub fn pooled<T>(cache: &AttentionCache<T>) -> ArrayView2<'_, T> {
        cache.pooled.view()
    }

    pub fn values<T>(cache: &AttentionCache<T>) -> ArrayView2<'_, T> {
        cache.v.view()
    }
}

fn split_grads<'a, T>(grads: &'a mut [T], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grads[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}

fn accumulate_linear<T: Scalar>(gw: &mut [T], gb: &mut [T], dy: &Array2<T>, x: &Array2<T>) {
    let dw = dy.dot(&x.t());
    for (g, &v) in gw.iter_mut().zip(dw.iter()) {
        *g += v;
    }
    for (g, row) in gb.iter_mut().zip(dy.axis_iter(Axis(0))) {
        *g += row.sum();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_token_returns_its_value() {
        let q = array![[0.3], [-1.2]];
        let k = array![[2.0], [0.5]];
        let v = array![[0.7], [-0.4], [1.5]];
        let (out, w) = attend(q.view(), k.view(), v.view());
        assert_eq!(w[[0, 0]], 1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn logit_gap_of_ln3_gives_quarter_three_quarters() {
        // One query; key logits 0 and ln 3.
        let q = array![[1.0_f64, 1.0]];
        let k = array![[0.0, 3f64.ln()]];
        let v = array![[1.0, 5.0], [-2.0, 2.0]];
        let (out, w) = attend(q.view(), k.view(), v.view());
        assert!((w[[0, 0]] - 0.25).abs() < 1e-12 && (w[[0, 1]] - 0.75).abs() < 1e-12);
        assert!((out[[0, 0]] - 4.0).abs() < 1e-12);
        assert!((out[[1, 0]] - 1.0).abs() < 1e-12);
    }

    fn layer_with_gamma(gamma: f64) -> (SelfAttention, Vec<f64>, Tensor<f64>) {
        let mut layout = ParamLayout::default();
        let layer = SelfAttention::new(&mut layout, "attn", 16);
        let mut params = vec![0.0; layout.total()];
        layer.init(&mut params, 3);
        params[layer.gamma_index()] = gamma;
        let x = Tensor::from_fn(16, 3, 2, |c, y, x| (((c * 7 + y * 3 + x) % 9) as f64 - 4.0) / 5.0);
        (layer, params, x)
    }

    #[test]
    fn zero_gamma_is_identity() {
        let (layer, params, x) = layer_with_gamma(0.0);
        let (y, cache) = layer.forward(&params, &x);
        assert_eq!(y, x);
        for row in SelfAttention::weights(&cache).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (layer, params, x) = layer_with_gamma(0.7);
        let (y, cache) = layer.forward(&params, &x);
        let r = Tensor::from_fn(y.channels, y.height, y.width, |c, yy, xx| ((c + yy * 2 + xx * 5) % 7) as f64 / 7.0 - 0.5);
        let mut grads = vec![0.0; params.len()];
        let dx = layer.backward(&params, &cache, &r, &mut grads);
        let loss = |p: &[f64], x: &Tensor<f64>| {
            let (y, _) = layer.forward(p, x);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in (0..params.len()).step_by(3) {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &x);
            p[i] -= 2.0 * h;
            let fd = (up - loss(&p, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&params, &xp);
            xp.data[i] -= 2.0 * h;
            let fd = (up - loss(&params, &xp)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
