//! The try-on composition network: a U-Net over the person representation plus warped cloth,
//! emitting a rendered person and a composition mask that are blended with the warped cloth.

use crate::nn::{
    avg_pool2, avg_pool2_backward, upsample2, upsample2_backward, Activation, ActivationCache, AttentionCache, Conv2d,
    ConvCache, Init, ParamLayout, SelfAttention,
};
use crate::person::{PersonRepresentation, PoseKind, ReprLayout};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;
use crate::warp::WarpedCloth;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TryonError {
    #[error("invalid network config: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Channels appended to the person representation: warped cloth RGB and its mask.
pub const CLOTH_CHANNELS: usize = 4;
/// ω₀ of the first sine layer; later layers use 1.
pub const SINE_FIRST_OMEGA: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TryonConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels; the input is halved `depth - 1` times.
    pub depth: usize,
    pub attention: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl TryonConfig {
    pub fn for_pose(kind: PoseKind, base_width: usize, depth: usize, attention: bool, activation: Activation, seed: u64) -> Self {
        Self {
            in_channels: input_channels(kind),
            base_width,
            depth,
            attention,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TryonError> {
        if self.depth < 2 {
            return Err(TryonError::ConfigInvalid(format!("depth {} < 2", self.depth)));
        }
        if self.base_width < 8 {
            return Err(TryonError::ConfigInvalid(format!("base_width {} < 8", self.base_width)));
        }
        if self.in_channels == 0 {
            return Err(TryonError::ConfigInvalid("in_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, kind: PoseKind) -> Result<(), TryonError> {
        self.validate()?;
        if self.in_channels != input_channels(kind) {
            return Err(TryonError::ConfigInvalid(format!(
                "in_channels {} does not match {kind} pose input ({})",
                self.in_channels,
                input_channels(kind)
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level.min(3)).min(8 * self.base_width)
    }

    /// Input height and width must both be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

pub fn input_channels(kind: PoseKind) -> usize {
    ReprLayout::for_kind(kind).total_channels() + CLOTH_CHANNELS
}

/// Representation channels followed by warped cloth and warped mask.
pub fn network_input<T: Scalar>(repr: &PersonRepresentation<T>, warped: &WarpedCloth<T>) -> Tensor<T> {
    Tensor::concat(&[&repr.channels, &warped.image, &warped.mask])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TryonOutput<T> {
    pub rendered: Tensor<T>,
    pub mask: Tensor<T>,
    pub composed: Tensor<T>,
}

/// `warped · m + rendered · (1 − m)` per pixel.
pub fn compose<T: Scalar>(rendered: &Tensor<T>, mask: &Tensor<T>, warped: &WarpedCloth<T>) -> Result<Tensor<T>, TryonError> {
    if !rendered.same_shape(&warped.image) || mask.channels != 1 || !mask.same_plane(rendered) {
        return Err(TryonError::ShapeMismatch(format!(
            "rendered {}x{}x{}, mask {}x{}x{}, cloth {}x{}x{}",
            rendered.channels,
            rendered.height,
            rendered.width,
            mask.channels,
            mask.height,
            mask.width,
            warped.image.channels,
            warped.image.height,
            warped.image.width
        )));
    }
    let n = rendered.plane_len();
    let mut out = rendered.clone();
    for c in 0..rendered.channels {
        let w = warped.image.plane(c);
        for (i, v) in out.data[c * n..(c + 1) * n].iter_mut().enumerate() {
            let m = mask.data[i];
            *v = w[i] * m + *v * (T::one() - m);
        }
    }
    Ok(out)
}

/// Two 3×3 conv + activation stages.
#[derive(Clone, Debug, PartialEq)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

struct BlockCache<T> {
    ca: ConvCache<T>,
    aa: ActivationCache<T>,
    cb: ConvCache<T>,
    ab: ActivationCache<T>,
}

impl Block {
    fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize) -> Self {
        Self {
            a: Conv2d::new(layout, &format!("{name}.conv_a"), in_c, out_c, 3, 1),
            b: Conv2d::new(layout, &format!("{name}.conv_b"), out_c, out_c, 3, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TryonNet {
    pub config: TryonConfig,
    encoder: Vec<Block>,
    /// Indexed by level; the deepest level has no decoder block.
    decoder: Vec<Block>,
    bottleneck_attention: Option<SelfAttention>,
    decoder_attention: Option<SelfAttention>,
    head: Conv2d,
    /// Round activations and gradients to binary16 (emulated reduced precision).
    pub half_precision: bool,
}

pub struct TryonCache<T> {
    input_shape: (usize, usize),
    encoder: Vec<BlockCache<T>>,
    bottleneck_attention: Option<AttentionCache<T>>,
    decoder_attention: Option<AttentionCache<T>>,
    /// Channel count of the upsampled part of each decoder input.
    up_channels: Vec<usize>,
    decoder: Vec<Option<BlockCache<T>>>,
    head: ConvCache<T>,
    pub output: TryonOutput<T>,
    warped_image: Tensor<T>,
}

impl TryonNet {
    /// Lay out the network's parameters in `layout` (which may already hold other layers).
    pub fn new(config: TryonConfig, layout: &mut ParamLayout) -> Result<Self, TryonError> {
        config.validate()?;
        let d = config.depth;
        let mut encoder = Vec::with_capacity(d);
        for level in 0..d {
            let in_c = if level == 0 { config.in_channels } else { config.width(level - 1) };
            encoder.push(Block::new(layout, &format!("enc{level}"), in_c, config.width(level)));
        }
        let bottleneck_attention =
            config.attention.then(|| SelfAttention::new(layout, "attn_bottleneck", config.width(d - 1)));
        let decoder_attention = config
            .attention
            .then(|| SelfAttention::new(layout, "attn_decoder", config.width(d - 1) + config.width(d - 2)));
        let mut decoder = Vec::with_capacity(d - 1);
        for level in 0..d - 1 {
            let in_c = config.width(level + 1) + config.width(level);
            decoder.push(Block::new(layout, &format!("dec{level}"), in_c, config.width(level)));
        }
        let head = Conv2d::new(layout, "head", config.width(0), 4, 1, 1);
        Ok(Self {
            config,
            encoder,
            decoder,
            bottleneck_attention,
            decoder_attention,
            head,
            half_precision: false,
        })
    }

    pub fn param_count(&self) -> usize {
        let blocks: usize = self.encoder.iter().chain(&self.decoder).map(|b| b.a.param_count() + b.b.param_count()).sum();
        let attn: usize = [&self.bottleneck_attention, &self.decoder_attention]
            .iter()
            .filter_map(|a| a.as_ref())
            .map(|a| a.param_count())
            .sum();
        blocks + attn + self.head.param_count()
    }

    /// Parameters of the attention layers alone.
    pub fn attention_layers(&self) -> impl Iterator<Item = &SelfAttention> {
        self.bottleneck_attention.iter().chain(self.decoder_attention.iter())
    }

    /// Deterministic initialization from the config seed.
    pub fn init<T: Scalar>(&self, params: &mut [T]) {
        let seed = self.config.seed;
        let hidden = Init::Uniform { gain: 6f64.sqrt() };
        for (i, block) in self.encoder.iter().chain(&self.decoder).enumerate() {
            let first = if i == 0 && self.config.activation == Activation::Sine { Init::SirenFirst } else { hidden };
            block.a.init(params, seed, first);
            block.b.init(params, seed, hidden);
        }
        for attn in self.attention_layers() {
            attn.init(params, seed);
        }
        self.head.init(params, seed, Init::Uniform { gain: 3f64.sqrt() });
    }

    fn quantize<T: Scalar>(&self, t: Tensor<T>) -> Tensor<T> {
        if self.half_precision {
            t.map(T::round_half)
        } else {
            t
        }
    }

    fn omega<T: Scalar>(&self, first: bool) -> T {
        if first && self.config.activation == Activation::Sine {
            T::lit(SINE_FIRST_OMEGA)
        } else {
            T::one()
        }
    }

    fn block_forward<T: Scalar>(&self, block: &Block, params: &[T], x: &Tensor<T>, first: bool) -> (Tensor<T>, BlockCache<T>) {
        let act = self.config.activation;
        let (h, ca) = block.a.forward(params, x);
        let (h, aa) = act.forward(self.quantize(h), self.omega(first));
        let (h, cb) = block.b.forward(params, &h);
        let (h, ab) = act.forward(self.quantize(h), T::one());
        (self.quantize(h), BlockCache { ca, aa, cb, ab })
    }

    fn block_backward<T: Scalar>(
        &self,
        block: &Block,
        params: &[T],
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let act = self.config.activation;
        let d = self.quantize(act.backward(&cache.ab, dy));
        let d = block.b.backward(params, &cache.cb, &d, Some(&mut *grads), true).unwrap();
        let d = self.quantize(act.backward(&cache.aa, &d));
        block.a.backward(params, &cache.ca, &d, Some(grads), need_input_grad).map(|t| self.quantize(t))
    }

    pub fn check_input<T: Scalar>(&self, input: &Tensor<T>, warped: &WarpedCloth<T>) -> Result<(), TryonError> {
        let m = self.config.size_multiple();
        if input.channels != self.config.in_channels {
            return Err(TryonError::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, input.channels
            )));
        }
        if !input.height.is_multiple_of(m) || !input.width.is_multiple_of(m) || input.height == 0 || input.width == 0 {
            return Err(TryonError::ShapeMismatch(format!(
                "input {}x{} not divisible by {m} for depth {}",
                input.height, input.width, self.config.depth
            )));
        }
        if warped.image.channels != 3 || !warped.image.same_plane(input) || !warped.mask.same_plane(input) {
            return Err(TryonError::ShapeMismatch("warped cloth does not match the input frame".into()));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        input: &Tensor<T>,
        warped: &WarpedCloth<T>,
    ) -> Result<TryonCache<T>, TryonError> {
        self.check_input(input, warped)?;
        let d = self.config.depth;
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(d);
        let mut encoder = Vec::with_capacity(d);
        let mut x = self.quantize(input.clone());
        for (level, block) in self.encoder.iter().enumerate() {
            if level > 0 {
                x = avg_pool2(&x);
            }
            let (y, cache) = self.block_forward(block, params, &x, level == 0);
            encoder.push(cache);
            skips.push(y.clone());
            x = y;
        }
        let bottleneck_attention = self.bottleneck_attention.as_ref().map(|attn| {
            let (y, cache) = attn.forward(params, &x);
            x = self.quantize(y);
            cache
        });
        let mut decoder_attention = None;
        let mut decoder: Vec<Option<BlockCache<T>>> = (0..d - 1).map(|_| None).collect();
        let mut up_channels = vec![0; d - 1];
        for level in (0..d - 1).rev() {
            let up = upsample2(&x);
            up_channels[level] = up.channels;
            let mut cat = Tensor::concat(&[&up, &skips[level]]);
            if level == d - 2 {
                if let Some(attn) = &self.decoder_attention {
                    let (y, cache) = attn.forward(params, &cat);
                    cat = self.quantize(y);
                    decoder_attention = Some(cache);
                }
            }
            let (y, cache) = self.block_forward(&self.decoder[level], params, &cat, false);
            decoder[level] = Some(cache);
            x = y;
        }
        let (logits, head) = self.head.forward(params, &x);
        let n = logits.plane_len();
        let (h, w) = (logits.height, logits.width);
        let half = T::lit(0.5);
        let rendered = Tensor::from_vec(3, h, w, logits.data[..3 * n].iter().map(|&v| (v.tanh() + T::one()) * half).collect());
        let mask = Tensor::from_vec(1, h, w, logits.data[3 * n..].iter().map(|&v| sigmoid(v)).collect());
        let composed = compose(&rendered, &mask, warped)?;
        Ok(TryonCache {
            input_shape: (input.height, input.width),
            encoder,
            bottleneck_attention,
            decoder_attention,
            up_channels,
            decoder,
            head,
            output: TryonOutput { rendered, mask, composed },
            warped_image: warped.image.clone(),
        })
    }

    /// Accumulate parameter gradients given the loss gradients with respect to the composed
    /// image and (directly) the mask.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &TryonCache<T>,
        d_composed: &Tensor<T>,
        d_mask: &Tensor<T>,
        grads: &mut [T],
    ) {
        let out = &cache.output;
        let n = out.mask.plane_len();
        let (h, w) = (out.mask.height, out.mask.width);
        let mut d_logits = Tensor::zeros(4, h, w);
        let half = T::lit(0.5);
        for i in 0..n {
            let m = out.mask.data[i];
            let mut dm = d_mask.data[i];
            for c in 0..3 {
                let g = d_composed.data[c * n + i];
                let p = out.rendered.data[c * n + i];
                dm += g * (cache.warped_image.data[c * n + i] - p);
                // rendered = (tanh + 1) / 2, so d/dlogit = 2·p·(1 − p)
                let dp = g * (T::one() - m);
                d_logits.data[c * n + i] = dp * half * (T::one() - (T::lit(2.0) * p - T::one()).powi(2));
            }
            d_logits.data[3 * n + i] = dm * m * (T::one() - m);
        }
        let d_logits = self.quantize(d_logits);
        let mut dx = self.head.backward(params, &cache.head, &d_logits, Some(&mut *grads), true).unwrap();
        let d = self.config.depth;
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..d).map(|_| None).collect();
        for level in 0..d - 1 {
            let block_cache = cache.decoder[level].as_ref().expect("decoder cache");
            let mut d_cat = self.block_backward(&self.decoder[level], params, block_cache, &dx, grads, true).unwrap();
            if level == d - 2 {
                if let (Some(attn), Some(ac)) = (&self.decoder_attention, &cache.decoder_attention) {
                    d_cat = self.quantize(attn.backward(params, ac, &d_cat, grads));
                }
            }
            let upc = cache.up_channels[level];
            d_skips[level] = Some(d_cat.slice_channels(upc, d_cat.channels - upc));
            dx = upsample2_backward(&d_cat.slice_channels(0, upc));
        }
        if let (Some(attn), Some(ac)) = (&self.bottleneck_attention, &cache.bottleneck_attention) {
            dx = self.quantize(attn.backward(params, ac, &dx, grads));
        }
        for level in (0..d).rev() {
            if let Some(ds) = d_skips[level].take() {
                if level < d - 1 {
                    dx.add_assign(&ds);
                }
            }
            let need = level > 0;
            let di = self.block_backward(&self.encoder[level], params, &cache.encoder[level], &dx, grads, need);
            if level > 0 {
                let (ih, iw) = (cache.input_shape.0 >> (level - 1), cache.input_shape.1 >> (level - 1));
                dx = avg_pool2_backward(&di.unwrap(), ih, iw);
            }
        }
    }
}

/// Build the network alone with freshly initialized parameters.
pub fn build_network<T: Scalar>(config: TryonConfig) -> Result<(TryonNet, ParamLayout, Vec<T>), TryonError> {
    let mut layout = ParamLayout::default();
    let net = TryonNet::new(config, &mut layout)?;
    let mut params = vec![T::zero(); layout.total()];
    net.init(&mut params);
    Ok((net, layout, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(depth: usize, width: usize, attention: bool) -> TryonConfig {
        TryonConfig::for_pose(PoseKind::Dense, width, depth, attention, Activation::Relu, 11)
    }

    fn random_inputs(c: usize, h: usize, w: usize, seed: u64) -> (Tensor<f64>, WarpedCloth<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0));
        let mask = Tensor::from_fn(1, h, w, |_, y, x| ((x + y) % 3 == 0) as u8 as f64);
        let image = Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0)).mul_mask(&mask);
        (input, WarpedCloth { image, mask })
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(build_network::<f32>(config(1, 8, false)), Err(TryonError::ConfigInvalid(_))));
        assert!(matches!(build_network::<f32>(config(3, 4, false)), Err(TryonError::ConfigInvalid(_))));
        assert!(config(3, 8, false).validate_for(PoseKind::Coco).is_err());
    }

    #[test]
    fn width_is_capped() {
        let c = config(6, 16, false);
        let widths: Vec<_> = (0..6).map(|l| c.width(l)).collect();
        assert_eq!(widths, [16, 32, 64, 128, 128, 128]);
    }

    #[test]
    fn attention_adds_only_attention_params() {
        let (plain, ..) = build_network::<f32>(config(3, 8, false)).unwrap();
        let (attn, ..) = build_network::<f32>(config(3, 8, true)).unwrap();
        let extra: usize = attn.attention_layers().map(|a| a.param_count()).sum();
        assert_eq!(attn.param_count(), plain.param_count() + extra);
    }

    #[test]
    fn output_shapes_and_ranges() {
        let (net, _, params) = build_network::<f64>(config(3, 8, true)).unwrap();
        let (input, warped) = random_inputs(14, 16, 12, 1);
        let out = net.forward(&params, &input, &warped).unwrap().output;
        assert_eq!((out.rendered.channels, out.rendered.height, out.rendered.width), (3, 16, 12));
        assert_eq!((out.mask.channels, out.mask.height, out.mask.width), (1, 16, 12));
        assert!(out.mask.data.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert!(out.composed.data.iter().all(|&m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn indivisible_input_rejected() {
        let (net, _, params) = build_network::<f64>(config(3, 8, false)).unwrap();
        let (input, warped) = random_inputs(14, 14, 12, 1);
        assert!(matches!(net.forward(&params, &input, &warped), Err(TryonError::ShapeMismatch(_))));
    }

    #[test]
    fn compose_scalar_case() {
        let warped = WarpedCloth { image: Tensor::filled(3, 1, 1, 0.8), mask: Tensor::filled(1, 1, 1, 1.0) };
        let out = compose(&Tensor::filled(3, 1, 1, 0.2), &Tensor::filled(1, 1, 1, 0.25), &warped).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.35f64).abs() < 1e-12));
    }

    /// Finite differences of a random linear functional of (composed, mask).
    #[test]
    fn gradients_match_finite_differences() {
        for activation in Activation::ALL {
            let mut cfg = config(2, 8, true);
            cfg.activation = activation;
            let (net, _, mut params) = build_network::<f64>(cfg).unwrap();
            for attn in net.attention_layers() {
                params[attn.gamma_index()] = 0.3;
            }
            let (input, warped) = random_inputs(14, 8, 6, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let gc = Tensor::from_fn(3, 8, 6, |_, _, _| rng.gen_range(-1.0..1.0));
            let gm = Tensor::from_fn(1, 8, 6, |_, _, _| rng.gen_range(-1.0..1.0));
            let objective = |p: &[f64]| {
                let o = net.forward(p, &input, &warped).unwrap().output;
                o.composed.data.iter().zip(&gc.data).map(|(a, b)| a * b).sum::<f64>()
                    + o.mask.data.iter().zip(&gm.data).map(|(a, b)| a * b).sum::<f64>()
            };
            let cache = net.forward(&params, &input, &warped).unwrap();
            let mut grads = vec![0.0; params.len()];
            net.backward(&params, &cache, &gc, &gm, &mut grads);
            for _ in 0..25 {
                let i = rng.gen_range(0..params.len());
                let h = 1e-6;
                let mut p = params.clone();
                p[i] += h;
                let up = objective(&p);
                p[i] -= 2.0 * h;
                let down = objective(&p);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - grads[i]).abs() <= 1e-5 + 1e-3 * fd.abs(),
                    "{activation}: param {i}: fd {fd} vs analytic {}",
                    grads[i]
                );
            }
        }
    }
}
