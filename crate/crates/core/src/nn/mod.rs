//! Minimal layer library with hand-written backward passes.
//!
//! Parameters of a model live in one flat buffer; each layer records the ranges it owns.
//! Forward passes return a cache that the matching backward pass consumes, so a single
//! model can run any number of independent forward/backward pairs.

mod activation;
mod adam;
mod attention;
mod conv;
mod layers;

pub use activation::{Activation, ActivationCache, UnknownActivation};
pub use adam::Adam;
pub use attention::{attend, AttentionCache, SelfAttention};
pub use conv::{Conv2d, ConvCache};
pub use layers::{avg_pool2, avg_pool2_backward, upsample2, upsample2_backward};

use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Named slices of a flat parameter buffer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<(String, Range<usize>)>,
    total: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let range = self.total..self.total + len;
        self.entries.push((name.into(), range.clone()));
        self.total += len;
        range
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[(String, Range<usize>)] {
        &self.entries
    }

    /// Total size of every entry whose name starts with `prefix`.
    pub fn count_prefixed(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, r)| r.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<Range<usize>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// U(-b, b) with b = gain · sqrt(1 / fan_in).
    Uniform { gain: f64 },
    /// First layer of a sine network: U(-1/fan_in, 1/fan_in).
    SirenFirst,
    Constant(f64),
}

/// Fill `out` from a stream that depends only on the model seed and the parameter name,
/// so the same layer is initialized identically whatever else the model contains.
pub fn init_params<T: Scalar>(out: &mut [T], seed: u64, name: &str, fan_in: usize, init: Init) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let fan_in = fan_in.max(1) as f64;
    let bound = match init {
        Init::Zeros => {
            out.fill(T::zero());
            return;
        }
        Init::Constant(c) => {
            out.fill(T::lit(c));
            return;
        }
        Init::Uniform { gain } => gain * (1.0 / fan_in).sqrt(),
        Init::SirenFirst => 1.0 / fan_in,
    };
    for v in out.iter_mut() {
        *v = T::lit(rng.gen_range(-bound..=bound));
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_position() {
        let mut a = vec![0.0f32; 16];
        let mut b = vec![0.0f32; 16];
        init_params(&mut a, 7, "enc0.a.weight", 9, Init::Uniform { gain: 6f64.sqrt() });
        init_params(&mut b, 7, "enc0.a.weight", 9, Init::Uniform { gain: 6f64.sqrt() });
        assert_eq!(a, b);
        init_params(&mut b, 7, "enc0.b.weight", 9, Init::Uniform { gain: 6f64.sqrt() });
        assert_ne!(a, b);
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(a.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn layout_allocates_contiguously() {
        let mut l = ParamLayout::default();
        assert_eq!(l.alloc("a", 3), 0..3);
        assert_eq!(l.alloc("attn.b", 2), 3..5);
        assert_eq!(l.total(), 5);
        assert_eq!(l.count_prefixed("attn."), 2);
        assert_eq!(l.find("a"), Some(0..3));
    }
}
