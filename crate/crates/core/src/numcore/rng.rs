use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// 64-bit FNV-1a; stable across platforms and toolchains, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seeded, portable random stream.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output is value-stable across
/// platforms. Normal draws use the ziggurat sampler of `rand_distr`'s
/// `StandardNormal`. Independent sub-streams share the seed but use a
/// different ChaCha stream id, derived from a label.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Sub-stream named by `label`, e.g. `"latent"` or `"block3.attn_s.w_q"`.
    pub fn substream(seed: u64, label: &str) -> Self {
        Self::with_stream(seed, fnv1a64(label.as_bytes()))
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }
}

/// Tensor of i.i.d. standard-normal draws, advancing `rng`.
pub fn gaussian(rng: &mut SeededRng, dims: impl Into<Vec<usize>>) -> Tensor {
    let dims = dims.into();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(dims, data).expect("normal draws are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = gaussian(&mut SeededRng::new(42), [4]);
        let b = gaussian(&mut SeededRng::new(42), [4]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn substreams_differ() {
        let a = gaussian(&mut SeededRng::substream(7, "a"), [8]);
        let b = gaussian(&mut SeededRng::substream(7, "b"), [8]);
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn empty_dims() {
        let t = gaussian(&mut SeededRng::new(1), [0]);
        assert!(t.is_empty());
        assert_eq!(t.dims(), &[0]);
    }

    #[test]
    fn fnv_known_vector() {
        // Reference value of FNV-1a 64 for "a".
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
