//! Counter-based deterministic random stream.
//!
//! Every pseudorandom quantity in the toolkit (watermark keys, model rows,
//! simulation replicates) is drawn from an [`RngStream`]. The stream output at
//! a given `(state, counter)` is a pure function of those two integers, so
//! results are bit-identical on every platform.

/// Odd 64-bit increment used by the stream and by all seed folding.
pub const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

const TWO_POW_53: f64 = (1u64 << 53) as f64;

/// SplitMix64 output finalizer.
#[inline]
pub fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps 64 random bits to `[0, 1)` keeping the top 53 bits.
#[inline]
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 / TWO_POW_53
}

/// Folds a sequence of words into a base seed: `s = finalize(s * GOLDEN + w + 1)`
/// for each word, then a final `finalize`.
pub fn fold_words<I>(base: u64, words: I) -> u64
where
    I: IntoIterator<Item = u64>,
{
    let mut s = base;
    for w in words {
        s = finalize(s.wrapping_mul(GOLDEN).wrapping_add(w).wrapping_add(1));
    }
    finalize(s)
}

/// Source of `[0, 1)` draws consumed by samplers.
///
/// Implemented by [`RngStream`]; tests substitute scripted sources to drive
/// samplers through chosen branches.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

/// A draw in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct UniformDraw(f64);

impl UniformDraw {
    /// Returns `None` unless `0 <= value < 1`.
    pub fn new(value: f64) -> Option<Self> {
        (0.0..1.0).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Counter-based stream: output `i` is `finalize(state + i * GOLDEN)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    state: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(state: u64) -> Self {
        Self { state, counter: 0 }
    }

    /// Stream positioned at an arbitrary counter. Output at counter `c` can be
    /// read without generating the `c` preceding values.
    pub fn at(state: u64, counter: u64) -> Self {
        Self { state, counter }
    }

    /// Independent stream keyed by `state` and a path of words.
    pub fn derive(state: u64, path: &[u64]) -> Self {
        Self::new(fold_words(state, path.iter().copied()))
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = finalize(self.state.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    #[inline]
    pub fn next_draw(&mut self) -> UniformDraw {
        UniformDraw(unit_from_bits(self.next_u64()))
    }

    /// Integer in `[0, n)` by widening multiply. `n` must be non-zero.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl UniformSource for RngStream {
    #[inline]
    fn next_uniform(&mut self) -> f64 {
        unit_from_bits(self.next_u64())
    }
}

impl<T: UniformSource + ?Sized> UniformSource for &mut T {
    fn next_uniform(&mut self) -> f64 {
        (**self).next_uniform()
    }
}

// Lets `rand_distr` samplers run on the deterministic stream.
impl rand_core::RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        RngStream::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = RngStream::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
