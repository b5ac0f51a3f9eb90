//! Counter-based deterministic random number generation.
//!
//! Every consumer of randomness in this crate draws from an [`RngStream`]
//! keyed by a root seed and a stream id. Streams are cheap to construct and
//! stateless apart from a draw counter, so independent slices of work (matrix
//! columns, dataset rows, training batches) can each own a stream derived
//! from their index and produce identical output no matter how the
//! surrounding computation is ordered or partitioned.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective mix with full avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into a single stream key. Used when a stream is indexed by
/// more than one coordinate (e.g. epoch and batch).
pub fn derive_key(root_seed: u64, parts: &[u64]) -> u64 {
    let mut key = mix64(root_seed ^ GOLDEN);
    for &p in parts {
        key = mix64(key.wrapping_add(GOLDEN) ^ mix64(p ^ GOLDEN));
    }
    key
}

/// A deterministic stream of pseudo-random values.
///
/// Output value `i` is a pure function of `(root_seed, stream_id, i)`, so a
/// stream can be recreated and replayed at any time.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self::from_key(derive_key(root_seed, &[stream_id]))
    }

    /// Builds a stream directly from a derived key (see [`derive_key`]).
    pub fn from_key(key: u64) -> Self {
        RngStream { key, counter: 0, spare_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform draw from `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw from `(0, 1]`; safe as a logarithm argument.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer from `[0, n)`. `n` must be nonzero.
    #[inline]
    pub fn next_range(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw via the Box-Muller transform. The transform
    /// yields values in pairs; the second is cached for the next call.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle of `slice` driven by this stream.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_range(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }
}
