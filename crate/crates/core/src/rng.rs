//! Counter-based pseudorandom generator.
//!
//! Every stream is keyed by a tuple of identifiers (master seed, block id,
//! replicate id, row id, ...) so that any worker can regenerate its slice of
//! the randomness without coordination. Draws are a pure function of
//! (key, counter), which makes simulation output independent of thread
//! scheduling.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective 64-bit mix with full avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based RNG with a keyed stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    /// Derives a stream key from an ordered tuple of identifiers.
    ///
    /// Different tuples (including different lengths) map to different keys.
    pub fn from_parts(parts: &[u64]) -> Self {
        let mut key = 0x243F_6A88_85A3_08D3; // arbitrary non-zero start
        for (i, &p) in parts.iter().enumerate() {
            key = mix(key ^ mix(p.wrapping_add((i as u64 + 1).wrapping_mul(GAMMA))));
        }
        CounterRng {
            key,
            ctr: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) via widening multiplication.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * m);
                return u * m;
            }
        }
    }

    #[inline]
    pub fn next_normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.next_standard_normal()
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }

    /// Draws `k` distinct indices from 0..n without replacement
    /// (partial Fisher-Yates; order is part of the draw).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n} without replacement");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
