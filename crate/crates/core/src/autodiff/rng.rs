//! Seeded pseudo-random generator with a fully documented algorithm.
//!
//! Every stochastic decision in the crate (weight init, episode sampling,
//! negative sampling, synthetic data) flows through [`Rng`] so that runs are
//! bit-reproducible and the streams can be re-created in another language.
//!
//! Algorithm: xoshiro256** (Blackman & Vigna). State is four 64-bit words
//! seeded by repeated application of the SplitMix64 output function to the
//! user seed. Each call to [`Rng::next_u64`] performs:
//!
//! ```text
//! result = rotl(s1 * 5, 7) * 9
//! t = s1 << 17
//! s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3;  s2 ^= t
//! s3 = rotl(s3, 45)
//! ```
//!
//! Derived quantities are defined exactly as:
//! - `uniform f64 in [0,1)` = `(next_u64() >> 11) as f64 * 2.pow(-53)`
//! - `below(n)` = bitmask rejection: draw `next_u64() & mask` with
//!   `mask = next_power_of_two(n) - 1` until the draw is `< n`
//! - `shuffle` = Fisher-Yates from the last index down, `j = below(i + 1)`
//! - `sample k without replacement` = partial Fisher-Yates from the front
//! - `normal` = Box-Muller on two uniforms, cosine branch only

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function applied to `x + gamma`. Used for seed
/// expansion and sub-stream derivation.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mut state = [0u64; 4];
        for word in state.iter_mut() {
            s = mix64(s);
            *word = s;
        }
        // xoshiro's one forbidden state
        if state == [0, 0, 0, 0] {
            state[0] = 1;
        }
        Rng { state }
    }

    /// Deterministic sub-stream: `seed' = mix64(mix64(mix64(master) ^ tag) ^ index)`.
    ///
    /// `tag` names the purpose (a fixed constant per call site) and `index`
    /// separates instances of that purpose (episode number, epoch, ...).
    pub fn derive(master: u64, tag: u64, index: u64) -> Self {
        Rng::new(mix64(mix64(mix64(master) ^ tag) ^ index))
    }

    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = self.state;
        let result = s1.wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s1 << 17;
        let s2n = s2 ^ s0;
        let s3n = s3 ^ s1;
        let s1n = s1 ^ s2n;
        let s0n = s0 ^ s3n;
        self.state = [s0n, s1n, s2n ^ t, s3n.rotate_left(45)];
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in [0, n) via bitmask rejection. Panics on n == 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        if n == 1 {
            return 0;
        }
        let mask = n.next_power_of_two() - 1;
        loop {
            let x = self.next_u64() & mask;
            if x < n {
                return x;
            }
        }
    }

    pub fn below_usize(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch; one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // in (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// Draw `count` distinct indices from `0..len` by partial Fisher-Yates:
    /// for j in 0..count, swap position j with position j + below(len - j),
    /// then keep the first `count` entries in draw order.
    pub fn sample_without_replacement(&mut self, len: usize, count: usize) -> Vec<usize> {
        assert!(count <= len, "sample {count} from {len}");
        let mut pool: Vec<usize> = (0..len).collect();
        for j in 0..count {
            let r = j + self.below_usize(len - j);
            pool.swap(j, r);
        }
        pool.truncate(count);
        pool
    }
}
