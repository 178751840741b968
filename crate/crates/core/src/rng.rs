//! Deterministic pseudo-random generator.
//!
//! Every sampling routine in the crate draws from an explicit [`RngState`].
//! The generator is a SplitMix64 walk: the same seed and the same call
//! sequence reproduce the same bytes on every run. Independent streams for
//! parallel work are derived with [`RngState::derive`], which mixes the
//! parent seed with a tag instead of splitting the running state, so the
//! derived stream does not depend on how far the parent has advanced.

/// SplitMix64 finalizer; also used to mix seeds for derived streams.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator state. `position` counts emitted `u64` words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    state: u64,
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            state: seed,
            position: 0,
        }
    }

    /// Seed this generator was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of `u64` words emitted so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent stream keyed on `(self.seed, tag)`.
    ///
    /// Derivation ignores the current position, so workers handed
    /// `rng.derive(i)` see the same stream no matter when the parent
    /// created them.
    pub fn derive(&self, tag: u64) -> RngState {
        let mixed = mix64(self.seed ^ mix64(tag ^ 0xA076_1D64_78BD_642F));
        RngState::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        self.position += 1;
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`; safe to pass to `ln`.
    pub fn open01(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Unbiased uniform draw in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is meaningless");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let r = self.next_u64();
            if r < zone {
                return r % n;
            }
        }
    }

    /// Standard normal via the Marsaglia polar method.
    ///
    /// The second value of each pair is discarded to keep the call
    /// sequence position-independent of caller history.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.position(), 1000);
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = RngState::new(1);
        let mut b = RngState::new(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn derive_is_position_independent() {
        let mut parent = RngState::new(7);
        let early = parent.derive(3);
        for _ in 0..100 {
            parent.next_u64();
        }
        let late = parent.derive(3);
        assert_eq!(early, late);
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let parent = RngState::new(7);
        let mut a = parent.derive(0);
        let mut b = parent.derive(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_bounds() {
        let mut rng = RngState::new(9);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
            let y = rng.open01();
            assert!(y > 0.0 && y <= 1.0);
        }
    }

    #[test]
    fn below_is_in_range_and_hits_everything() {
        let mut rng = RngState::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngState::new(11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
