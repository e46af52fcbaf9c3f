//! The platform's reproducible pseudo-random generator.
//!
//! A plain 64-bit linear congruential generator. Every seeded decision in the
//! platform (train/val split, weight init, epoch shuffles, hyperparameter
//! draws) goes through this type so results are reproducible bit-for-bit
//! across implementations.

pub const MULTIPLIER: u64 = 6364136223846793005;
pub const INCREMENT: u64 = 1442695040888963407;

#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Lcg64 { state: seed }
    }

    /// Derive an independent stream, e.g. one per AutoML trial.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut mixer = Lcg64::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        mixer.next_u64();
        Lcg64::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MULTIPLIER).wrapping_add(INCREMENT);
        self.state
    }

    /// Uniform in [0, 1) built from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, bound). Uses the high bits, which are the
    /// well-mixed ones for an LCG.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() >> 32) * bound as u64 >> 32) as usize
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recurrence_matches_constants() {
        let mut rng = Lcg64::new(1);
        assert_eq!(rng.next_u64(), MULTIPLIER.wrapping_add(INCREMENT));
        let mut rng = Lcg64::new(0);
        assert_eq!(rng.next_u64(), INCREMENT);
    }

    #[test]
    fn unit_interval() {
        let mut rng = Lcg64::new(7);
        for _ in 0..10_000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Lcg64::new(3).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn below_bound() {
        // bound <= 2^32 so (hi32 * bound) >> 32 < bound
        let mut rng = Lcg64::new(11);
        for b in 1..100 {
            assert!(rng.below(b) < b);
        }
    }
}
