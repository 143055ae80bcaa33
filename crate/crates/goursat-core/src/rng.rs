//! Deterministic 64-bit RNG (splitmix64).
//!
//! Sampling-based operations must reproduce bit-for-bit from a seed echoed in
//! reports, across platforms and crate versions, so we carry our own tiny
//! generator instead of depending on an external one.

/// Splittable deterministic generator. The sequence for a given seed is fixed
/// forever; `split` derives an independent stream.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream for a sub-task, leaving `self` untouched.
    pub fn split(&self, stream: u64) -> Self {
        SplitMix64 {
            state: self
                .state
                .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1))),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
