//! Splittable, seedable pseudo-random generator.
//!
//! Every stochastic operation in the crate takes an explicit [`Rng`] value or
//! seed; there is no ambient global state. Independent streams for parallel
//! work are derived with [`Rng::substream`], which mixes a label into the
//! seed so that sibling streams are decorrelated regardless of draw order.

/// SplitMix64 generator. Fast, passes BigCrush, and trivially splittable.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream labeled by `label`.
    ///
    /// Does not advance `self`; calling with the same label twice yields the
    /// same stream.
    pub fn substream(&self, label: u64) -> Rng {
        Rng {
            state: mix(self.state ^ mix(label.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))),
        }
    }

    /// Derive a stream from a seed and a list of labels (e.g. sweep
    /// coordinates), independent of any generator instance.
    pub fn stream(seed: u64, labels: &[u64]) -> Rng {
        let mut r = Rng::seed_from(seed);
        for &l in labels {
            r = r.substream(l);
        }
        r
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval (0, 1); entries are strictly positive.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Rejection sampling to kill modulo bias.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Log-uniform on [lo, hi], lo > 0.
    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo > 0.0 && hi >= lo);
        (lo.ln() + self.uniform() * (hi.ln() - lo.ln())).exp()
    }
}
