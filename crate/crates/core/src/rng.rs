//! Counter-based pseudo random numbers.
//!
//! Every draw is `mix(seed, counter)` where `mix` is the SplitMix64 finalizer,
//! so the stream depends only on integer arithmetic and is identical on every
//! platform. Draw `i` can be computed directly with [`Rng::draw_at`].

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The `index`-th draw of the stream for `seed`, independent of any state.
    pub fn draw_at(seed: u64, index: u64) -> u64 {
        mix(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Derives an independent stream keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(stream.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Rng::draw_at(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Computed by an independent SplitMix64 implementation. Any change to the
    // mixing function or counter layout breaks stored artifacts.
    const GOLDEN_SEED_42: [u64; 8] = [
        0xbdd7_3226_2feb_6e95,
        0x28ef_e333_b266_f103,
        0x4752_6757_130f_9f52,
        0x581c_e1ff_0e4a_e394,
        0x09bc_585a_2448_23f2,
        0xde44_31fa_3c80_db06,
        0x37e9_671c_4537_6d5d,
        0xccf6_35ee_9e9e_2fa4,
    ];

    #[test]
    fn golden_first_draws() {
        let mut rng = Rng::new(42);
        let draws: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        assert_eq!(draws, GOLDEN_SEED_42);
    }

    #[test]
    fn draw_at_matches_stream() {
        let mut rng = Rng::new(7);
        for i in 0..100 {
            assert_eq!(rng.next_u64(), Rng::draw_at(7, i));
        }
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = Rng::new(1);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = rng.below(7) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sample_indices_distinct() {
        let mut rng = Rng::new(3);
        let mut s = rng.sample_indices(50, 20);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 20);
    }

    #[test]
    fn forks_differ() {
        let rng = Rng::new(5);
        assert_ne!(rng.fork(0).next_u64(), rng.fork(1).next_u64());
    }
}
