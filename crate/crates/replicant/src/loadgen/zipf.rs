use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Zipfian rank sampler over `record_count` ranks with exponent `theta`:
/// P(rank r) ∝ 1/(r+1)^theta for 0-based r. Sampling inverts the exact
/// cumulative table, so empirical frequencies match the analytic pmf to
/// sampling noise (no closed-form approximation bias).
pub struct Zipfian {
    cdf: Vec<f64>,
    record_count: u64,
    rng: ChaCha8Rng,
}

impl Zipfian {
    pub fn new(record_count: u64, theta: f64, seed: u64) -> Zipfian {
        assert!(record_count > 0, "need at least one record");
        let mut cdf = Vec::with_capacity(record_count as usize);
        let mut acc = 0.0;
        for r in 1..=record_count {
            acc += 1.0 / (r as f64).powf(theta);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        Zipfian { cdf, record_count, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// 0 is the hottest rank.
    pub fn next_rank(&mut self) -> u64 {
        let u: f64 = self.rng.gen();
        self.cdf.partition_point(|&c| c < u) as u64
    }

    /// Rank scattered over the id space so popular records are not physically
    /// adjacent; same YCSB-style hash scatter, collisions and all.
    pub fn next_key_id(&mut self) -> u64 {
        scramble(self.next_rank()) % self.record_count
    }
}

/// FNV-1a over the rank's little-endian bytes.
fn scramble(rank: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in rank.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
