/// Log-scaled latency histogram: bucket k covers [1.01^k, 1.01^(k+1)) ns and
/// reconstructs to the geometric midpoint, so any recorded value comes back
/// within 0.5% relative error — inside the 1% budget up to well past 100 s.
pub struct LatencyHistogram {
    counts: Vec<u64>,
    total: u64,
}

const RATIO_LN: f64 = 0.009950330853155723; // ln(1.01)

fn bucket_of(v_ns: u64) -> usize {
    if v_ns <= 1 {
        0
    } else {
        ((v_ns as f64).ln() / RATIO_LN) as usize
    }
}

fn midpoint_of(bucket: usize) -> u64 {
    ((bucket as f64 + 0.5) * RATIO_LN).exp().round() as u64
}

impl LatencyHistogram {
    pub fn new() -> LatencyHistogram {
        LatencyHistogram { counts: Vec::new(), total: 0 }
    }

    pub fn record(&mut self, v_ns: u64) {
        let b = bucket_of(v_ns);
        if b >= self.counts.len() {
            self.counts.resize(b + 1, 0);
        }
        self.counts[b] += 1;
        self.total += 1;
    }

    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Nearest-rank percentile: the value at rank ceil(p × total), 1-based.
    /// p must lie in (0, 1]; an empty histogram has no percentiles.
    pub fn percentile(&self, p: f64) -> Option<u64> {
        if self.total == 0 {
            return None;
        }
        assert!(p > 0.0 && p <= 1.0, "percentile {p} out of (0, 1]");
        let rank = ((p * self.total as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Some(midpoint_of(b));
            }
        }
        unreachable!("rank {rank} beyond recorded total {}", self.total)
    }

    /// (latency_ns, cumulative_fraction) per populated bucket, ascending;
    /// the final fraction is exactly 1.
    pub fn cdf(&self) -> Vec<(u64, f64)> {
        let mut rows = Vec::new();
        let mut seen = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            seen += c;
            rows.push((midpoint_of(b), seen as f64 / self.total as f64));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_stays_within_one_percent() {
        // Sweep magnitudes from 1 ns to 200 s.
        let mut v: u64 = 1;
        while v < 200_000_000_000 {
            let mut h = LatencyHistogram::new();
            h.record(v);
            let got = h.percentile(0.5).unwrap();
            let rel = (got as f64 - v as f64).abs() / v as f64;
            assert!(rel <= 0.01, "{v} ns reconstructed as {got} ns ({rel} off)");
            v = (v * 117) / 100 + 1;
        }
    }

    #[test]
    fn nearest_rank_on_one_to_one_hundred() {
        let mut h = LatencyHistogram::new();
        for ms in 1..=100u64 {
            h.record(ms * 1_000_000);
        }
        let p95 = h.percentile(0.95).unwrap();
        let rel = (p95 as f64 - 95_000_000.0).abs() / 95_000_000.0;
        assert!(rel <= 0.01, "p95 {p95} should be 95 ms within bucket error");
        // Nearest rank, not interpolation: p=0.001 is the smallest sample.
        let p_min = h.percentile(0.001).unwrap();
        assert!((p_min as f64 - 1_000_000.0).abs() / 1_000_000.0 <= 0.01);
    }

    #[test]
    fn identical_samples_give_that_value_at_every_p() {
        let mut h = LatencyHistogram::new();
        for _ in 0..1000 {
            h.record(42_000_000);
        }
        for p in [0.01, 0.5, 0.9, 0.99, 1.0] {
            let got = h.percentile(p).unwrap();
            assert!((got as f64 - 42_000_000.0).abs() / 42_000_000.0 <= 0.01);
        }
    }

    #[test]
    fn empty_histogram_has_no_percentiles() {
        assert_eq!(LatencyHistogram::new().percentile(0.5), None);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let mut h = LatencyHistogram::new();
        for v in [5u64, 5, 7, 1000, 250_000] {
            h.record(v);
        }
        let rows = h.cdf();
        assert_eq!(rows.len(), 4); // the two 5s share a bucket
        for w in rows.windows(2) {
            assert!(w[0].0 < w[1].0);
            assert!(w[0].1 < w[1].1);
        }
        assert_eq!(rows.last().unwrap().1, 1.0);
    }

    #[test]
    fn three_samples_make_a_three_row_cdf() {
        let mut h = LatencyHistogram::new();
        for v in [1_000_000u64, 2_000_000, 3_000_000] {
            h.record(v);
        }
        let rows = h.cdf();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.last().unwrap().1, 1.0);
    }
}
