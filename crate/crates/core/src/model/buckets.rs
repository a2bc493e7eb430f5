use crate::config::ModelConfig;
use crate::error::{FuxiError, Result};

/// Maps a non-negative timestamp difference (seconds) to a bucket in
/// `[0, n_b)`.
///
/// Differences are first expressed in units of `time_bucket_base` seconds.
/// The lower half of the buckets is exact (`bucket = delta` for
/// `delta < n_b / 2`); the upper half is log-spaced between `n_b / 2` and
/// `max_time_span`, and everything beyond is clamped to `n_b - 1`.
pub fn relative_time_bucket(delta_t: i64, config: &ModelConfig) -> Result<usize> {
    if delta_t < 0 {
        return Err(FuxiError::invalid(format!("negative time difference {delta_t}")));
    }
    Ok(bucket_unchecked(delta_t as u64, config))
}

pub(crate) fn bucket_unchecked(delta_t: u64, config: &ModelConfig) -> usize {
    let n_b = config.time_buckets;
    let exact = (n_b / 2).max(1);
    let units = delta_t as f64 / config.time_bucket_base;
    if units < exact as f64 {
        return units.floor() as usize;
    }
    let span = config.max_time_span as f64 / config.time_bucket_base;
    if units >= span || span <= exact as f64 {
        return n_b - 1;
    }
    let log_buckets = (n_b - exact) as f64;
    let frac = (units / exact as f64).ln() / (span / exact as f64).ln();
    // nudge so exact edges (e.g. delta = 32 for n_b = 8, span = 256) are not lost to rounding
    let bucket = exact + (frac * log_buckets + 1e-9).floor() as usize;
    bucket.min(n_b - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_b: usize, span: u64) -> ModelConfig {
        ModelConfig {
            time_buckets: n_b,
            max_time_span: span,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_and_clamp() {
        let c = cfg(8, 256);
        assert_eq!(relative_time_bucket(0, &c).unwrap(), 0);
        assert_eq!(relative_time_bucket(256, &c).unwrap(), 7);
        assert_eq!(relative_time_bucket(1 << 40, &c).unwrap(), 7);
    }

    #[test]
    fn exact_region() {
        let c = cfg(8, 256);
        assert_eq!(relative_time_bucket(3, &c).unwrap(), 3);
    }

    /// Independent transcription: log-spaced edges e_k = 4·64^(k/4) for the
    /// upper four buckets of n_b = 8, span = 256.
    #[test]
    fn log_region_matches_edge_table() {
        let c = cfg(8, 256);
        let edges: Vec<f64> = (0..=4).map(|k| 4.0 * 64f64.powf(k as f64 / 4.0)).collect();
        for delta in 4..300i64 {
            let expect = if delta as f64 >= 256.0 {
                7
            } else {
                4 + edges.iter().skip(1).filter(|&&e| delta as f64 >= e).count()
            };
            assert_eq!(relative_time_bucket(delta, &c).unwrap(), expect.min(7), "delta {delta}");
        }
    }

    #[test]
    fn monotone_and_in_range() {
        let c = ModelConfig::default();
        let mut prev = 0;
        let mut delta = 0i64;
        while delta < (c.max_time_span as i64) * 2 {
            let b = relative_time_bucket(delta, &c).unwrap();
            assert!(b >= prev && b < c.time_buckets);
            prev = b;
            delta = delta * 11 / 10 + 1;
        }
        assert_eq!(prev, c.time_buckets - 1);
    }

    #[test]
    fn negative_delta_is_rejected() {
        assert!(relative_time_bucket(-1, &ModelConfig::default()).is_err());
    }
}
