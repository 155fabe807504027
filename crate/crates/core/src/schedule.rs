//! Progressive expert-start-epoch schedule: a linear ramp over the meta
//! iterations, sampled uniformly inside a trailing window.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    /// Largest allowed expert start epoch.
    pub max_start: usize,
    /// Minimum start epoch at iteration 0.
    pub delta: usize,
    /// Width of the sampling window below the current maximum.
    pub w: f64,
    /// Total meta-iterations the ramp is spread over.
    pub total_iterations: usize,
    /// When false the ramp is disabled and starts are uniform over
    /// [0, max_start].
    pub progressive: bool,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta > self.max_start {
            return Err(Error::Config(format!(
                "schedule delta {} exceeds max_start {}",
                self.delta, self.max_start
            )));
        }
        if self.w < 0.0 {
            return Err(Error::Config("schedule window w must be >= 0".into()));
        }
        if self.total_iterations < 1 {
            return Err(Error::Config("schedule needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Current ramp value: min((it/total)·max_start + delta, max_start).
pub fn max_start_at(it: usize, cfg: &ScheduleConfig) -> f64 {
    let ramp =
        (it as f64 / cfg.total_iterations as f64) * cfg.max_start as f64 + cfg.delta as f64;
    ramp.min(cfg.max_start as f64)
}

/// Uniform integer start epoch in
/// [max(0, ceil(max_start_at − w)), floor(max_start_at)].
pub fn sample_start<R: Rng>(it: usize, cfg: &ScheduleConfig, rng: &mut R) -> usize {
    if !cfg.progressive {
        return rng.gen_range(0..=cfg.max_start);
    }
    let cur = max_start_at(it, cfg);
    let hi = cur.floor() as usize;
    let lo_f = (cur - cfg.w).ceil();
    let lo = if lo_f < 0.0 { 0 } else { lo_f as usize };
    let lo = lo.min(hi);
    rng.gen_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(max_start: usize, delta: usize, w: f64, total: usize) -> ScheduleConfig {
        ScheduleConfig {
            max_start,
            delta,
            w,
            total_iterations: total,
            progressive: true,
        }
    }

    #[test]
    fn ramp_anchors() {
        let c = cfg(40, 2, 3.0, 100);
        assert_eq!(max_start_at(0, &c), 2.0);
        assert_eq!(max_start_at(50, &c), 22.0);
        assert_eq!(max_start_at(100, &c), 40.0); // clamped from 42
    }

    #[test]
    fn ramp_is_monotone() {
        let c = cfg(17, 1, 2.0, 57);
        let mut prev = f64::NEG_INFINITY;
        for it in 0..=57 {
            let v = max_start_at(it, &c);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn degenerate_window_is_deterministic() {
        let c = cfg(40, 2, 0.0, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for it in [0, 25, 50, 99, 100] {
            let expected = max_start_at(it, &c).floor() as usize;
            for _ in 0..10 {
                assert_eq!(sample_start(it, &c, &mut rng), expected);
            }
        }
    }

    #[test]
    fn lower_clamp_at_zero() {
        let c = cfg(40, 2, 5.0, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let s = sample_start(0, &c, &mut rng);
            assert!(s <= 2, "start {s} outside {{0,1,2}}");
        }
    }

    #[test]
    fn window_uniformity() {
        // ramp position where the window is exactly {10,...,14}
        let c = cfg(40, 2, 4.0, 100);
        let it = 30; // 0.3*40+2 = 14
        assert_eq!(max_start_at(it, &c), 14.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 5];
        for _ in 0..10000 {
            let s = sample_start(it, &c, &mut rng);
            assert!((10..=14).contains(&s));
            counts[s - 10] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 2000).abs() <= 200, "count {c}");
        }
    }

    #[test]
    fn bounds_hold_everywhere() {
        let c = cfg(23, 3, 2.5, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for it in 0..=77 {
            for _ in 0..20 {
                let s = sample_start(it, &c, &mut rng);
                assert!(s <= c.max_start);
                assert!(s as f64 >= max_start_at(it, &c) - c.w - 1.0);
            }
        }
    }

    #[test]
    fn disabled_mode_covers_full_range() {
        let c = ScheduleConfig { progressive: false, ..cfg(6, 2, 1.0, 10) };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[sample_start(9, &c, &mut rng)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
