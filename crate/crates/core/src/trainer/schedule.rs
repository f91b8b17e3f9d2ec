//! Per-step learning-rate, weight-decay and EMA-momentum schedules.
//!
//! All interpolation goes through [`lerp`], which returns its endpoints
//! exactly at weights 0 and 1, so the schedules hit their configured values
//! bit-for-bit at step 0, at the end of warmup and at the final step.

use std::f64::consts::PI;

use super::TrainConfig;

pub fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

/// Half-cosine ramp from 0 to 1 over `q` in [0, 1]; exact at both ends.
pub fn cosine_ramp(q: f64) -> f64 {
    0.5 * (1.0 - (PI * q.clamp(0.0, 1.0)).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr: (f64, f64, f64),
    pub wd: (f64, f64),
    pub ema: (f64, f64),
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            total_steps: cfg.epochs * steps_per_epoch,
            warmup_steps: (cfg.warmup_epochs * steps_per_epoch).min(cfg.epochs * steps_per_epoch),
            lr: (cfg.lr_start, cfg.lr_peak, cfg.lr_final),
            wd: (cfg.wd_start, cfg.wd_end),
            ema: (cfg.ema_start, cfg.ema_end),
        }
    }

    fn last(&self) -> usize {
        self.total_steps.saturating_sub(1)
    }

    /// Fraction of training done at `step`, 1 at the final step.
    fn progress(&self, step: usize) -> f64 {
        if self.last() == 0 {
            return 0.0;
        }
        (step as f64 / self.last() as f64).min(1.0)
    }

    /// Linear warmup `lr.0 -> lr.1` over the warmup steps, then half-cosine
    /// decay reaching `lr.2` at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (start, peak, fin) = self.lr;
        if step < self.warmup_steps {
            return lerp(start, peak, step as f64 / self.warmup_steps as f64);
        }
        let span = self.last().saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step >= self.last() && self.last() > self.warmup_steps { fin } else { peak };
        }
        let q = (step - self.warmup_steps) as f64 / span as f64;
        lerp(peak, fin, cosine_ramp(q))
    }

    /// Half-cosine ascent `wd.0 -> wd.1`.
    pub fn wd_at(&self, step: usize) -> f64 {
        lerp(self.wd.0, self.wd.1, cosine_ramp(self.progress(step)))
    }

    /// Linear ascent `ema.0 -> ema.1`.
    pub fn ema_at(&self, step: usize) -> f64 {
        lerp(self.ema.0, self.ema.1, self.progress(step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule::new(&TrainConfig::default(), 7)
    }

    #[test]
    fn endpoints_exact() {
        let s = sched();
        assert_eq!((s.total_steps, s.warmup_steps), (350, 35));
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(35), 1e-3);
        assert_eq!(s.lr_at(349), 1e-6);
        assert_eq!(s.wd_at(0), 0.04);
        assert_eq!(s.wd_at(349), 0.4);
        assert_eq!(s.ema_at(0), 0.996);
        assert_eq!(s.ema_at(349), 1.0);
    }

    #[test]
    fn monotone_pieces() {
        let s = sched();
        for t in 1..35 {
            assert!(s.lr_at(t) > s.lr_at(t - 1));
        }
        for t in 36..350 {
            assert!(s.lr_at(t) <= s.lr_at(t - 1));
            assert!(s.wd_at(t) >= s.wd_at(t - 1));
            assert!(s.ema_at(t) >= s.ema_at(t - 1));
        }
    }

    #[test]
    fn matches_closed_form() {
        let s = sched();
        let t = 200;
        let q = (t - 35) as f64 / (349 - 35) as f64;
        let want = 1e-6 + (1e-3 - 1e-6) * 0.5 * (1.0 + (PI * q).cos());
        assert!((s.lr_at(t) - want).abs() < 1e-15);
        let want = 1e-4 + (1e-3 - 1e-4) * 10.0 / 35.0;
        assert!((s.lr_at(10) - want).abs() < 1e-15);
    }
}
