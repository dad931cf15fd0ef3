//! Learning-rate and batch-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup, constant, cosine decay, then a two-level constant tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Rate after the first tail portion.
    pub tail_lr: f64,
    pub warmup_steps: u64,
    pub constant_steps: u64,
    pub decay_steps: u64,
    /// Length of the first tail portion, held at `final_lr`.
    pub tail_steps: u64,
}

// Phase fractions of a full run.
const WARMUP_FRAC: f64 = 0.01;
const DECAY_FRAC: f64 = 0.146;
const TAIL_FRAC: f64 = 0.0407;
/// Share of the tail spent at `final_lr` before the lower constant.
const TAIL_HIGH_SHARE: f64 = 2.0 / 3.0;
/// `tail_lr / final_lr`.
const TAIL_DROP: f64 = 7.3 / 22.0;

impl LrSchedule {
    /// Phase lengths scaled to `total_steps`.
    pub fn scaled(total_steps: u64, peak_lr: f64, final_lr: f64) -> Self {
        let n = total_steps as f64;
        let warmup = (n * WARMUP_FRAC).round() as u64;
        let decay = (n * DECAY_FRAC).round() as u64;
        let tail = (n * TAIL_FRAC).round() as u64;
        let tail_high = (tail as f64 * TAIL_HIGH_SHARE).round() as u64;
        LrSchedule {
            peak_lr,
            final_lr,
            tail_lr: final_lr * TAIL_DROP,
            warmup_steps: warmup,
            constant_steps: total_steps.saturating_sub(warmup + decay + tail),
            decay_steps: decay,
            tail_steps: tail_high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.peak_lr, self.final_lr, self.tail_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {rates:?}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let mut s = step;
        if s < self.warmup_steps {
            return self.peak_lr * s as f64 / self.warmup_steps as f64;
        }
        s -= self.warmup_steps;
        if s < self.constant_steps {
            return self.peak_lr;
        }
        s -= self.constant_steps;
        if s < self.decay_steps {
            let t = s as f64 / self.decay_steps as f64;
            let half = (self.peak_lr - self.final_lr) / 2.0;
            return (self.peak_lr + self.final_lr) / 2.0 + half * (std::f64::consts::PI * t).cos();
        }
        s -= self.decay_steps;
        if s < self.tail_steps {
            self.final_lr
        } else {
            self.tail_lr
        }
    }
}

/// Piecewise-constant batch size: `(first_step, size)` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule(pub Vec<(u64, usize)>);

impl BatchSchedule {
    pub fn constant(size: usize) -> Self {
        BatchSchedule(vec![(0, size)])
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.0;
        if e.first().map(|p| p.0) != Some(0) {
            return Err(Error::Config("batch schedule must start at step 0".into()));
        }
        if e.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("batch schedule steps must increase".into()));
        }
        if e.iter().any(|p| p.1 == 0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn size_at(&self, step: u64) -> usize {
        self.0
            .iter()
            .take_while(|p| p.0 <= step)
            .last()
            .map_or(self.0[0].1, |p| p.1)
    }

    /// `0:16,100:32` form.
    pub fn render(&self) -> String {
        self.0
            .iter()
            .map(|(s, b)| format!("{s}:{b}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "batch schedule `{s}` is not of the form step:size,..."
            ))
        };
        let entries = s
            .split(',')
            .map(|p| {
                let (a, b) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok((
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let sched = BatchSchedule(entries);
        sched.validate()?;
        Ok(sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak_lr: 1e-3,
            final_lr: 1e-4,
            tail_lr: 3e-5,
            warmup_steps: 10,
            constant_steps: 20,
            decay_steps: 40,
            tail_steps: 6,
        }
    }

    #[test]
    fn phase_boundaries() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert_eq!(s.lr_at(29), 1e-3);
        assert!((s.lr_at(50) - 5.5e-4).abs() < 1e-12);
        assert_eq!(s.lr_at(70), 1e-4);
        assert_eq!(s.lr_at(75), 1e-4);
        assert_eq!(s.lr_at(76), 3e-5);
        assert_eq!(s.lr_at(10_000), 3e-5);
    }

    #[test]
    fn scaled_phases_cover_run() {
        let s = LrSchedule::scaled(3000, 1e-3, 1e-4);
        assert_eq!((s.warmup_steps, s.decay_steps, s.tail_steps), (30, 438, 81));
        assert_eq!(
            s.warmup_steps + s.constant_steps + s.decay_steps + 122,
            3000
        );
        assert!((s.tail_lr - 1e-4 * 7.3 / 22.0).abs() < 1e-18);
    }

    #[test]
    fn batch_schedule_lookup() {
        let b = BatchSchedule::parse("0:4, 10:8").unwrap();
        assert_eq!(
            (b.size_at(0), b.size_at(9), b.size_at(10), b.size_at(99)),
            (4, 4, 8, 8)
        );
        assert_eq!(b.render(), "0:4,10:8");
        for bad in ["1:4", "0:4,0:8", "0:0", "x"] {
            assert!(BatchSchedule::parse(bad).is_err(), "{bad}");
        }
    }
}
