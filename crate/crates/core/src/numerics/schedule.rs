use super::Float;

/// Linear warmup followed by cosine decay to 1% of the base rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: Float,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

const FLOOR_FRACTION: f64 = 0.01;

impl LrSchedule {
    pub fn new(base_lr: Float, total_steps: usize, warmup_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    pub fn lr(&self, step: usize) -> Float {
        let base = self.base_lr as f64;
        if step < self.warmup_steps {
            return (base * (step + 1) as f64 / self.warmup_steps as f64) as Float;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = base * FLOOR_FRACTION;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (floor + (base - floor) * cos) as Float
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule::new(3e-4, 1000, 100);
        for step in 1..100 {
            assert!(s.lr(step) > s.lr(step - 1));
        }
        for step in 101..1200 {
            assert!(s.lr(step) <= s.lr(step - 1));
        }
        for step in 0..1000 {
            assert!(s.lr(step) > 0.0);
        }
        assert!(s.lr(1000) <= 3e-4 * 0.01 * (1.0 + 1e-6));
        assert!((s.lr(100) - 3e-4).abs() < 1e-9);
    }

    #[test]
    fn no_warmup() {
        let s = LrSchedule::new(1.0, 10, 0);
        assert_eq!(s.lr(0), 1.0);
        assert!((s.lr(10) as f64 - 0.01).abs() < 1e-7);
    }
}
