//! Step learning-rate schedule: the rate halves every `halve_every` epochs,
//! i.e. lr(epoch) = initial · 0.5^(epoch / halve_every) with integer division
//! and epochs counted from zero.

#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, halve_every: usize) -> Self {
        assert!(halve_every > 0, "halve_every must be positive");
        LrSchedule {
            initial,
            halve_every,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}
