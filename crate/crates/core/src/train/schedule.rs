use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`;
/// steps past `total` stay at `lr_min`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos())
}

impl Schedule {
    pub fn lr(self, t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
        match self {
            Schedule::Constant => lr_max,
            Schedule::Cosine => cosine_lr(t, total, lr_max, lr_min),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1.0, 0.1), 1.0);
        assert_eq!(cosine_lr(100, 100, 1.0, 0.1), 0.1);
        assert!((cosine_lr(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_lr(150, 100, 1.0, 0.1), 0.1);
    }
}
