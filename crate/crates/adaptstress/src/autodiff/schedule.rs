//! Warmup-cosine learning-rate schedule.

use crate::error::Error;
use crate::Result;

/// Learning rate at `epoch` (0-based): linear ramp 0 → `lr_max` over the
/// first `warmup` epochs, then cosine decay to 0 over the remainder.
pub fn cosine_warmup_lr(epoch: usize, warmup: usize, total: usize, lr_max: f64) -> Result<f64> {
    if warmup >= total {
        return Err(Error::Config(format!(
            "warmup ({warmup}) must be shorter than the schedule ({total})"
        )));
    }
    if epoch >= total {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {total}"
        )));
    }
    if epoch < warmup {
        return Ok(lr_max * epoch as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_end_is_lr_max() {
        assert_eq!(cosine_warmup_lr(10, 10, 350, 5e-4).unwrap(), 5e-4);
    }

    #[test]
    fn ramp_is_linear() {
        let lr = |e| cosine_warmup_lr(e, 10, 350, 1.0).unwrap();
        assert_eq!(lr(0), 0.0);
        assert!((lr(5) - 0.5).abs() < 1e-15);
        assert!((lr(9) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decay_end_is_near_zero() {
        let lr = cosine_warmup_lr(349, 10, 350, 5e-4).unwrap();
        // one cosine step from exact zero
        let one_step = 5e-4 * 0.5
            * (1.0 - (std::f64::consts::PI * 339.0 / 340.0).cos()).abs();
        assert!(lr > 0.0 && lr < one_step.max(1e-7), "{lr}");
    }

    #[test]
    fn cosine_midpoint_is_half() {
        // warmup 10, total 350 -> midpoint at epoch 10 + 170
        let lr = cosine_warmup_lr(180, 10, 350, 5e-4).unwrap();
        assert!((lr - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(cosine_warmup_lr(0, 10, 10, 1.0).is_err());
        assert!(cosine_warmup_lr(350, 10, 350, 1.0).is_err());
    }

    #[test]
    fn monotone_decay_after_warmup() {
        let mut prev = f64::INFINITY;
        for e in 10..350 {
            let lr = cosine_warmup_lr(e, 10, 350, 5e-4).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}
