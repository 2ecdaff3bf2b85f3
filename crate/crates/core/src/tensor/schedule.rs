use crate::error::{Error, Result};

/// Linear decay `alpha0 * (1 - t / total)`, clamped at zero.
pub fn lr_schedule(t: u64, alpha0: f64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("lr schedule needs total iterations > 0".into()));
    }
    Ok((alpha0 * (1.0 - t as f64 / total as f64)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 1e-4, 100_000).unwrap(), 1e-4);
        assert_eq!(lr_schedule(100_000, 1e-4, 100_000).unwrap(), 0.0);
        assert!((lr_schedule(25_000, 1e-4, 100_000).unwrap() - 7.5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(200_000, 1e-4, 100_000).unwrap(), 0.0);
        assert!(lr_schedule(0, 1e-4, 0).is_err());
    }
}
