//! Exponentially weighted moving average used to predict node usage.

use crate::error::{Error, Result};

/// `pred' = alpha * sample + (1 - alpha) * prev`.
pub fn predict(alpha: f64, prev: f64, sample: f64) -> f64 {
    alpha * sample + (1.0 - alpha) * prev
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ewma {
    alpha: f64,
    value: Option<f64>,
}

impl Ewma {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!(
                "ewma alpha must be in (0, 1], got {alpha}"
            )));
        }
        Ok(Self { alpha, value: None })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Folds in a sample; the first sample becomes the prediction.
    pub fn update(&mut self, sample: f64) -> f64 {
        let next = match self.value {
            None => sample,
            Some(prev) => predict(self.alpha, prev, sample),
        };
        self.value = Some(next);
        next
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_sample_initializes() {
        let mut e = Ewma::new(0.5).unwrap();
        assert_eq!(e.value(), None);
        assert_eq!(e.update(100.0), 100.0);
    }

    #[test]
    fn half_alpha_example() {
        let mut e = Ewma::new(0.5).unwrap();
        e.update(100.0);
        assert_eq!(e.update(200.0), 150.0);
    }

    #[test]
    fn constant_stream_is_a_fixed_point() {
        let mut e = Ewma::new(0.3).unwrap();
        for _ in 0..50 {
            assert!((e.update(42.0) - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_range_checked() {
        assert!(Ewma::new(0.0).is_err());
        assert!(Ewma::new(1.5).is_err());
        assert!(Ewma::new(f64::NAN).is_err());
        assert!(Ewma::new(1.0).is_ok());
    }

    proptest! {
        #[test]
        fn stays_within_sample_range(alpha in 0.01f64..=1.0, samples in prop::collection::vec(0.0f64..1e9, 1..200)) {
            let mut e = Ewma::new(alpha).unwrap();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in samples {
                lo = lo.min(s);
                hi = hi.max(s);
                let v = e.update(s);
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}
