//! Log-linear noise schedule.
//!
//! The rate is `sigma(t) = sigma_bar_max * c^t * ln(c) / (c - 1)` with decay
//! `c` in (0, 1), so that the total noise `sigma_bar(t) = sigma_bar_max * (c^t - 1) / (c - 1)`
//! is zero at `t = 0` and `sigma_bar_max` at `t = 1`. The rate at `t = 1` is
//! `sigma(0) * c`: small for small `c` but never exactly zero.

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_BAR_MAX: f64 = 0.25;
pub const DEFAULT_DECAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    sigma_bar_max: f64,
    decay: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_bar_max: DEFAULT_SIGMA_BAR_MAX,
            decay: DEFAULT_DECAY,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_bar_max: f64, decay: f64) -> Result<Self> {
        if !(sigma_bar_max > 0.0 && sigma_bar_max.is_finite()) {
            return Err(Error::Invalid(format!(
                "sigma_bar_max must be positive and finite, got {sigma_bar_max}"
            )));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Invalid(format!(
                "schedule decay must lie in (0, 1), got {decay}"
            )));
        }
        Ok(Self {
            sigma_bar_max,
            decay,
        })
    }

    pub fn sigma_bar_max(&self) -> f64 {
        self.sigma_bar_max
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Noise rate at time `t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        let c = self.decay;
        Ok(self.sigma_bar_max * c.powf(t) * c.ln() / (c - 1.0))
    }

    /// Total noise accumulated over `[0, t]`.
    pub fn sigma_bar(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        if t == 0.0 {
            return Ok(0.0);
        }
        if t == 1.0 {
            return Ok(self.sigma_bar_max);
        }
        let c = self.decay;
        // c^t - 1 = expm1(t ln c) keeps precision near t = 0.
        Ok(self.sigma_bar_max * (t * c.ln()).exp_m1() / (c - 1.0))
    }

    /// Inverse of [`sigma_bar`](Self::sigma_bar): the time at which the total
    /// noise reaches `total`.
    pub fn time_at_total_noise(&self, total: f64) -> Result<f64> {
        if !(0.0..=self.sigma_bar_max).contains(&total) {
            return Err(Error::Domain(format!(
                "total noise {total} outside [0, {}]",
                self.sigma_bar_max
            )));
        }
        let c = self.decay;
        let t = (total * (c - 1.0) / self.sigma_bar_max).ln_1p() / c.ln();
        Ok(t.clamp(0.0, 1.0))
    }

    /// Total noise normalised to `[0, 1]`; the default time input of the scorer.
    pub fn normalized_total_noise(&self, t: f64) -> Result<f64> {
        Ok(self.sigma_bar(t)? / self.sigma_bar_max)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steep() -> NoiseSchedule {
        NoiseSchedule::new(20.0, 1e-4).unwrap()
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = 0.5 * (f(a) + f(b));
        for i in 1..n {
            acc += f(a + i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn sigma_at_zero_matches_scalar_evaluation() {
        let s = steep();
        let expected = 20.0 * (1e-4f64).ln() / (1e-4 - 1.0);
        assert!((s.sigma(0.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 184.23).abs() < 5e-3);
    }

    #[test]
    fn sigma_bar_endpoints_and_midpoint() {
        let s = steep();
        assert_eq!(s.sigma_bar(0.0).unwrap(), 0.0);
        assert_eq!(s.sigma_bar(1.0).unwrap(), 20.0);
        let mid = s.sigma_bar(0.5).unwrap();
        assert!((mid - 20.0 * (1e-2 - 1.0) / (1e-4 - 1.0)).abs() < 1e-12);
        assert!((mid - 19.802).abs() < 5e-4);
    }

    #[test]
    fn out_of_range_time_is_a_domain_error() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.sigma(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.sigma_bar(1.0001), Err(Error::Domain(_))));
        assert!(NoiseSchedule::new(1.0, 1.0).is_err());
        assert!(NoiseSchedule::new(-1.0, 0.5).is_err());
    }

    #[test]
    fn rate_is_decreasing_and_total_noise_increasing() {
        for s in [steep(), NoiseSchedule::default()] {
            assert!(s.sigma(0.2).unwrap() > s.sigma(0.8).unwrap());
            let mut prev_rate = f64::INFINITY;
            let mut prev_total = -1.0;
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let rate = s.sigma(t).unwrap();
                let total = s.sigma_bar(t).unwrap();
                assert!(rate > 0.0 && rate < prev_rate);
                assert!(total > prev_total);
                prev_rate = rate;
                prev_total = total;
            }
        }
    }

    #[test]
    fn total_noise_equals_quadrature_of_rate() {
        for s in [steep(), NoiseSchedule::default()] {
            let full = trapezoid(|t| s.sigma(t).unwrap(), 0.0, 1.0, 1_000_000);
            assert!((full - s.sigma_bar_max()).abs() / s.sigma_bar_max() < 1e-6);
            for k in 1..=10 {
                let t = k as f64 / 10.0;
                let n = (1_000_000.0 * t) as usize;
                let quad = trapezoid(|u| s.sigma(u).unwrap(), 0.0, t, n);
                let exact = s.sigma_bar(t).unwrap();
                assert!((quad - exact).abs() / exact < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn rate_is_derivative_of_total_noise() {
        for s in [steep(), NoiseSchedule::default()] {
            for k in 1..10 {
                let t = k as f64 / 10.0;
                let h = 1e-5;
                let fd = (s.sigma_bar(t + h).unwrap() - s.sigma_bar(t - h).unwrap()) / (2.0 * h);
                let rate = s.sigma(t).unwrap();
                assert!((fd - rate).abs() / rate < 1e-5, "t={t}");
            }
        }
    }

    #[test]
    fn inverse_total_noise_round_trips() {
        let s = NoiseSchedule::default();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let back = s.time_at_total_noise(s.sigma_bar(t).unwrap()).unwrap();
            assert!((back - t).abs() < 1e-12);
        }
    }
}
