//! Variance schedules for one diffusion chain.
//!
//! All scalar coefficients live here: the per-step variances `beta_t`, the
//! retained fractions `alpha_t = 1 - beta_t`, the cumulative products
//! `gamma_t = prod_{i<=t} alpha_i`, and the reverse-step noise standard
//! deviations `sigma_t = sqrt(beta_t)`.
//!
//! Indexing is 1-based for `t` with `gamma_0 = 1` as the documented boundary.

use crate::{Error, Result};

/// Immutable variance schedule; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    gammas: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Double-double product step: multiplies the high/low accumulator by `x`
/// using an FMA-based two-product, keeping ~106 bits through the chain.
fn dd_mul(hi: f64, lo: f64, x: f64) -> (f64, f64) {
    let p = hi * x;
    let e = hi.mul_add(x, -p); // exact rounding error of hi*x
    let lo2 = lo.mul_add(x, e);
    let s = p + lo2;
    let err = (p - s) + lo2;
    (s, err)
}

impl VarianceSchedule {
    /// Linear interpolation of `beta` from `beta_start` (t=1) to `beta_end` (t=T).
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::invalid("non-finite beta bounds"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { t as f64 / (t_max - 1) as f64 };
            betas.push(beta_start + frac * (beta_end - beta_start));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        // gamma accumulated in double-double precision, stored at working precision
        let mut gammas = Vec::with_capacity(t_max);
        let (mut hi, mut lo) = (1.0f64, 0.0f64);
        for &a in &alphas {
            let (h, l) = dd_mul(hi, lo, a);
            hi = h;
            lo = l;
            gammas.push(hi + lo);
        }
        let sigmas: Vec<f64> = betas.iter().map(|b| b.sqrt()).collect();
        Ok(VarianceSchedule { t_max, beta_start, beta_end, betas, alphas, gammas, sigmas })
    }

    /// Number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// The `(T, beta_start, beta_end)` triple a checkpoint stores.
    pub fn triple(&self) -> (usize, f64, f64) {
        (self.t_max, self.beta_start, self.beta_end)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            Err(Error::TimeOutOfRange { t: t as i64, max: self.t_max })
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// `alpha_t = 1 - beta_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `gamma_t` for `t` in `0..=T`, with `gamma_0 = 1`.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::TimeOutOfRange { t: t as i64, max: self.t_max });
        }
        Ok(if t == 0 { 1.0 } else { self.gammas[t - 1] })
    }

    /// Reverse-step noise std `sigma_t = sqrt(beta_t)` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigmas[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(VarianceSchedule::linear(0, 1e-4, 1e-2).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 1e-2).is_err());
        assert!(VarianceSchedule::linear(10, 1e-2, 1e-4).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(VarianceSchedule::linear(10, f64::NAN, 1e-2).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, f64::INFINITY).is_err());
    }

    #[test]
    fn single_step_gamma_is_one_minus_beta() {
        let b = 0.37;
        let s = VarianceSchedule::linear(1, b, b).unwrap();
        assert_eq!(s.gamma(1).unwrap(), 1.0 - b);
    }

    #[test]
    fn endpoint_betas_match_bounds() {
        let s = VarianceSchedule::linear(2000, 1e-6, 1e-2).unwrap();
        assert_eq!(s.beta(1).unwrap(), 1e-6);
        assert_eq!(s.beta(2000).unwrap(), 1e-2);
        assert_eq!(s.gamma(0).unwrap(), 1.0);
        assert_eq!(s.gamma(1).unwrap(), 1.0 - 1e-6);
    }

    #[test]
    fn gamma_recurrence_holds() {
        let s = VarianceSchedule::linear(500, 1e-5, 2e-2).unwrap();
        for t in 1..=500 {
            let lhs = s.gamma(t).unwrap();
            let rhs = s.gamma(t - 1).unwrap() * (1.0 - s.beta(t).unwrap());
            assert!((lhs - rhs).abs() <= 1e-14, "recurrence broken at t={t}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gamma_strictly_decreasing() {
        let s = VarianceSchedule::linear(2000, 1e-6, 1e-2).unwrap();
        for t in 1..=2000 {
            assert!(s.gamma(t).unwrap() < s.gamma(t - 1).unwrap(), "not decreasing at t={t}");
        }
        let g_t = s.gamma(2000).unwrap();
        let g_1 = s.gamma(1).unwrap();
        assert!(0.0 < g_t && g_t < g_1 && g_1 < 1.0);
    }

    #[test]
    fn alpha_beta_partition() {
        let s = VarianceSchedule::linear(100, 1e-4, 5e-2).unwrap();
        for t in 1..=100 {
            let a = s.alpha(t).unwrap();
            let b = s.beta(t).unwrap();
            let sg = s.sigma(t).unwrap();
            assert!((a + b - 1.0).abs() < 1e-15);
            assert!((sg * sg + a - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_t_rejected() {
        let s = VarianceSchedule::linear(10, 1e-4, 1e-2).unwrap();
        assert!(s.gamma(11).is_err());
        assert!(s.beta(0).is_err());
        assert!(s.beta(11).is_err());
        assert!(s.sigma(0).is_err());
    }

    proptest! {
        #[test]
        fn betas_monotone_nondecreasing(
            t_max in 1usize..300,
            start in 1e-6f64..1e-3,
            spread in 0.0f64..0.05,
        ) {
            let s = VarianceSchedule::linear(t_max, start, start + spread).unwrap();
            for t in 2..=t_max {
                prop_assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
            }
        }

        #[test]
        fn gamma_recurrence_prop(t_max in 1usize..200, end in 1e-3f64..0.1) {
            let s = VarianceSchedule::linear(t_max, 1e-6, end).unwrap();
            for t in 1..=t_max {
                let lhs = s.gamma(t).unwrap();
                let rhs = s.gamma(t - 1).unwrap() * (1.0 - s.beta(t).unwrap());
                prop_assert!((lhs - rhs).abs() <= 1e-14);
            }
        }
    }
}
