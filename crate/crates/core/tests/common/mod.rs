//! Shared oracles and statistics helpers for the integration suites.
//!
//! Everything here is deliberately independent of the library's own
//! computational paths: exact rational arithmetic for products, naive
//! summation for moments, and textbook formulas for the KS test.

#![allow(dead_code)]

use bfr_core::diffusion::LossKind;
use bfr_core::image::ImageTensor;
use bfr_core::nn::NoisePredictor;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed};

// ---------------------------------------------------------------------------
// Exact cumulative-product oracle
// ---------------------------------------------------------------------------

/// Exact cumulative products of `1 - beta_t` as rationals.
pub fn exact_gamma_prefixes(betas: &[f64]) -> Vec<BigRational> {
    let one = BigRational::from_integer(BigInt::from(1));
    let mut acc = one.clone();
    let mut out = Vec::with_capacity(betas.len());
    for &b in betas {
        let beta = BigRational::from_f64(b).expect("finite beta");
        acc *= one.clone() - beta;
        out.push(acc.clone());
    }
    out
}

/// Relative error of `value` against an exact rational, computed exactly.
pub fn rel_err_exact(value: f64, exact: &BigRational) -> f64 {
    let v = BigRational::from_f64(value).expect("finite value");
    let diff = (&v - exact).abs();
    let denom = exact.abs();
    let ratio = diff / denom;
    // the ratio is tiny; converting through f64 at the end is safe
    let num = ratio.numer();
    let den = ratio.denom();
    big_to_f64(num) / big_to_f64(den)
}

fn big_to_f64(x: &BigInt) -> f64 {
    // scale down so both numerator and denominator stay in f64 range
    let bits = x.bits();
    if bits <= 1000 {
        let (_, digits) = x.to_u64_digits();
        let mut v = 0.0f64;
        for d in digits.iter().rev() {
            v = v * 2f64.powi(64) + *d as f64;
        }
        v
    } else {
        f64::INFINITY
    }
}

// ---------------------------------------------------------------------------
// Moment statistics
// ---------------------------------------------------------------------------

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn se_mean(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Approximate standard error of the sample variance (normal samples).
pub fn se_variance(xs: &[f64]) -> f64 {
    variance(xs) * (2.0 / (xs.len() as f64 - 1.0)).sqrt()
}

// ---------------------------------------------------------------------------
// Two-sample Kolmogorov-Smirnov test
// ---------------------------------------------------------------------------

/// Asymptotic two-sample KS p-value.
pub fn ks2_p_value(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xs[i];
        let y = ys[j];
        if x <= y {
            i += 1;
        }
        if y <= x {
            j += 1;
        }
        let diff = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        if diff > d {
            d = diff;
        }
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    ks_q(lambda)
}

fn ks_q(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

pub struct FdProblem {
    pub noisy: Vec<ImageTensor>,
    pub conds: Option<Vec<ImageTensor>>,
    pub ts: Vec<usize>,
    pub targets: Vec<ImageTensor>,
}

/// Central finite difference of the L2 noise loss w.r.t. one parameter.
pub fn fd_grad(model: &NoisePredictor<f64>, prob: &FdProblem, idx: usize, h: f64) -> f64 {
    let eval = |delta: f64| -> f64 {
        let mut m = model.clone();
        m.params_mut()[idx] += delta;
        let (loss, _) = m
            .loss_and_grad(
                &prob.noisy,
                prob.conds.as_deref(),
                &prob.ts,
                &prob.targets,
                LossKind::L2,
                false,
            )
            .expect("fd eval");
        loss
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn grad_rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6)
}
