//! Forward diffusion, reverse-step arithmetic, loss targets, and the
//! ELBO-gap quantities used to compare truncated against vanilla sampling.
//!
//! Every operation is pure: noise is always a parameter, never drawn
//! internally, so callers control determinism and may parallelize freely.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::image::{pairwise_sum, ImageTensor};
use crate::schedule::VarianceSchedule;
use crate::{Error, Result};

/// One reverse-process transition: an isotropic Gaussian over images.
#[derive(Debug, Clone)]
pub struct GaussianStep {
    pub mean: ImageTensor,
    pub std: f64,
}

/// Loss flavor for noise prediction. The configuration default is L1; the
/// squared form is kept selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    L1,
    L2,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::L1 => write!(f, "l1"),
            LossKind::L2 => write!(f, "l2"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::invalid(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Draw a unit-Gaussian image with the given shape.
pub fn gaussian_image<R: Rng + ?Sized>(rng: &mut R, channels: usize, height: usize, width: usize) -> ImageTensor {
    let data: Vec<f64> = (0..channels * height * width)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    ImageTensor::from_vec(channels, height, width, data).expect("gaussian draw is finite")
}

/// Closed-form marginal: `sqrt(gamma_t) * y0 + sqrt(1 - gamma_t) * eps`.
///
/// `t = 0` is accepted and returns `y0` exactly (`gamma_0 = 1`).
pub fn forward_marginal(
    y0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    y0.require_same_shape(eps)?;
    let gamma = schedule.gamma(t)?;
    y0.scale_add(gamma.sqrt(), eps, (1.0 - gamma).sqrt())
}

/// One forward step: `sqrt(alpha_t) * y_prev + sqrt(1 - alpha_t) * eps`.
pub fn forward_step(
    y_prev: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    y_prev.require_same_shape(eps)?;
    let alpha = schedule.alpha(t)?;
    y_prev.scale_add(alpha.sqrt(), eps, (1.0 - alpha).sqrt())
}

/// Mean of the reverse transition given a noise estimate:
/// `(y_t - (1 - alpha_t)/sqrt(1 - gamma_t) * eps_hat) / sqrt(alpha_t)`.
pub fn reverse_mean(
    y_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    y_t.require_same_shape(eps_hat)?;
    let alpha = schedule.alpha(t)?;
    let gamma = schedule.gamma(t)?;
    let coef = (1.0 - alpha) / (1.0 - gamma).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    y_t.scale_add(inv_sqrt_alpha, eps_hat, -coef * inv_sqrt_alpha)
}

/// One stochastic reverse step. At `t = 1` the step is deterministic and
/// `eps` must be the zero image.
pub fn reverse_step(
    y_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    eps: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    y_t.require_same_shape(eps)?;
    if t == 1 && eps.data().iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("final reverse step (t=1) requires zero injected noise"));
    }
    let mean = reverse_mean(y_t, t, eps_hat, schedule)?;
    let sigma = if t == 1 { 0.0 } else { schedule.sigma(t)? };
    mean.scale_add(1.0, eps, sigma)
}

/// The reverse transition as an explicit Gaussian (mean, std).
pub fn reverse_transition(
    y_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<GaussianStep> {
    let mean = reverse_mean(y_t, t, eps_hat, schedule)?;
    let std = if t == 1 { 0.0 } else { schedule.sigma(t)? };
    Ok(GaussianStep { mean, std })
}

/// Closed-form boundary term of the truncated-sampling ELBO:
/// `0.5 * gamma_T / (1 - gamma_T) * ||x - y0||^2`, summed over elements.
pub fn elbo_truncation_term(
    x: &ImageTensor,
    y0: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<f64> {
    x.require_same_shape(y0)?;
    let gamma_t = schedule.gamma(schedule.t_max())?;
    Ok(0.5 * gamma_t / (1.0 - gamma_t) * x.sq_distance(y0)?)
}

/// Boundary term of the vanilla ELBO: `KL(q(y_T|y0) || N(0, I))`.
pub fn elbo_vanilla_term(y0: &ImageTensor, schedule: &VarianceSchedule) -> Result<f64> {
    let gamma_t = schedule.gamma(schedule.t_max())?;
    let zero = ImageTensor::zeros(y0.channels(), y0.height(), y0.width());
    let mean = y0.scale_add(gamma_t.sqrt(), &zero, 0.0)?;
    kl_diag_gaussian(&mean, 1.0 - gamma_t, &zero, 1.0)
}

/// Diagonal-Gaussian KL divergence with scalar variances, summed over elements.
pub fn kl_diag_gaussian(
    mu1: &ImageTensor,
    var1: f64,
    mu2: &ImageTensor,
    var2: f64,
) -> Result<f64> {
    mu1.require_same_shape(mu2)?;
    if var1 <= 0.0 || var2 <= 0.0 {
        return Err(Error::invalid(format!("nonpositive variances {var1}, {var2}")));
    }
    let n = mu1.len() as f64;
    let log_ratio = (var2 / var1).ln();
    let base = 0.5 * (log_ratio + var1 / var2 - 1.0);
    let mean_term = 0.5 / var2 * mu1.sq_distance(mu2)?;
    Ok(n * base + mean_term)
}

/// Mean absolute (L1) or mean squared (L2) difference between noise images.
pub fn noise_loss(eps_hat: &ImageTensor, eps: &ImageTensor, kind: LossKind) -> Result<f64> {
    eps_hat.require_same_shape(eps)?;
    let diffs: Vec<f64> = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| match kind {
            LossKind::L1 => (a - b).abs(),
            LossKind::L2 => (a - b) * (a - b),
        })
        .collect();
    Ok(pairwise_sum(&diffs) / diffs.len() as f64)
}
